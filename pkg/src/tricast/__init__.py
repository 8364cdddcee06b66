"""tricast: an end-to-end controllable 3D generation pipeline on CPU.

A conditional 2D generator feeds a camera-modulated transformer that decodes
a triplane radiance field, rendered by volume ray marching — all built on an
in-repo tape autodiff core with compiled hot kernels (numpy fallback).
"""

from ._kernels import BACKEND as kernel_backend
from ._kernels import HAVE_COMPILED as have_compiled_kernels

__version__ = "0.1.0"

__all__ = ["__version__", "kernel_backend", "have_compiled_kernels"]
