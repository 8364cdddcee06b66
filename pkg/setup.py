"""Build script: compiles the optional Cython kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a failed compile downgrades to a warning instead
of failing the install.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext = Extension(
        "tricast._kernels._core",
        sources=["src/tricast/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffast-math"],
    )
    ext_modules = cythonize([ext], language_level="3")
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(f"warning: Cython kernels not built ({exc}); using numpy fallback\n")

setup(ext_modules=ext_modules)
