"""Hot-kernel dispatch: compiled Cython core when available, numpy otherwise.

Set ``TRICAST_PURE_PY=1`` to force the numpy fallback (used by the parity
tests and the kernel benchmark).
"""

from __future__ import annotations

import os

from . import _fallback

if os.environ.get("TRICAST_PURE_PY", "").strip() not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _fallback

BACKEND: str = _impl.BACKEND
HAVE_COMPILED: bool = BACKEND == "cython"

bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
canny_nms = _impl.canny_nms
canny_hysteresis = _impl.canny_hysteresis
