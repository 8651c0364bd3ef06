"""Hot-loop kernels with backend selection at import.

The compiled Cython core is preferred when built; the pure-numpy fallback
is bit-identical, just slower. ``SALMASK_BACKEND=numpy|cython`` forces a
backend (``cython`` raises if the extension is missing).
"""
import os

from . import _np

_requested = os.environ.get("SALMASK_BACKEND", "auto").lower()

if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"SALMASK_BACKEND must be auto|cython|numpy, "
                     f"got {_requested!r}")

_impl = None
if _requested in ("auto", "cython"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "cython":
            raise
        _impl = None

if _impl is None:
    _impl = _np
    BACKEND = "numpy"
else:
    BACKEND = "cython"

correlate2d_replicate = _impl.correlate2d_replicate
im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "correlate2d_replicate", "im2col", "col2im"]
