"""Backend selection for the convolution patch kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is loaded. Set ``MASKD_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
PURE_PYTHON_REQUESTED = os.environ.get("MASKD_PURE_PYTHON", "").lower() in ("1", "true", "yes")

if not PURE_PYTHON_REQUESTED:
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
else:
    _compiled = None

if _compiled is not None:
    im2col = _compiled.im2col
    col2im = _compiled.col2im
    BACKEND = "cython"
else:
    im2col = _kernels_py.im2col
    col2im = _kernels_py.col2im

__all__ = ["BACKEND", "PURE_PYTHON_REQUESTED", "im2col", "col2im"]
