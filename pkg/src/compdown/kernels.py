"""Backend selection for the hot loops.

The compiled extension is used when it was built and imports cleanly; set
``COMPDOWN_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pykernels

if os.environ.get("COMPDOWN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

lag_sums = _impl.lag_sums
sgs_path = _impl.sgs_path

__all__ = ["BACKEND", "lag_sums", "sgs_path"]
