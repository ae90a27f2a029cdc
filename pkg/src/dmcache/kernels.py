"""Kernel backend selection.

The compiled extension is used when it was built and ``DMCACHE_PURE_PYTHON``
is not set to ``1``; otherwise the numpy/pure-Python twins are used.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DMCACHE_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

mix64 = _impl.mix64
home_bucket = _impl.home_bucket
scan_neighborhood = _impl.scan_neighborhood
any_locked = _impl.any_locked
check_table = _impl.check_table
