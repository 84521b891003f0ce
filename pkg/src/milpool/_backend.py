"""Selects the compiled kernels when built, the numpy fallback otherwise.

Set ``MILPOOL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
kernels = _fallback

if os.environ.get("MILPOOL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        kernels = _kernels
        BACKEND = "cython"

power_pool_forward = kernels.power_pool_forward
power_pool_backward = kernels.power_pool_backward
median_filter_binary = kernels.median_filter_binary
