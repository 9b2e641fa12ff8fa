"""Kernel backend selection.

The compiled extension is preferred; ``SLIDENUC_PURE_KERNELS=1`` (or a
failed build) selects the numpy fallback. ``ACTIVE_KERNELS`` names the
backend in use.
"""

from __future__ import annotations

import os

if os.environ.get("SLIDENUC_PURE_KERNELS"):
    from . import pure as _impl

    ACTIVE_KERNELS = "pure"
else:
    try:
        from . import _native as _impl  # type: ignore[attr-defined]

        ACTIVE_KERNELS = "native"
    except ImportError:
        from . import pure as _impl

        ACTIVE_KERNELS = "pure"

solve_dense = _impl.solve_dense
keep_in_rect = _impl.keep_in_rect

__all__ = ["solve_dense", "keep_in_rect", "ACTIVE_KERNELS"]
