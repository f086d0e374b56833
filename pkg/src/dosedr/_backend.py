"""Select the compiled kernel core when available, else the numpy twin.

Set ``DOSEDR_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("DOSEDR_PURE_PYTHON", "").strip() not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

window_moments = _impl.window_moments
self_moments = _impl.self_moments
gauss_average_density = _impl.gauss_average_density

__all__ = ["BACKEND", "window_moments", "self_moments", "gauss_average_density"]
