"""Backend selection for the hot dose-deposition loops.

Two interchangeable implementations live here: a numba-jitted incremental
voxel traversal and a pure-numpy fallback that sorts plane crossings. The
``BEAMOPT_BACKEND`` environment variable picks one (``numba`` or ``numpy``);
unset, numba is used when it imports cleanly. ``beamopt bench`` times both.
"""

from __future__ import annotations

import os
import warnings


def _select():
    choice = os.environ.get("BEAMOPT_BACKEND", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"BEAMOPT_BACKEND must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numpy":
        from . import numpy_backend

        return numpy_backend
    if choice == "numba":
        from . import numba_backend

        return numba_backend
    try:
        from . import numba_backend

        return numba_backend
    except ImportError as exc:  # pragma: no cover - depends on install
        warnings.warn(f"numba unavailable ({exc}); falling back to numpy kernels")
        from . import numpy_backend

        return numpy_backend


_backend = _select()

BACKEND_NAME = _backend.NAME
traverse_ray = _backend.traverse_ray
deposit_beam = _backend.deposit_beam

__all__ = ["BACKEND_NAME", "traverse_ray", "deposit_beam"]
