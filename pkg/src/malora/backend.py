"""Kernel backend selection.

MALK_BACKEND picks the implementation of the hot numeric kernels:

  numba  -- jitted loops with pinned summation order (default when available)
  numpy  -- pure-numpy/BLAS fallback, deterministic per platform but not
            bit-identical to the numba path
  auto   -- numba if importable, else numpy

The choice is fixed at import time so a whole process runs one backend;
see benchmarks/backend_bench.py for a side-by-side comparison.
"""

from __future__ import annotations

import os

from .errors import ConfigError

_CHOICE = os.environ.get("MALK_BACKEND", "auto").strip().lower()

if _CHOICE not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"MALK_BACKEND must be one of auto|numba|numpy, got {_CHOICE!r}"
    )

if _CHOICE == "numpy":
    from . import _kernels_numpy as _impl
elif _CHOICE == "numba":
    from . import _kernels_numba as _impl
else:
    try:
        from . import _kernels_numba as _impl
    except ImportError:
        from . import _kernels_numpy as _impl

ACTIVE = _impl.NAME

mm_nn = _impl.mm_nn
mm_nt = _impl.mm_nt
mm_tn = _impl.mm_tn
jacobi_orthogonalize = _impl.jacobi_orthogonalize
adamw_update = _impl.adamw_update
