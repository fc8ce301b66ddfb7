"""Gaussian-splat tomography: differentiable X-ray rasterization, voxelization,
training loops, initialization and a compact storage format.

Set ``GSCT_THREADS`` (or call :func:`set_threads`) to cap parallel kernels.
"""
import os

import numba

# the TBB layer is not always present; OpenMP is, and prange does not need more
numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "omp")

from .model import (  # noqa: E402
    ContractError,
    EmptyModelError,
    GaussianCloud,
    GSCTError,
    InvalidParameterError,
    ProjectionSet,
    ScanGeometry,
    Volume,
)

__version__ = "0.1.0"


def set_threads(n: int | None = None) -> int:
    """Cap the thread count of all parallel kernels; returns the value applied.

    ``None`` reads ``GSCT_THREADS`` and falls back to all available cores.
    """
    if n is None:
        env = os.environ.get("GSCT_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


__all__ = [
    "ContractError", "EmptyModelError", "GaussianCloud", "GSCTError",
    "InvalidParameterError", "ProjectionSet", "ScanGeometry", "Volume", "set_threads",
]
