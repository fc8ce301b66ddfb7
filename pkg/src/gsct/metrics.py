"""Evaluation metrics for reconstructed volumes and warm-start studies."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import losses
from .model import ContractError

PSNR_CAP = 99.0


def psnr(pred, target, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB.

    ``data_range`` defaults to ``max(target)``, which is 1 for normalized
    volumes.  Identical inputs report the sentinel ``PSNR_CAP``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {target.shape}")
    L = float(np.max(target)) if data_range is None else float(data_range)
    if not L > 0:
        raise ContractError("data range must be positive")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(L * L / mse)))


def ssim3d_score(pred, target) -> float:
    """Mean 3D SSIM (``1 - ssim3d loss``); 1 for identical volumes."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(losses.ssim_map(pred, target)))


class TauResult(NamedTuple):
    percent: float
    reached: bool
    index: int | None


def tau_iter(warm_curve, cold_max: float, n_iter: int | None = None) -> TauResult:
    """Share of iterations a warm-started run needs to reach ``cold_max``.

    Returns ``(n + 1) / N * 100`` for the first 0-based iteration ``n`` with
    ``warm[n] >= cold_max``.  When the curve never reaches it the result is
    100% with ``reached=False``.
    """
    warm = np.asarray(warm_curve, dtype=np.float64).reshape(-1)
    if warm.size == 0:
        raise ContractError("empty metric curve")
    n_iter = warm.size if n_iter is None else int(n_iter)
    if n_iter != warm.size:
        raise ContractError(f"curve length {warm.size} != N_iter {n_iter}")
    hits = np.flatnonzero(warm >= cold_max)
    if hits.size == 0:
        return TauResult(100.0, False, None)
    n = int(hits[0])
    return TauResult((n + 1) / n_iter * 100.0, True, n)


def ssim_rel(ssim: float, ssim_max: float) -> float:
    if not ssim_max > 0:
        raise ContractError("ssim_max must be positive")
    return float(ssim) / float(ssim_max)
