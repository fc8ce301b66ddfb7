"""Training objectives with analytic input gradients.

Every function returns ``(value, grad)`` where ``grad`` has the shape of the
prediction.  SSIM uses a Gaussian window (11 taps per axis, sigma 1.5) and
averages the SSIM map over "valid" window positions only, i.e. windows that
lie fully inside the input; there is no padding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ContractError

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
TV_EPS = 1e-8


@dataclass
class LossWeights:
    alpha_ssim: float = 0.25
    alpha_tv: float = 0.05

    def __post_init__(self):
        for name in ("alpha_ssim", "alpha_tv"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class LossResult:
    """Composite loss value, its components, and gradients per input."""

    value: float
    components: dict = field(default_factory=dict)
    grad_pred: np.ndarray | None = None
    grad_volume: np.ndarray | None = None


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


_G = gaussian_window()


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def l1(pred, target):
    """Mean absolute difference; gradient ``sign(pred - target) / N``."""
    pred, target = _check_pair(pred, target)
    d = pred - target
    n = d.size
    return float(np.abs(d).sum() / n), np.sign(d) / n


# ---------------------------------------------------------------------------
# separable window filtering
#
# Accumulation always runs over taps in ascending order, so the streaming and
# whole-array code paths perform the same floating point operations per
# element.
# ---------------------------------------------------------------------------


def _filt(x: np.ndarray, axis: int) -> np.ndarray:
    """Valid correlation with the window along ``axis``."""
    n = x.shape[axis] - WINDOW + 1
    x = np.moveaxis(x, axis, 0)
    out = _G[0] * x[0:n]
    for t in range(1, WINDOW):
        out = out + _G[t] * x[t:t + n]
    return np.moveaxis(out, 0, axis)


def _filt_adj(x: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of :func:`_filt`: scatter each value back over its window."""
    n = x.shape[axis]
    x = np.moveaxis(x, axis, 0)
    out = np.zeros((n + WINDOW - 1,) + x.shape[1:])
    # descending taps so each output element receives contributions in
    # ascending source order (matches the streaming scatter below)
    for t in range(WINDOW - 1, -1, -1):
        out[t:t + n] += _G[t] * x
    return np.moveaxis(out, 0, axis)


def _filt_xy(x):
    return _filt(_filt(x, 0), 1)


def _filt_xy_adj(x):
    return _filt_adj(_filt_adj(x, 1), 0)


def _ssim_terms(mx, my, exx, eyy, exy):
    """SSIM map and its partials w.r.t. (mu_x, E[x^2], E[xy])."""
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    a1 = 2.0 * mx * my + C1
    a2 = 2.0 * cxy + C2
    b1 = mx * mx + my * my + C1
    b2 = vx + vy + C2
    s = (a1 * a2) / (b1 * b2)
    # grouped so that identical inputs give an exactly zero gradient
    d_mx = s * ((2.0 * my / a1 - 2.0 * mx / b1) + (2.0 * mx / b2 - 2.0 * my / a2))
    d_exx = -s / b2
    d_exy = 2.0 * s / a2
    return s, d_mx, d_exx, d_exy


def ssim_map(pred, target) -> np.ndarray:
    """SSIM at every valid window position (2D or 3D)."""
    pred, target = _check_pair(pred, target)
    _check_window(pred)
    f = _filt_xy if pred.ndim == 2 else (lambda a: _filt(_filt_xy(a), 2))
    mx, my = f(pred), f(target)
    return _ssim_terms(mx, my, f(pred * pred), f(target * target), f(pred * target))[0]


def _check_window(x):
    if x.ndim not in (2, 3) or min(x.shape) < WINDOW:
        raise ContractError(f"SSIM needs every axis >= {WINDOW}, got shape {x.shape}")


def ssim2d(pred, target):
    """``1 - mean SSIM`` over valid windows, and its gradient w.r.t. ``pred``."""
    pred, target = _check_pair(pred, target)
    if pred.ndim != 2:
        raise ContractError("ssim2d expects 2D images")
    _check_window(pred)
    mx, my = _filt_xy(pred), _filt_xy(target)
    s, d_mx, d_exx, d_exy = _ssim_terms(mx, my, _filt_xy(pred * pred),
                                        _filt_xy(target * target), _filt_xy(pred * target))
    n = s.size
    loss = 1.0 - float(s.sum()) / n
    grad = -(_filt_xy_adj(d_mx) + 2.0 * pred * _filt_xy_adj(d_exx)
             + target * _filt_xy_adj(d_exy)) / n
    return loss, grad


def ssim3d(pred, target, streaming: bool = True):
    """3D analogue of :func:`ssim2d` with an 11^3 separable Gaussian window.

    The default path streams over the last axis, keeping only ``WINDOW``
    filtered slices of each statistic alive; ``streaming=False`` filters the
    whole volume at once and returns bit-identical results.
    """
    pred, target = _check_pair(pred, target)
    if pred.ndim != 3:
        raise ContractError("ssim3d expects 3D volumes")
    _check_window(pred)
    if streaming:
        return _ssim3d_stream(pred, target)
    return _ssim3d_whole(pred, target)


def _slice_sums(s: np.ndarray) -> float:
    # slice-wise partial sums in a fixed order, shared by both paths
    total = 0.0
    for k in range(s.shape[2]):
        total += float(np.sum(np.ascontiguousarray(s[:, :, k])))
    return total


def _ssim3d_whole(pred, target):
    def f(a):
        return _filt(_filt_xy(a), 2)

    mx, my = f(pred), f(target)
    s, d_mx, d_exx, d_exy = _ssim_terms(mx, my, f(pred * pred), f(target * target), f(pred * target))
    n = s.size
    loss = 1.0 - _slice_sums(s) / n

    def adj(a):
        return _filt_adj(_filt_xy_adj(a), 2)

    grad = -(adj(d_mx) + 2.0 * pred * adj(d_exx) + target * adj(d_exy)) / n
    return loss, grad


def _ssim3d_stream(pred, target):
    nx, ny, nz = pred.shape
    nk = nz - WINDOW + 1
    ring = np.zeros((WINDOW, 5, nx - WINDOW + 1, ny - WINDOW + 1))

    def stats_slice(z):
        p = pred[:, :, z]
        t = target[:, :, z]
        return np.stack([_filt_xy(p), _filt_xy(t), _filt_xy(p * p), _filt_xy(t * t), _filt_xy(p * t)])

    for z in range(WINDOW - 1):
        ring[z] = stats_slice(z)
    total = 0.0
    d_ring = np.zeros((WINDOW, 3, nx, ny))  # pending input-slice gradients
    grad = np.empty_like(pred)
    n = (nx - WINDOW + 1) * (ny - WINDOW + 1) * nk
    for k in range(nk):
        ring[(k + WINDOW - 1) % WINDOW] = stats_slice(k + WINDOW - 1)
        acc = _G[0] * ring[k % WINDOW]
        for t in range(1, WINDOW):
            acc = acc + _G[t] * ring[(k + t) % WINDOW]
        s, d_mx, d_exx, d_exy = _ssim_terms(*acc)
        total += float(np.sum(np.ascontiguousarray(s)))
        d = np.stack([_filt_xy_adj(d_mx), _filt_xy_adj(d_exx), _filt_xy_adj(d_exy)])
        for t in range(WINDOW):
            d_ring[(k + t) % WINDOW] += _G[t] * d
        # input slice k receives nothing from later windows
        _emit(grad, pred, target, d_ring[k % WINDOW], k, n)
        d_ring[k % WINDOW] = 0.0
    for z in range(nk, nz):
        _emit(grad, pred, target, d_ring[z % WINDOW], z, n)
    return 1.0 - total / n, grad


def _emit(grad, pred, target, d, z, n):
    grad[:, :, z] = -(d[0] + 2.0 * pred[:, :, z] * d[1] + target[:, :, z] * d[2]) / n


def tv3d(volume, eps: float = TV_EPS):
    """Isotropic total variation with forward differences.

    Mean over voxels ``[:-1, :-1, :-1]`` of ``sqrt(dx^2 + dy^2 + dz^2 + eps^2)``.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ContractError(f"tv3d needs a 3D volume with every axis >= 2, got {v.shape}")
    c = v[:-1, :-1, :-1]
    dx = v[1:, :-1, :-1] - c
    dy = v[:-1, 1:, :-1] - c
    dz = v[:-1, :-1, 1:] - c
    mag = np.sqrt(dx * dx + dy * dy + dz * dz + eps * eps)
    n = mag.size
    value = float(mag.sum() / n)
    gx, gy, gz = dx / (mag * n), dy / (mag * n), dz / (mag * n)
    grad = np.zeros_like(v)
    grad[:-1, :-1, :-1] -= gx + gy + gz
    grad[1:, :-1, :-1] += gx
    grad[:-1, 1:, :-1] += gy
    grad[:-1, :-1, 1:] += gz
    return value, grad


def total_loss_recon(rendered, target, subvolume, weights: LossWeights | None = None) -> LossResult:
    """Projection-domain objective: L1 + a_ssim * SSIM loss + a_tv * TV(subvolume)."""
    w = weights or LossWeights()
    v_l1, g = l1(rendered, target)
    comps = {"l1": v_l1, "ssim": 0.0, "tv": 0.0}
    value = v_l1
    if w.alpha_ssim > 0:
        v_s, g_s = ssim2d(rendered, target)
        comps["ssim"] = v_s
        value += w.alpha_ssim * v_s
        g = g + w.alpha_ssim * g_s
    g_v = None
    if subvolume is not None:
        if w.alpha_tv > 0:
            v_t, g_t = tv3d(subvolume)
            comps["tv"] = v_t
            value += w.alpha_tv * v_t
            g_v = w.alpha_tv * g_t
        else:
            g_v = np.zeros(np.shape(subvolume))
    return LossResult(value, comps, g, g_v)


def total_loss_fit(rendered, target, alpha_ssim: float = 0.25, streaming: bool = True) -> LossResult:
    """Volume-domain objective: L1 + alpha_ssim * 3D SSIM loss."""
    if not np.isfinite(alpha_ssim) or alpha_ssim < 0:
        raise ContractError("alpha_ssim must be finite and >= 0")
    v_l1, g = l1(rendered, target)
    comps = {"l1": v_l1, "ssim": 0.0}
    value = v_l1
    if alpha_ssim > 0:
        v_s, g_s = ssim3d(rendered, target, streaming=streaming)
        comps["ssim"] = v_s
        value += alpha_ssim * v_s
        g = g + alpha_ssim * g_s
    return LossResult(value, comps, g, None)
