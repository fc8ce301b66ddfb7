import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsct.losses import (
    C1,
    C2,
    LossWeights,
    gaussian_window,
    l1,
    ssim2d,
    ssim3d,
    ssim_map,
    total_loss_fit,
    total_loss_recon,
    tv3d,
)
from gsct.model import ContractError


def naive_ssim(x, y):
    """Textbook SSIM: explicit weighted moments at every valid window position."""
    g = np.exp(-0.5 * ((np.arange(11) - 5) / 1.5) ** 2)
    w = g
    for _ in range(x.ndim - 1):
        w = np.multiply.outer(w, g)
    w = w / w.sum()
    out_shape = tuple(n - 10 for n in x.shape)
    vals = np.empty(out_shape)
    for idx in np.ndindex(out_shape):
        sl = tuple(slice(i, i + 11) for i in idx)
        a, b = x[sl], y[sl]
        mx, my = np.sum(w * a), np.sum(w * b)
        vx = np.sum(w * (a - mx) ** 2)
        vy = np.sum(w * (b - my) ** 2)
        cxy = np.sum(w * (a - mx) * (b - my))
        vals[idx] = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return vals


def fd_check(f, x, rng, n_probe=40, h=1e-6, exclude=None):
    """Central differences of scalar ``f`` along random coordinates of ``x``."""
    _, g = f(x)
    worst = 0.0
    flat = rng.choice(x.size, size=min(n_probe, x.size), replace=False)
    for k in flat:
        idx = np.unravel_index(k, x.shape)
        if exclude is not None and exclude[idx]:
            continue
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (f(xp)[0] - f(xm)[0]) / (2 * h)
        if max(abs(fd), abs(g[idx])) > 1e-6:
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx])))
    return worst


# --- l1 --------------------------------------------------------------------


def test_l1_examples():
    x = np.random.default_rng(0).random((5, 6))
    assert l1(x, x)[0] == 0.0
    v, g = l1(x + 0.25, x)
    assert v == pytest.approx(0.25)
    np.testing.assert_allclose(g, 1 / 30)
    with pytest.raises(ContractError):
        l1(np.zeros(3), np.zeros(4))


def test_l1_gradient(rng):
    x, y = rng.random((12, 13)), rng.random((12, 13))
    kink = np.abs(x - y) < 1e-3
    assert fd_check(lambda a: l1(a, y), x, rng, n_probe=100, exclude=kink) <= 1e-4


# --- SSIM ------------------------------------------------------------------


def test_window_normalized():
    w = gaussian_window()
    assert w.shape == (11,) and w.sum() == pytest.approx(1.0)
    assert np.argmax(w) == 5


def test_ssim2d_identical():
    x = np.random.default_rng(1).random((20, 24))
    loss, g = ssim2d(x, x)
    assert abs(loss) < 1e-15
    assert np.abs(g).max() < 1e-15


def test_ssim2d_constant_shift_matches_textbook():
    t = np.full((16, 16), 0.3)
    p = t + 0.5
    want = (2 * 0.8 * 0.3 + C1) / (0.8 ** 2 + 0.3 ** 2 + C1)
    loss, _ = ssim2d(p, t)
    assert 1 - loss == pytest.approx(naive_ssim(p, t).mean(), abs=1e-6)
    assert 1 - loss == pytest.approx(want, abs=1e-6)
    assert 1 - loss < 1


def test_ssim2d_matches_naive_64(rng):
    x, y = rng.random((64, 64)), rng.random((64, 64))
    np.testing.assert_allclose(ssim_map(x, y), naive_ssim(x, y), atol=1e-6, rtol=0)
    assert 1 - ssim2d(x, y)[0] == pytest.approx(naive_ssim(x, y).mean(), abs=1e-6)


def test_ssim3d_matches_naive_16(rng):
    x, y = rng.random((16, 16, 16)), rng.random((16, 16, 16))
    ref = naive_ssim(x, y).mean()
    assert 1 - ssim3d(x, y)[0] == pytest.approx(ref, abs=1e-6)
    assert 1 - ssim3d(x, y, streaming=False)[0] == pytest.approx(ref, abs=1e-6)


def test_ssim3d_streaming_bit_identical(rng):
    x, y = rng.random((13, 17, 21)), rng.random((13, 17, 21))
    a, ga = ssim3d(x, y, streaming=True)
    b, gb = ssim3d(x, y, streaming=False)
    assert a == b
    np.testing.assert_array_equal(ga, gb)


def test_ssim3d_symmetric_and_identical(rng):
    x = rng.random((12, 12, 12))
    y = x + 0.2
    assert ssim3d(x, y)[0] == ssim3d(y, x)[0]
    assert abs(ssim3d(x, x)[0]) < 1e-15


def test_ssim_rejects_small_inputs():
    with pytest.raises(ContractError):
        ssim2d(np.zeros((10, 20)), np.zeros((10, 20)))
    with pytest.raises(ContractError):
        ssim3d(np.zeros((11, 11, 10)), np.zeros((11, 11, 10)))


@pytest.mark.parametrize("seed", range(10))
def test_ssim2d_gradient(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((16, 18)), rng.random((16, 18))
    assert fd_check(lambda a: ssim2d(a, y), x, rng) <= 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_ssim3d_gradient(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((12, 13, 14)), rng.random((12, 13, 14))
    assert fd_check(lambda a: ssim3d(a, y), x, rng, n_probe=25) <= 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((12, 12)), rng.random((12, 12))
    assert l1(x, y)[0] >= 0 and ssim2d(x, y)[0] >= 0
    v = rng.random((11, 11, 11))
    assert ssim3d(v, rng.random(v.shape))[0] >= 0 and tv3d(v)[0] >= 0


# --- TV --------------------------------------------------------------------


def test_tv_constant_and_ramp():
    v, g = tv3d(np.full((5, 6, 7), 0.4))
    assert v == pytest.approx(1e-8)
    assert np.abs(g).max() == 0
    x = np.arange(6.0)[:, None, None] * np.ones((1, 5, 4))
    assert tv3d(x)[0] == pytest.approx(1.0, rel=1e-12)


def test_tv_hand_value():
    v = np.zeros((2, 2, 2))
    v[1, 0, 0], v[0, 1, 0], v[0, 0, 1] = 3.0, 4.0, 12.0
    assert tv3d(v, eps=0.0)[0] == pytest.approx(13.0)


@pytest.mark.parametrize("seed", range(10))
def test_tv_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((6, 7, 8))
    assert fd_check(tv3d, x, rng, n_probe=60) <= 1e-3


def test_tv_rejects_flat_axis():
    with pytest.raises(ContractError):
        tv3d(np.zeros((1, 4, 4)))


# --- composites ------------------------------------------------------------


def test_recon_zero_weights_is_l1(rng):
    x, y = rng.random((16, 16)), rng.random((16, 16))
    r = total_loss_recon(x, y, rng.random((8, 8, 8)), LossWeights(0, 0))
    v, g = l1(x, y)
    assert r.value == v
    np.testing.assert_array_equal(r.grad_pred, g)
    assert not r.grad_volume.any()


def test_recon_perfect_render_near_zero(rng):
    x = rng.random((16, 16))
    r = total_loss_recon(x, x, np.full((8, 8, 8), 0.5))
    assert r.value < 1e-8


def test_recon_weighted_sum(rng):
    x, y, sub = rng.random((16, 16)), rng.random((16, 16)), rng.random((8, 8, 8))
    r = total_loss_recon(x, y, sub, LossWeights(0.25, 0.05))
    want = l1(x, y)[0] + 0.25 * ssim2d(x, y)[0] + 0.05 * tv3d(sub)[0]
    assert r.value == pytest.approx(want, rel=1e-15)
    np.testing.assert_allclose(r.grad_volume, 0.05 * tv3d(sub)[1])
    assert r.components["tv"] == tv3d(sub)[0]


@pytest.mark.parametrize("seed", range(10))
def test_recon_gradients(seed):
    rng = np.random.default_rng(seed)
    x, y, sub = rng.random((14, 15)), rng.random((14, 15)), rng.random((6, 6, 6))
    kink = np.abs(x - y) < 1e-3
    w = LossWeights(0.25, 0.05)
    f_img = lambda a: (lambda r: (r.value, r.grad_pred))(total_loss_recon(a, y, sub, w))
    f_vol = lambda v: (lambda r: (r.value, r.grad_volume))(total_loss_recon(x, y, v, w))
    assert fd_check(f_img, x, rng, exclude=kink) <= 1e-3
    assert fd_check(f_vol, sub, rng) <= 1e-3


def test_fit_examples(rng):
    v = rng.random((12, 12, 12))
    assert total_loss_fit(v, v).value == pytest.approx(0.0, abs=1e-15)
    w = rng.random(v.shape)
    assert total_loss_fit(v, w, 0.0).value == l1(v, w)[0]
    with pytest.raises(ContractError):
        total_loss_fit(v, w, -1.0)


@pytest.mark.parametrize("seed", range(10))
def test_fit_gradient(seed):
    rng = np.random.default_rng(seed)
    v, w = rng.random((12, 12, 13)), rng.random((12, 12, 13))
    kink = np.abs(v - w) < 1e-3
    f = lambda a: (lambda r: (r.value, r.grad_pred))(total_loss_fit(a, w))
    assert fd_check(f, v, rng, n_probe=25, exclude=kink) <= 1e-3


def test_weights_validated():
    with pytest.raises(ContractError):
        LossWeights(-0.1, 0.0)
    with pytest.raises(ContractError):
        LossWeights(0.1, float("nan"))
