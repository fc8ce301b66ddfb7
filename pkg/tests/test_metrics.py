import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsct.metrics import PSNR_CAP, psnr, ssim3d_score, ssim_rel, tau_iter
from gsct.model import ContractError

from test_losses import naive_ssim


def test_psnr_examples():
    t = np.zeros((4, 4))
    t[0, 0] = 1.0
    assert psnr(t + 1.0, t) == pytest.approx(0.0, abs=1e-12)
    assert psnr(t + 1e-2, t) == pytest.approx(40.0, abs=1e-9)
    assert psnr(t, t) == PSNR_CAP == 99.0
    assert psnr(t + 2.0, t, data_range=2.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        psnr(t, np.zeros((4, 5)))
    with pytest.raises(ContractError):
        psnr(t, np.zeros((4, 4)))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1.01, 10.0))
def test_psnr_decreases_with_mse(err, factor):
    t = np.linspace(0, 1, 64)
    assert psnr(t + err * factor, t) < psnr(t + err, t)


def test_ssim3d_score(rng):
    x = rng.random((13, 13, 13))
    assert ssim3d_score(x, x) == pytest.approx(1.0, abs=1e-15)
    # a checkerboard has (near) zero mean under every window
    z = 0.5 * (-1.0) ** np.indices((13, 13, 13)).sum(axis=0)
    assert ssim3d_score(-z, z) < -0.99
    y = rng.random((16, 16, 16))
    x = rng.random((16, 16, 16))
    assert ssim3d_score(x, y) == pytest.approx(naive_ssim(x, y).mean(), abs=1e-6)


def test_tau_examples():
    r = tau_iter([0.9, 0.95, 0.99], 0.5)
    assert r.percent == pytest.approx(100 / 3) and r.reached and r.index == 0
    r = tau_iter([0.1, 0.2], 0.5)
    assert r.percent == 100.0 and not r.reached and r.index is None
    with pytest.raises(ContractError):
        tau_iter([], 0.5)
    with pytest.raises(ContractError):
        tau_iter([0.1, 0.2], 0.5, n_iter=3)


def test_tau_linear_curves():
    # warm rises by 0.05 per step from 0.5; cold best 0.8 is first hit at index 6
    warm = 0.5 + 0.05 * np.arange(10)
    assert tau_iter(warm, 0.8, 10).percent == pytest.approx(70.0)
    warm = 0.01 * np.arange(200)
    assert tau_iter(warm, 1.234).percent == pytest.approx(125 / 200 * 100)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 0.5))
def test_tau_monotone_in_threshold(curve, cold, relax):
    assert tau_iter(curve, cold - relax).percent <= tau_iter(curve, cold).percent


def test_ssim_rel():
    assert ssim_rel(0.9, 0.9) == 1.0
    assert ssim_rel(0.95, 1.0) == 0.95
    assert ssim_rel(0.891, 0.9) == pytest.approx(0.99, abs=1e-15)
    with pytest.raises(ContractError):
        ssim_rel(0.5, 0.0)
