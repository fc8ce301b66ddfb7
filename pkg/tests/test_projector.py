import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import simpson

from gsct import GaussianCloud, ScanGeometry
from gsct.model import inverse_covariance
from gsct.projector import (
    RenderPass,
    RenderSettings,
    bin_tiles,
    project_cloud,
    project_gaussian,
    rasterize_backward,
    rasterize_bruteforce,
    rasterize_view,
    splat_bbox,
    view_frame,
)

from conftest import random_cloud

EXACT = RenderSettings(cutoff=0.0, extent_sigma=6.0, antialias=False)


def quadrature_image(cloud, geometry, angle_index, n_sigma=6.0, per_sigma=20):
    """Independent oracle: Simpson integration of every 3D Gaussian along every ray."""
    fr = view_frame(geometry, angle_index)
    act = cloud.activated()
    s_inv = inverse_covariance(act.scales, act.quaternions)
    nu, nv = geometry.detector
    su, sv = geometry.pixel_spacing
    i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    pix = (fr.detector_center + ((i - (nu - 1) / 2) * su)[..., None] * fr.u
           + ((j - (nv - 1) / 2) * sv)[..., None] * fr.v)
    if geometry.mode == "parallel":
        origin = pix - 10 * fr.d
        dirs = np.broadcast_to(fr.d, origin.shape)
    else:
        origin = np.broadcast_to(fr.source, pix.shape)
        dirs = pix - origin
        dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    ref = np.zeros((nu, nv))
    for k in range(len(cloud)):
        p = act.positions[k]
        smin, smax = act.scales[k].min(), act.scales[k].max()
        tc = np.sum((p - origin) * dirs, axis=-1)
        t = np.linspace(-n_sigma * smax, n_sigma * smax, int(2 * n_sigma * smax / (smin / per_sigma)) + 1)
        x = origin[..., None, :] + (tc[..., None] + t)[..., None] * dirs[..., None, :] - p
        q = np.einsum("...i,ij,...j->...", x, s_inv[k], x)
        ref += simpson(act.densities[k] * np.exp(-0.5 * q), x=t, axis=-1)
    return ref


def unit_geometry(mode="parallel", angles=(0.0,), det=(9, 9), spacing=(1.0, 1.0), dist=(2.0, 1.0)):
    return ScanGeometry(mode, det, spacing, list(angles), *dist)


# --- view_frame ------------------------------------------------------------


def test_view_frame_axes():
    f = view_frame(unit_geometry(), 0)
    np.testing.assert_allclose(f.d, [1, 0, 0])
    np.testing.assert_allclose(f.u, [0, 1, 0])
    np.testing.assert_allclose(f.v, [0, 0, 1])
    f = view_frame(unit_geometry(angles=(np.pi / 2,)), 0)
    np.testing.assert_allclose(f.d, [0, 1, 0], atol=1e-15)
    f = view_frame(unit_geometry("cone", dist=(2.0, 1.0)), 0)
    np.testing.assert_allclose(f.source, [-2, 0, 0])
    np.testing.assert_allclose(f.detector_center, [1, 0, 0])


@given(st.floats(-10, 10))
def test_view_frame_orthonormal(theta):
    f = view_frame(unit_geometry(angles=(theta,)), 0)
    np.testing.assert_allclose(f.rows @ f.rows.T, np.eye(3), atol=1e-14)


# --- project_gaussian ------------------------------------------------------


def test_project_unit_gaussian():
    g = unit_geometry()
    sp = project_gaussian(view_frame(g, 0), g, np.zeros(3), np.eye(3), 1.0,
                          RenderSettings(antialias=False))
    assert sp.mu == pytest.approx(np.sqrt(2 * np.pi), rel=1e-14)
    assert sp.amplitude == pytest.approx(2.5066282746, rel=1e-10)
    np.testing.assert_allclose(sp.cov2d, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(sp.mean2d, [4, 4])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 3.0), st.floats(-np.pi, np.pi), st.integers(0, 2 ** 31))
def test_isotropic_mu_rotation_invariant(s, theta, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    cloud = GaussianCloud([[0.1, -0.2, 0.3]], [[np.log(s)] * 3], [q], [1.0])
    ps = project_cloud(cloud, unit_geometry(angles=(theta,)), 0, EXACT)
    assert ps.mu[0] == pytest.approx(np.sqrt(2 * np.pi) * s, rel=1e-10)


def test_mu_matches_conditional_variance(rng):
    a = rng.normal(size=(3, 3))
    cov = a @ a.T + 0.1 * np.eye(3)
    g = unit_geometry(angles=(0.7,))
    f = view_frame(g, 0)
    sp = project_gaussian(f, g, np.zeros(3), cov, 1.0, RenderSettings(antialias=False))
    c = f.rows @ cov @ f.rows.T
    cond = c[2, 2] - c[2, :2] @ np.linalg.solve(c[:2, :2], c[:2, 2])
    assert sp.mu == pytest.approx(np.sqrt(2 * np.pi * cond), rel=1e-12)
    np.testing.assert_allclose(sp.cov2d, c[:2, :2], rtol=1e-12)


def test_antialias_preserves_integral():
    g = unit_geometry()
    f = view_frame(g, 0)
    cov = np.diag([0.04, 0.09, 0.01])
    a = project_gaussian(f, g, np.zeros(3), cov, 1.0, RenderSettings(antialias=True))
    b = project_gaussian(f, g, np.zeros(3), cov, 1.0, RenderSettings(antialias=False))
    mass = lambda sp: sp.amplitude * 2 * np.pi * np.sqrt(np.linalg.det(sp.cov2d))
    assert mass(a) == pytest.approx(mass(b), rel=1e-12)
    np.testing.assert_allclose(a.cov2d - b.cov2d, 0.3 * np.eye(2), atol=1e-15)


def test_parallel_matches_quadrature(rng):
    cloud = random_cloud(rng, 20, lo=0.03, hi=0.12)
    g = ScanGeometry("parallel", (48, 48), (0.03, 0.03), [0.7])
    img = rasterize_view(cloud, g, 0, EXACT)
    ref = quadrature_image(cloud, g, 0)
    mask = ref > 1e-3 * ref.max()
    assert np.max(np.abs(img - ref)[mask] / ref[mask]) <= 1e-3


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_cone_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 20, lo=0.03, hi=0.12)
    # 3 sigma_max = 0.36 < 0.05 * source_to_origin
    g = ScanGeometry("cone", (48, 48), (0.03, 0.03), [0.7], 40.0, 20.0)
    img = rasterize_view(cloud, g, 0, EXACT)
    ref = quadrature_image(cloud, g, 0)
    mask = ref > 1e-2 * ref.max()
    assert np.max(np.abs(img - ref)[mask] / ref[mask]) <= 0.05
    assert np.abs(img - ref).max() / ref.max() <= 0.05


# --- splat_bbox ------------------------------------------------------------


def test_bbox_cull_below_cutoff():
    assert splat_bbox(1e-4, np.eye(2), [10, 10], 1e-4, (20, 20)) is None
    assert splat_bbox(5e-5, np.eye(2), [10, 10], 1e-4, (20, 20)) is None


def test_bbox_isotropic_hits_three_sigma():
    sigma = 2.0
    bb = splat_bbox(np.exp(4.5) * 1e-4, sigma ** 2 * np.eye(2), [50.0, 50.0], 1e-4, (100, 100))
    assert bb == (44, 56, 44, 56)


def test_bbox_anisotropic_contains_all_above_cutoff():
    cutoff = 1e-4
    peak = cutoff * np.e ** 2
    cov = np.diag([100.0, 1.0])
    mean = np.array([60.3, 60.7])
    bb = splat_bbox(peak, cov, mean, cutoff, (121, 121))
    # half extents (2 * 10, 2 * 1); the 3 sigma cap of 30 does not bind
    assert bb == (int(np.ceil(mean[0] - 20)), int(np.floor(mean[0] + 20)),
                  int(np.ceil(mean[1] - 2)), int(np.floor(mean[1] + 2)))
    u, v = np.meshgrid(np.arange(121), np.arange(121), indexing="ij")
    val = peak * np.exp(-0.5 * ((u - mean[0]) ** 2 / 100 + (v - mean[1]) ** 2))
    iu, iv = np.nonzero(val > cutoff)
    assert iu.min() >= bb[0] and iu.max() <= bb[1] and iv.min() >= bb[2] and iv.max() <= bb[3]


def test_bbox_clipped_to_detector():
    bb = splat_bbox(1.0, 4 * np.eye(2), [0.0, 19.5], 1e-4, (20, 20))
    assert bb[0] == 0 and bb[3] == 19
    assert splat_bbox(1.0, np.eye(2), [-50.0, 5.0], 1e-4, (20, 20)) is None


# --- bin_tiles -------------------------------------------------------------


def test_bin_examples():
    bins = bin_tiles(np.array([[1, 5, 2, 3]]), (64, 64), 16)
    assert bins.pair_count == 1 and list(bins.tile(0, 0)) == [0]
    bins = bin_tiles(np.array([[10, 20, 10, 20]]), (64, 64), 16)
    assert bins.pair_count == 4
    for t in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        assert list(bins.tile(*t)) == [0]
    assert bin_tiles(np.array([[0, -1, 0, -1]]), (64, 64), 16).pair_count == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 20))
def test_bins_exact_cover(seed, tile):
    rng = np.random.default_rng(seed)
    det = (37, 29)
    lo = rng.integers(0, det, size=(15, 2))
    hi = lo + rng.integers(-1, 12, size=(15, 2))
    hi = np.minimum(hi, np.array(det) - 1)
    bb = np.stack([lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1]], axis=1)
    bins = bin_tiles(bb, det, tile)
    for tu in range(bins.n_tiles[0]):
        for tv in range(bins.n_tiles[1]):
            got = list(bins.tile(tu, tv))
            assert len(got) == len(set(got))
            want = [i for i, (u0, u1, v0, v1) in enumerate(bb)
                    if u0 <= u1 and v0 <= v1 and u0 <= tu * tile + tile - 1 and u1 >= tu * tile
                    and v0 <= tv * tile + tile - 1 and v1 >= tv * tile]
            assert sorted(got) == want


def test_tiled_equals_bruteforce(rng, small_parallel, small_cone):
    for g in (small_parallel, small_cone):
        cloud = random_cloud(rng, 30)
        for tile in (1, 7, 16):
            st_ = RenderSettings(tile_size=tile)
            ps = project_cloud(cloud, g, 1, st_)
            img = rasterize_view(cloud, g, 1, st_)
            ref = rasterize_bruteforce(ps, g.detector)
            np.testing.assert_allclose(img, ref, rtol=1e-5, atol=1e-12 * ref.max())


# --- rasterize_view --------------------------------------------------------


def test_empty_cloud_renders_zero(small_parallel):
    img = rasterize_view(GaussianCloud.empty(), small_parallel, 0)
    assert img.shape == small_parallel.detector and not img.any()


def test_single_centered_splat_peak():
    # 10 px wide: dilation lowers the peak by only sqrt(100 / 100.3)
    s = 0.2
    g = ScanGeometry("parallel", (81, 81), (0.02, 0.02), [0.0])
    cloud = GaussianCloud([[0, 0, 0]], [[np.log(s)] * 3], [[1, 0, 0, 0]], [0.8])
    img = rasterize_view(cloud, g, 0)
    assert img[40, 40] == pytest.approx(0.8 * np.sqrt(2 * np.pi) * s, rel=0.01)


def test_duplicate_splats_double_image(rng, small_parallel):
    one = random_cloud(rng, 1)
    two = one.concat(one)
    a = rasterize_view(one, small_parallel, 0)
    np.testing.assert_array_equal(rasterize_view(two, small_parallel, 0), 2 * a)


def test_degenerate_splat_skipped(small_parallel):
    cloud = GaussianCloud([[0, 0, 0], [0.1, 0, 0]], [[-2, -2, -20], [-2, -2, -2]],
                          [[1, 0, 0, 0]] * 2, [1.0, 1.0])
    rp = RenderPass(cloud, small_parallel, 0, RenderSettings(antialias=False))
    assert rp.stats.degenerate == 1
    assert np.all(np.isfinite(rp.image))


# --- invariants ------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["parallel", "cone"]))
def test_linearity(seed, mode):
    rng = np.random.default_rng(seed)
    g = ScanGeometry(mode, (32, 30), (0.05, 0.05), [0.4], 4.0, 2.0)
    a, b = random_cloud(rng, 6), random_cloud(rng, 7)
    both = rasterize_view(a.concat(b), g, 0)
    parts = rasterize_view(a, g, 0) + rasterize_view(b, g, 0)
    np.testing.assert_allclose(both, parts, rtol=1e-5, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([0.0, 0.5, 2.0, 8.0]))
def test_density_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    g = ScanGeometry("parallel", (32, 30), (0.05, 0.05), [0.4])
    cloud = random_cloud(rng, 8)
    scaled = cloud.copy()
    scaled.raw_densities *= c
    # exact with a zero cutoff (a finite cutoff makes footprints density-aware)
    np.testing.assert_allclose(rasterize_view(scaled, g, 0, EXACT), c * rasterize_view(cloud, g, 0, EXACT),
                               rtol=1e-13, atol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_order_invariance_and_determinism(seed):
    rng = np.random.default_rng(seed)
    g = ScanGeometry("cone", (32, 30), (0.05, 0.05), [1.1], 4.0, 2.0)
    cloud = random_cloud(rng, 12)
    perm = cloud.select(rng.permutation(12))
    base = rasterize_view(cloud, g, 0)
    np.testing.assert_allclose(rasterize_view(perm, g, 0), base, rtol=1e-5, atol=1e-14)
    np.testing.assert_array_equal(rasterize_view(cloud, g, 0), base)


# --- backward --------------------------------------------------------------


def test_zero_grad_image(rng, small_parallel):
    cloud = random_cloud(rng, 5)
    gr = rasterize_backward(cloud, small_parallel, 0, np.zeros(small_parallel.detector))
    for v in gr.as_dict().values():
        assert not np.any(v)


@pytest.mark.parametrize("mode", ["parallel", "cone"])
@pytest.mark.parametrize("antialias", [True, False])
def test_finite_differences(mode, antialias, rng):
    """Central differences with step 1e-4 of each parameter's magnitude."""
    g = ScanGeometry(mode, (40, 36), (0.04, 0.045), [0.3, 1.2], 4.0, 2.0)
    st_ = RenderSettings(antialias=antialias)
    cloud = random_cloud(rng, 10)
    G = rng.normal(size=g.detector)
    an = RenderPass(cloud, g, 1, st_).backward(G)
    worst = 0.0
    for name in GaussianCloud.PARAMS:
        arr, grad = getattr(cloud, name), getattr(an, name)
        for idx in np.ndindex(arr.shape):
            h = 1e-4 * max(abs(arr[idx]), 1e-2)
            c1, c2 = cloud.copy(), cloud.copy()
            getattr(c1, name)[idx] += h
            getattr(c2, name)[idx] -= h
            fd = (np.sum(G * rasterize_view(c1, g, 1, st_)) - np.sum(G * rasterize_view(c2, g, 1, st_))) / (2 * h)
            if max(abs(fd), abs(grad[idx])) > 1e-6:
                worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx])))
    assert worst <= 1e-3


def test_culled_splat_gets_zero_gradient(small_parallel, rng):
    cloud = random_cloud(rng, 3)
    cloud.positions[1] = [0.0, 50.0, 0.0]  # far off the detector
    gr = rasterize_backward(cloud, small_parallel, 0, rng.normal(size=small_parallel.detector))
    for v in gr.as_dict().values():
        assert not np.any(v[1])
    assert gr.mean2d_norm[1] == 0 and gr.mean2d_norm[0] > 0


def test_duplicate_splats_equal_gradients(rng, small_cone):
    one = random_cloud(rng, 1)
    gr = rasterize_backward(one.concat(one), small_cone, 0, rng.normal(size=small_cone.detector))
    for v in gr.as_dict().values():
        np.testing.assert_array_equal(v[0], v[1])


def test_negative_raw_density_blocks_gradient(rng, small_parallel):
    cloud = random_cloud(rng, 2)
    cloud.raw_densities[0] = -0.5
    gr = rasterize_backward(cloud, small_parallel, 0, np.ones(small_parallel.detector))
    assert gr.raw_densities[0] == 0 and gr.raw_densities[1] > 0


def test_backward_shape_checked(rng, small_parallel):
    rp = RenderPass(random_cloud(rng, 2), small_parallel, 0)
    with pytest.raises(Exception):
        rp.backward(np.zeros((3, 3)))
