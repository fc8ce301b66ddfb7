import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsct import GaussianCloud, ProjectionSet, ScanGeometry, Volume
from gsct import io
from gsct.optim import OptimState

from conftest import random_cloud


# --- volumes ---------------------------------------------------------------


def test_volume_golden_bytes(tmp_path):
    v = Volume(np.array([1.0, -2.0, 0.5, 4.0]).reshape(2, 1, 2), 0.5, (0.0, 1.0, 2.0))
    p = io.write_volume(tmp_path / "v.raw", v)
    # x fastest: (0,0,0)=1, (1,0,0)=0.5, (0,0,1)=-2, (1,0,1)=4
    assert p.read_bytes().hex() == "0000803f0000003f000000c000008040"
    back = io.read_volume(p)
    np.testing.assert_array_equal(back.values, v.values)
    assert back.spacing == 0.5 and back.origin == (0.0, 1.0, 2.0)


def test_volume_round_trips(tmp_path, rng):
    one = Volume(np.zeros((1, 1, 1)), 1.0)
    assert io.read_volume(io.write_volume(tmp_path / "a.raw", one)).values.shape == (1, 1, 1)
    vals = rng.random((32, 32, 32)).astype(np.float32)
    v = Volume(vals, 2 / 32, (-1.0, -1.0, -1.0))
    back = io.read_volume(io.write_volume(tmp_path / "b.raw", v))
    assert back.values.tobytes() == vals.tobytes()


def test_volume_truncation(tmp_path):
    p = io.write_volume(tmp_path / "v.raw", Volume(np.ones((4, 4, 4)), 1.0))
    p.write_bytes(p.read_bytes()[:100])
    with pytest.raises(io.TruncationError) as e:
        io.read_volume(p)
    assert e.value.expected == 256 and e.value.actual == 100 and e.value.offset == 100


def test_volume_bad_sidecar(tmp_path):
    p = io.write_volume(tmp_path / "v.raw", Volume(np.ones((2, 2, 2)), 1.0))
    side = tmp_path / "v.raw.json"
    side.write_text(side.read_text().replace('"version": 1', '"version": 7'))
    with pytest.raises(io.VersionError):
        io.read_volume(p)
    side.write_text("{not json")
    with pytest.raises(io.ParseError):
        io.read_volume(p)
    side.unlink()
    with pytest.raises(io.ParseError):
        io.read_volume(p)


# --- projections -----------------------------------------------------------


def test_projection_golden_and_round_trip(tmp_path):
    g = ScanGeometry("cone", (2, 1), (0.1, 0.2), [0.0], 3.0, 1.5)
    ps = ProjectionSet(g, np.array([[[1.0], [2.0]]]))
    p = io.write_projections(tmp_path / "p.proj", ps)
    assert p.read_bytes().hex() == ("4753504a" "01000000" "01000000" "0200" "0100"
                                    "0000803f" "00000040")
    back = io.read_projections(p)
    np.testing.assert_array_equal(back.images, ps.images)
    assert back.geometry.to_dict() == g.to_dict()


def test_projection_errors(tmp_path, rng):
    g = ScanGeometry("parallel", (4, 3), (0.1, 0.1), [0.0, 1.0])
    p = io.write_projections(tmp_path / "p.proj", ProjectionSet(g, rng.random((2, 4, 3))))
    data = p.read_bytes()
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(io.MagicError) as e:
        io.read_projections(p)
    assert e.value.offset == 0
    p.write_bytes(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(io.VersionError) as e:
        io.read_projections(p)
    assert e.value.offset == 4
    p.write_bytes(data[:-4])
    with pytest.raises(io.TruncationError) as e:
        io.read_projections(p)
    assert e.value.expected == len(data) and e.value.offset == len(data) - 4


# --- compressed clouds -----------------------------------------------------


def test_fgsc_golden_bytes():
    cloud = GaussianCloud.from_activated([[0.5, -1.0, 2.0]], [[1.0, 0.25, 2.0]], [[1, 0, 0, 0]], [0.75])
    blob = io.compress_model(cloud)
    want = ("46475343" "01000000" "0100000000000000"
            "0038" "00bc" "0040" "003c" "0034" "0040" "003c" "0000" "0000" "0000" "003a")
    assert blob.hex() == want


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 300))
def test_size_formula(m):
    rng = np.random.default_rng(m)
    blob = io.compress_model(random_cloud(rng, m))
    assert len(blob) == io.compressed_size(m) == 16 + 22 * m


def test_empty_and_large_sizes():
    blob = io.compress_model(GaussianCloud.empty())
    assert len(blob) == 16
    assert len(io.decompress_model(blob)) == 0
    # order of magnitude of ~0.84 MB for 40k splats
    assert io.compressed_size(40_000) == 880_016
    assert 0.8 < io.compressed_size(40_000) / 2 ** 20 < 0.9


def test_decompress_values(rng):
    cloud = random_cloud(rng, 50)
    back = io.decompress_model(io.compress_model(cloud))
    act, got = cloud.activated(), back.activated()
    np.testing.assert_allclose(got.positions, act.positions, atol=1e-3)
    np.testing.assert_allclose(got.scales, act.scales, rtol=1e-3)
    np.testing.assert_allclose(np.linalg.norm(back.rotations, axis=1), 1.0, atol=1e-3)
    np.testing.assert_allclose(np.abs(np.sum(got.quaternions * act.quaternions, axis=1)), 1.0, atol=2e-3)
    assert np.all(back.raw_densities >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_compression_fixed_point(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 40)
    once = io.compress_model(cloud)
    assert io.compress_model(io.decompress_model(once)) == once


def test_saturation_warns(caplog):
    cloud = GaussianCloud.from_activated([[1e6, 0, 0]], [[1e-12, 1, 1]], [[1, 0, 0, 0]], [0.5])
    with caplog.at_level(logging.WARNING):
        blob = io.compress_model(cloud)
    assert "2 values saturated" in caplog.text
    back = io.decompress_model(blob)
    assert back.positions[0, 0] == 65504.0 and np.exp(back.log_scales[0, 0]) > 0


def test_decompress_errors():
    good = io.compress_model(GaussianCloud.from_activated([[0, 0, 0]], [[1, 1, 1]], [[1, 0, 0, 0]], [1]))
    with pytest.raises(io.MagicError):
        io.decompress_model(b"NOPE" + good[4:])
    with pytest.raises(io.VersionError):
        io.decompress_model(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(io.TruncationError) as e:
        io.decompress_model(good[:-2])
    assert "expected 38 bytes, found 36" in str(e.value)
    with pytest.raises(io.TruncationError):
        io.decompress_model(good[:10])
    bad_scale = bytearray(good)
    bad_scale[16 + 6:16 + 8] = np.float16(-1).tobytes()
    with pytest.raises(io.ParseError) as e:
        io.decompress_model(bytes(bad_scale))
    assert e.value.offset == 16


def test_compressed_file_round_trip(tmp_path, rng):
    cloud = random_cloud(rng, 7)
    p = io.save_compressed(tmp_path / "c.fgsc", cloud)
    assert p.stat().st_size == 16 + 22 * 7
    back = io.load_compressed(p)
    assert io.compress_model(back) == p.read_bytes()
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(io.TruncationError) as e:
        io.load_compressed(p)
    assert str(p) in str(e.value)


# --- clouds and checkpoints ------------------------------------------------


def test_cloud_round_trip(tmp_path, rng):
    cloud = random_cloud(rng, 9)
    back = io.load_cloud(io.save_cloud(tmp_path / "c.npz", cloud))
    for k in GaussianCloud.PARAMS:
        assert getattr(back, k).tobytes() == getattr(cloud, k).tobytes()


def test_checkpoint_round_trip_and_conflicts(tmp_path, rng):
    cloud = random_cloud(rng, 5)
    state = OptimState.zeros(cloud, seed=3)
    state.step = 17
    state.m["positions"][:] = rng.normal(size=(5, 3))
    cfg = {"iterations": 10, "seed": 3}
    log = [{"epoch": 0, "loss": 0.5}]
    p = io.save_checkpoint(tmp_path / "ck.npz", cloud, state, cfg, log)
    c2, s2, cfg2, log2 = io.load_checkpoint(p)
    for k in GaussianCloud.PARAMS:
        assert getattr(c2, k).tobytes() == getattr(cloud, k).tobytes()
    assert s2.step == 17 and cfg2 == cfg and log2 == log
    np.testing.assert_array_equal(s2.m["positions"], state.m["positions"])
    io.load_checkpoint(p, cfg)
    with pytest.raises(io.ConfigConflictError) as e:
        io.load_checkpoint(p, {"iterations": 20, "seed": 3})
    assert e.value.conflicts == {"iterations": (10, 20)}
    assert "iterations" in str(e.value)


def test_checkpoint_version_refused(tmp_path, rng, monkeypatch):
    cloud = random_cloud(rng, 2)
    monkeypatch.setattr(io, "CHECKPOINT_VERSION", 99)
    p = io.save_checkpoint(tmp_path / "ck.npz", cloud, OptimState.zeros(cloud), {}, [])
    monkeypatch.setattr(io, "CHECKPOINT_VERSION", 1)
    with pytest.raises(io.VersionError):
        io.load_checkpoint(p)


# --- metric logs -----------------------------------------------------------


def test_metric_csv(tmp_path):
    recs = [{"epoch": 0, "loss": 0.1, "wall_time": 1.5}, {"epoch": 1, "loss": 0.05, "wall_time": 2.5}]
    p = io.write_metric_csv(tmp_path / "m.csv", recs)
    assert p.read_text() == "epoch,loss,wall_time\n0,0.1,1.5\n1,0.05,2.5\n"
    assert io.read_metric_csv(p) == recs
    p = io.write_metric_csv(tmp_path / "d.csv", recs, deterministic=True)
    assert p.read_text() == "epoch,loss\n0,0.1\n1,0.05\n"
    assert (tmp_path / "d.csv.timing.csv").read_text() == "epoch,wall_time\n0,1.5\n1,2.5\n"
