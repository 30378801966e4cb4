"""Depth container I/O, camera geometry, and normal estimation tests."""

import json

import numpy as np
import pytest

from dclsynth.depth_core import (CameraIntrinsics, DepthMap, FormatError,
                                 NormalMap, RangeError, RgbImage, backproject,
                                 default_intrinsics, hole_fraction,
                                 normals_from_depth, read_depth, read_normals,
                                 read_rgb, reproject, write_depth,
                                 write_normals, write_rgb)
from dclsynth.scenegen import (Primitive, Scene, generate_scene, render,
                               rotation_from_z, synth_domain_config)

K = CameraIntrinsics(fx=30.0, fy=28.0, cx=20.0, cy=33.0)


def random_quantized_map(rng, h=32, w=48, d_max=8.0):
    mm = rng.integers(0, int(d_max * 1000), size=(h, w))
    mm[rng.random((h, w)) < 0.1] = 0  # some holes
    return DepthMap(values=mm / 1000.0, d_max=d_max)


# ---------------------------------------------------------------------------
# container round trips


def test_depth_round_trip_identity(tmp_path):
    rng = np.random.default_rng(0)
    dm = random_quantized_map(rng)
    write_depth(tmp_path / "a.pgm", dm, K, domain="synth", seed=7)
    back, k2 = read_depth(tmp_path / "a.pgm")
    assert np.array_equal(back.values, dm.values)
    assert back.d_max == dm.d_max
    assert (k2.fx, k2.fy, k2.cx, k2.cy) == (K.fx, K.fy, K.cx, K.cy)


def test_depth_double_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    dm = random_quantized_map(rng)
    write_depth(tmp_path / "a.pgm", dm, K)
    first = (tmp_path / "a.pgm").read_bytes()
    back, _ = read_depth(tmp_path / "a.pgm")
    write_depth(tmp_path / "b.pgm", back, K)
    assert (tmp_path / "b.pgm").read_bytes() == first


def test_all_zero_map_reads_as_all_missing(tmp_path):
    dm = DepthMap(values=np.zeros((16, 16)))
    write_depth(tmp_path / "z.pgm", dm, K)
    back, _ = read_depth(tmp_path / "z.pgm")
    assert np.all(back.values == 0)
    assert hole_fraction(back) == 1.0


def test_fixed_unit_scale(tmp_path):
    vals = np.full((8, 8), 2.0)
    write_depth(tmp_path / "u.pgm", DepthMap(values=vals), K)
    raw = (tmp_path / "u.pgm").read_bytes()
    # header "P5\n8 8\n65535\n" then big-endian 2000 per pixel
    payload = raw.split(b"65535\n", 1)[1]
    assert payload[:2] == (2000).to_bytes(2, "big")
    back, _ = read_depth(tmp_path / "u.pgm")
    assert np.all(back.values == 2.0)


def test_malformed_header_is_format_error(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P6\n8 8\n65535\n" + b"\x00" * 200)
    with pytest.raises(FormatError):
        read_depth(p)
    p.write_bytes(b"P5\n8 abc\n65535\n" + b"\x00" * 200)
    with pytest.raises(FormatError):
        read_depth(p)
    p.write_bytes(b"P5\n8 8\n255\n" + b"\x00" * 200)
    with pytest.raises(FormatError):
        read_depth(p)


def test_truncated_payload_is_format_error(tmp_path):
    p = tmp_path / "short.pgm"
    p.write_bytes(b"P5\n8 8\n65535\n" + b"\x00" * 10)
    p.with_suffix(".json").write_text(json.dumps(
        dict(fx=30, fy=30, cx=4, cy=4, d_max_m=8.0, domain="synth", seed=0)))
    with pytest.raises(FormatError):
        read_depth(p)


def test_stored_value_beyond_dmax_is_range_error(tmp_path):
    p = tmp_path / "far.pgm"
    mm = np.full((8, 8), 9000, dtype=">u2")  # 9 m stored, d_max 8 m
    p.write_bytes(b"P5\n8 8\n65535\n" + mm.tobytes())
    p.with_suffix(".json").write_text(json.dumps(
        dict(fx=30, fy=30, cx=4, cy=4, d_max_m=8.0, domain="synth", seed=0)))
    with pytest.raises(RangeError):
        read_depth(p)


def test_write_beyond_16bit_range_is_range_error(tmp_path):
    dm = DepthMap(values=np.full((8, 8), 70.0), d_max=80.0)
    with pytest.raises(RangeError):
        write_depth(tmp_path / "big.pgm", dm, K)


def test_missing_sidecar_is_format_error(tmp_path):
    dm = DepthMap(values=np.full((8, 8), 1.0))
    write_depth(tmp_path / "s.pgm", dm, K)
    (tmp_path / "s.json").unlink()
    with pytest.raises(FormatError):
        read_depth(tmp_path / "s.pgm")


def test_rgb_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    img = RgbImage(values=rng.integers(0, 256, size=(16, 12, 3)) / 255.0)
    write_rgb(tmp_path / "c.ppm", img)
    back = read_rgb(tmp_path / "c.ppm")
    assert np.allclose(back.values, img.values, atol=1e-12)


def test_normals_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    v = rng.normal(size=(10, 14, 3)).astype(np.float32)
    v /= np.linalg.norm(v, axis=2, keepdims=True)
    v[0, 0] = 0
    nm = NormalMap(values=v)
    write_normals(tmp_path / "n.nrm", nm)
    back = read_normals(tmp_path / "n.nrm")
    assert np.array_equal(back.values, nm.values)
    assert not back.valid[0, 0]


# ---------------------------------------------------------------------------
# backprojection


def test_backproject_principal_point():
    vals = np.zeros((64, 64))
    vals[33, 20] = 3.0  # exactly (cx, cy)
    cloud = backproject(DepthMap(values=vals), K)
    assert cloud.points.shape == (1, 3)
    assert np.allclose(cloud.points[0], [0.0, 0.0, 3.0])


def test_backproject_all_missing_gives_empty_cloud():
    cloud = backproject(DepthMap(values=np.zeros((16, 16))), K)
    assert cloud.points.shape == (0, 3)


def test_backproject_one_focal_length_off_axis():
    # pixel (cx + fx, cy) at z = 2: x = (u - cx) * z / fx = fx * 2 / fx = 2
    vals = np.zeros((64, 64))
    vals[33, 50] = 2.0  # u = cx + fx = 20 + 30
    cloud = backproject(DepthMap(values=vals), K)
    assert np.allclose(cloud.points[0], [2.0, 0.0, 2.0])


def test_backproject_count_matches_valid_pixels():
    rng = np.random.default_rng(4)
    dm = random_quantized_map(rng)
    cloud = backproject(dm, K)
    assert cloud.points.shape[0] == np.count_nonzero(dm.values)


def test_reproject_round_trip():
    rng = np.random.default_rng(5)
    dm = random_quantized_map(rng, h=40, w=40)
    dm.values[dm.values == 0] = 1.5  # full grid for exact pixel recovery
    cloud = backproject(dm, K)
    uv = reproject(cloud.points, K)
    v, u = np.mgrid[0:40, 0:40]
    expected = np.stack([u.ravel(), v.ravel()], axis=1).astype(float)
    assert np.abs(uv - expected).max() < 1e-6


# ---------------------------------------------------------------------------
# normal estimation


def test_normals_fronto_parallel_plane():
    dm = DepthMap(values=np.full((32, 32), 2.5))
    nm = normals_from_depth(dm, K)
    interior = nm.values[1:-1, 1:-1]
    assert np.allclose(interior, [0.0, 0.0, -1.0], atol=1e-6)
    # border pixels have incomplete neighborhoods
    assert np.all(nm.values[0] == 0)
    assert np.all(nm.values[:, -1] == 0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_normals_match_analytic_plane(seed):
    rng = np.random.default_rng(seed)
    tilt = rng.uniform(0, 0.45, size=2)
    n_true = np.array([tilt[0], tilt[1], -1.0])
    n_true /= np.linalg.norm(n_true)
    res = (48, 48)
    k = default_intrinsics(*res)
    plane = Primitive(kind="plane", rotation=rotation_from_z(n_true),
                      translation=np.array([0.0, 0.0, 2.5]), size=8.0,
                      albedo=np.array([0.5, 0.5, 0.5]), specularity=0.0)
    sample = render(Scene([plane], 6.0, np.array([0.5, 0.5, 0.5])), k, res)
    est = normals_from_depth(sample.depth, k)
    interior = est.values[2:-2, 2:-2].reshape(-1, 3).astype(np.float64)
    dots = np.clip(interior @ n_true, -1.0, 1.0)
    angles = np.degrees(np.arccos(dots))
    assert angles.max() < 0.5


def test_normals_zero_next_to_hole():
    vals = np.full((16, 16), 2.0)
    vals[8, 8] = 0.0
    nm = normals_from_depth(DepthMap(values=vals), K)
    assert not nm.valid[8, 8]
    for r, c in ((7, 8), (9, 8), (8, 7), (8, 9)):
        assert not nm.valid[r, c]
    assert nm.valid[6, 8]


def test_normals_unit_length_and_orientation():
    cfg = synth_domain_config()
    for seed in range(5):
        scene = generate_scene(cfg, seed)
        sample = render(scene, default_intrinsics(*cfg.res), cfg.res, cfg.d_max)
        est = normals_from_depth(sample.depth, sample.intrinsics)
        valid = est.valid
        norms = np.linalg.norm(est.values[valid], axis=1)
        assert np.abs(norms - 1.0).max() < 1e-5
        assert est.values[valid][:, 2].max() <= 0.0


# ---------------------------------------------------------------------------
# hole fraction


def test_hole_fraction_cases():
    assert hole_fraction(DepthMap(values=np.full((8, 8), 1.0))) == 0.0
    assert hole_fraction(DepthMap(values=np.zeros((8, 8)))) == 1.0
    vals = np.full((64, 64), 3.0)
    vals[10, 20] = 0.0
    assert hole_fraction(DepthMap(values=vals)) == 1.0 / 4096.0


def test_depth_map_invariants():
    with pytest.raises(ValueError):
        DepthMap(values=np.full((4, 4), 1.0))  # too small
    with pytest.raises(ValueError):
        DepthMap(values=np.full((8, 8), -0.1))
    with pytest.raises(ValueError):
        DepthMap(values=np.full((8, 8), 9.0), d_max=8.0)
    with pytest.raises(ValueError):
        DepthMap(values=np.full((8, 8), np.nan))
