"""Metric implementations against naive double-loop references."""

import math

import numpy as np
import pytest

from dclsynth.depth_core import DepthMap, NormalMap
from dclsynth.metrics import (EvaluationError, MetricReport, depth_metrics,
                              normal_metrics, ssim_window_side,
                              write_metric_csv)
from naive_metrics import naive_depth_metrics, naive_normal_metrics, naive_ssim

D_MAX = 8.0


def random_pair(rng, h=8, w=8, holes=False):
    gt = rng.uniform(0.5, 7.5, size=(h, w))
    pred = np.clip(gt + rng.normal(0, 0.3, size=(h, w)), 0.1, D_MAX)
    if holes:
        gt[rng.random((h, w)) < 0.15] = 0.0
        pred[rng.random((h, w)) < 0.1] = 0.0
    return (DepthMap(values=pred, d_max=D_MAX), DepthMap(values=gt, d_max=D_MAX))


def random_normals(rng, h=8, w=8, holes=False):
    v = rng.normal(size=(h, w, 3))
    v /= np.linalg.norm(v, axis=2, keepdims=True)
    if holes:
        v[rng.random((h, w)) < 0.15] = 0.0
    return NormalMap(values=v.astype(np.float32))


# ---------------------------------------------------------------------------
# depth metrics


def test_identity_prediction():
    rng = np.random.default_rng(0)
    _, gt = random_pair(rng)
    rep = depth_metrics(gt, gt)
    assert rep.value("rmse") == 0.0
    assert rep.value("rmse_log") == 0.0
    assert rep.value("mae") == 0.0
    assert math.isinf(rep.value("psnr"))
    assert rep.value("ssim") == pytest.approx(1.0, abs=1e-12)


def test_constant_offset():
    gt = DepthMap(values=np.full((16, 16), 3.0), d_max=D_MAX)
    pred = DepthMap(values=np.full((16, 16), 3.1), d_max=D_MAX)
    rep = depth_metrics(pred, gt)
    assert rep.value("rmse") == pytest.approx(0.1, abs=1e-12)
    assert rep.value("mae") == pytest.approx(0.1, abs=1e-12)
    assert rep.value("psnr") == pytest.approx(10 * math.log10(D_MAX ** 2 / 0.01),
                                              abs=1e-9)


@pytest.mark.parametrize("holes", [False, True])
def test_matches_naive_reference_on_random_rasters(holes):
    rng = np.random.default_rng(42 if holes else 7)
    for _ in range(100):
        pred, gt = random_pair(rng, holes=holes)
        rep = depth_metrics(pred, gt)
        ref = naive_depth_metrics(pred.values, gt.values, D_MAX)
        for key in ("rmse", "rmse_log", "mae"):
            assert rep.value(key) == pytest.approx(ref[key], abs=1e-10)
        assert rep.value("psnr") == pytest.approx(ref["psnr"], abs=1e-10)
        assert rep.count("rmse") == ref["n"]
        ssim_ref, n_ref = naive_ssim(pred.values, gt.values, D_MAX)
        if n_ref:
            assert rep.value("ssim") == pytest.approx(ssim_ref, abs=1e-10)
            assert rep.count("ssim") == n_ref
        else:
            assert "ssim" not in rep.metrics


def test_ssim_window_shrinks_for_small_rasters():
    assert ssim_window_side(64, 64) == 11
    assert ssim_window_side(8, 8) == 7
    assert ssim_window_side(9, 32) == 9


def test_ssim_windows_respect_holes():
    rng = np.random.default_rng(3)
    pred, gt = random_pair(rng, h=16, w=16)
    gt.values[8, 8] = 0.0  # punch one hole; windows covering it must drop
    rep_full = depth_metrics(DepthMap(values=pred.values.copy(), d_max=D_MAX),
                             DepthMap(values=np.where(gt.values == 0, 5.0,
                                                      gt.values), d_max=D_MAX))
    rep_holed = depth_metrics(pred, gt)
    assert rep_holed.count("ssim") < rep_full.count("ssim")
    ssim_ref, n_ref = naive_ssim(pred.values, gt.values, D_MAX)
    assert rep_holed.count("ssim") == n_ref
    assert rep_holed.value("ssim") == pytest.approx(ssim_ref, abs=1e-10)


def test_no_jointly_valid_pixels_is_error():
    gt = np.full((8, 8), 2.0)
    gt[:4] = 0.0
    pred = np.full((8, 8), 2.0)
    pred[4:] = 0.0
    with pytest.raises(EvaluationError):
        depth_metrics(DepthMap(values=pred, d_max=D_MAX),
                      DepthMap(values=gt, d_max=D_MAX))


def test_pointwise_metrics_are_permutation_invariant():
    rng = np.random.default_rng(11)
    pred, gt = random_pair(rng, h=12, w=12, holes=True)
    perm = rng.permutation(144)
    pred2 = DepthMap(values=pred.values.ravel()[perm].reshape(12, 12), d_max=D_MAX)
    gt2 = DepthMap(values=gt.values.ravel()[perm].reshape(12, 12), d_max=D_MAX)
    a = depth_metrics(pred, gt)
    b = depth_metrics(pred2, gt2)
    for key in ("rmse", "rmse_log", "mae", "psnr"):
        assert a.value(key) == pytest.approx(b.value(key), abs=1e-12)


def test_rmse_dominates_mae_and_ssim_bounded():
    rng = np.random.default_rng(12)
    for _ in range(50):
        pred, gt = random_pair(rng, h=12, w=12)
        rep = depth_metrics(pred, gt)
        assert rep.value("rmse") >= rep.value("mae") - 1e-12
        assert -1.0 <= rep.value("ssim") <= 1.0


# ---------------------------------------------------------------------------
# normal metrics


def test_normal_identity():
    # float32 unit vectors carry ~1e-7 norm error, i.e. up to ~0.04 degrees
    rng = np.random.default_rng(1)
    nm = random_normals(rng)
    rep = normal_metrics(nm, nm)
    assert rep.value("median_deg") == pytest.approx(0.0, abs=0.05)
    assert rep.value("mean_deg") == pytest.approx(0.0, abs=0.05)
    for thr in ("acc_11.25", "acc_16", "acc_22.5", "acc_30"):
        assert rep.value(thr) == 1.0


def test_normal_identity_exact_for_float64():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(8, 8, 3))
    v /= np.linalg.norm(v, axis=2, keepdims=True)
    rep = normal_metrics(NormalMap(values=v), NormalMap(values=v.copy()))
    assert rep.value("mean_deg") == pytest.approx(0.0, abs=1e-5)


def test_normal_orthogonal():
    h = w = 8
    gt = np.zeros((h, w, 3), dtype=np.float32)
    gt[..., 2] = -1.0
    pred = np.zeros((h, w, 3), dtype=np.float32)
    pred[..., 0] = 1.0
    rep = normal_metrics(NormalMap(values=pred), NormalMap(values=gt))
    assert rep.value("median_deg") == pytest.approx(90.0, abs=1e-6)
    assert rep.value("mean_deg") == pytest.approx(90.0, abs=1e-6)
    for thr in ("acc_11.25", "acc_16", "acc_22.5", "acc_30"):
        assert rep.value(thr) == 0.0


def test_clamp_prevents_domain_error():
    v = np.zeros((8, 8, 3), dtype=np.float32)
    v[..., 2] = -1.0
    pred = v * np.float32(0.9999999 + 1e-7)  # dot slightly above 1 after fp
    rep = normal_metrics(NormalMap(values=pred), NormalMap(values=v))
    assert rep.value("mean_deg") == pytest.approx(0.0, abs=1e-2)


def _dot_measuring_exactly(target_deg):
    """A dot product whose arccos lands exactly on target_deg in float64."""
    x = np.cos(np.radians(target_deg))
    for _ in range(8):
        got = float(np.degrees(np.arccos(np.clip(x, -1.0, 1.0))))
        if got == target_deg:
            return float(x)
        x = np.nextafter(x, 1.0 if got > target_deg else -1.0)
    raise AssertionError(f"no float64 dot measures exactly {target_deg}")


def test_two_pixel_case_fixes_threshold_convention():
    # errors of exactly 30 and 10 degrees: median 20, mean 20,
    # acc@11.25 = 0.5 and acc@30 = 1.0 under the closed (<=) convention;
    # the 30-degree pixel sits exactly on the threshold
    d30 = _dot_measuring_exactly(30.0)
    gt = np.zeros((8, 8, 3))
    gt[0, 0] = [0, 0, -1]
    gt[0, 1] = [0, 0, -1]
    pred = np.zeros((8, 8, 3))
    pred[0, 0] = [math.sqrt(1 - d30 * d30), 0, -d30]
    pred[0, 1] = [math.sin(math.radians(10)), 0, -math.cos(math.radians(10))]
    rep = normal_metrics(NormalMap(values=pred), NormalMap(values=gt))
    assert rep.value("median_deg") == pytest.approx(20.0, abs=1e-9)
    assert rep.value("mean_deg") == pytest.approx(20.0, abs=1e-9)
    assert rep.value("acc_11.25") == 0.5
    assert rep.value("acc_30") == 1.0
    assert rep.count("median_deg") == 2


def test_normal_metrics_match_naive_reference():
    rng = np.random.default_rng(13)
    for _ in range(100):
        pred = random_normals(rng, holes=True)
        gt = random_normals(rng, holes=True)
        rep = normal_metrics(pred, gt)
        ref = naive_normal_metrics(pred.values, gt.values)
        for key in ("median_deg", "mean_deg", "acc_11.25", "acc_16",
                    "acc_22.5", "acc_30"):
            assert rep.value(key) == pytest.approx(ref[key], abs=1e-10)
        assert rep.count("mean_deg") == ref["n"]


def test_threshold_fractions_monotone():
    rng = np.random.default_rng(14)
    for _ in range(20):
        rep = normal_metrics(random_normals(rng), random_normals(rng))
        accs = [rep.value(f"acc_{t:g}") for t in (11.25, 16.0, 22.5, 30.0)]
        assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))


# ---------------------------------------------------------------------------
# report container


def test_metric_report_json_round_trip():
    rep = MetricReport(metrics={"rmse": (0.25, 100), "psnr": (math.inf, 100)},
                       provenance={"model": "x", "seed": 3})
    back = MetricReport.from_json(rep.to_json())
    assert back.metrics["rmse"] == (0.25, 100)
    assert math.isinf(back.metrics["psnr"][0])
    assert back.provenance == {"model": "x", "seed": 3}


def test_csv_emitter(tmp_path):
    a = MetricReport(metrics={"rmse": (0.2, 10), "mae": (0.1, 10)})
    b = MetricReport(metrics={"rmse": (0.3, 10), "mae": (0.15, 10)})
    out = tmp_path / "t.csv"
    write_metric_csv([("m1", a), ("m2", b)], out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "method,rmse,mae"
    assert len(lines) == 3 and lines[1].startswith("m1,")
    c = MetricReport(metrics={"median_deg": (5.0, 10)})
    with pytest.raises(ValueError):
        write_metric_csv([("m1", a), ("m3", c)], tmp_path / "u.csv")
