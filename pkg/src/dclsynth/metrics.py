"""Evaluation metrics for depth enhancement and normal estimation.

All metrics are computed over the intersection of prediction/ground-truth
validity. Depth metrics: RMSE, RMSE of log depth, MAE, PSNR (peak = d_max),
and SSIM with a Gaussian window averaged over windows that lie fully inside
the joint valid mask. Normal metrics: median/mean angular error in degrees
and accuracy fractions at the standard thresholds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .depth_core import DepthMap, NormalMap

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
ANGLE_THRESHOLDS_DEG = (11.25, 16.0, 22.5, 30.0)


class EvaluationError(ValueError):
    """Raised when a metric has no valid pixels to evaluate."""


@dataclass
class MetricReport:
    """Named scalar metrics with valid-pixel counts plus a provenance block."""

    metrics: dict = field(default_factory=dict)  # name -> (value, count)
    provenance: dict = field(default_factory=dict)

    def value(self, name: str) -> float:
        return self.metrics[name][0]

    def count(self, name: str) -> int:
        return self.metrics[name][1]

    def to_json(self) -> str:
        body = {}
        for name, (value, n) in self.metrics.items():
            body[name] = {"value": "inf" if math.isinf(value) else value,
                          "n_pixels": n}
        body["provenance"] = self.provenance
        return json.dumps(body, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        raw = json.loads(text)
        provenance = raw.pop("provenance", {})
        metrics = {}
        for name, entry in raw.items():
            value = entry["value"]
            value = math.inf if value == "inf" else float(value)
            metrics[name] = (value, int(entry["n_pixels"]))
        return cls(metrics=metrics, provenance=provenance)


def gaussian_window(side: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian kernel of odd side length."""
    half = side // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_window_side(height: int, width: int) -> int:
    """11 when it fits; otherwise the largest odd side the raster allows."""
    side = min(SSIM_WINDOW, height, width)
    if side % 2 == 0:
        side -= 1
    return side


def _ssim_per_window(pred: np.ndarray, gt: np.ndarray, joint_valid: np.ndarray,
                     d_max: float) -> np.ndarray:
    """SSIM values at all window centers fully inside the joint valid mask."""
    h, w = gt.shape
    side = ssim_window_side(h, w)
    if side < 1:
        return np.empty(0)
    half = side // 2
    ker = gaussian_window(side)

    x = np.where(joint_valid, pred, 0.0)
    y = np.where(joint_valid, gt, 0.0)
    mu_x = correlate(x, ker, mode="constant")
    mu_y = correlate(y, ker, mode="constant")
    var_x = correlate(x * x, ker, mode="constant") - mu_x * mu_x
    var_y = correlate(y * y, ker, mode="constant") - mu_y * mu_y
    cov = correlate(x * y, ker, mode="constant") - mu_x * mu_y

    c1 = (SSIM_K1 * d_max) ** 2
    c2 = (SSIM_K2 * d_max) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))

    counts = correlate(joint_valid.astype(np.float64), np.ones((side, side)),
                       mode="constant")
    full = np.zeros((h, w), dtype=bool)
    full[half:h - half, half:w - half] = True
    full &= counts > side * side - 0.5
    return ssim_map[full]


class DepthMetricAccumulator:
    """Pools depth metrics over many prediction/ground-truth pairs."""

    def __init__(self):
        self.n = 0
        self.sum_sq = 0.0
        self.sum_abs = 0.0
        self.sum_sq_log = 0.0
        self.ssim_vals = []
        self.d_max = None

    def add(self, pred: DepthMap, gt: DepthMap) -> None:
        if pred.values.shape != gt.values.shape:
            raise EvaluationError("prediction/ground-truth dimensions differ")
        if self.d_max is None:
            self.d_max = gt.d_max
        valid = (gt.values > 0) & (pred.values > 0)
        p = pred.values[valid]
        g = gt.values[valid]
        self.n += p.size
        err = p - g
        self.sum_sq += float(np.sum(err ** 2))
        self.sum_abs += float(np.sum(np.abs(err)))
        self.sum_sq_log += float(np.sum((np.log(p) - np.log(g)) ** 2))
        self.ssim_vals.append(_ssim_per_window(pred.values, gt.values, valid,
                                               self.d_max))

    def report(self, provenance: dict | None = None) -> MetricReport:
        if self.n == 0:
            raise EvaluationError("no jointly valid pixels")
        mse = self.sum_sq / self.n
        metrics = {
            "rmse": (math.sqrt(mse), self.n),
            "rmse_log": (math.sqrt(self.sum_sq_log / self.n), self.n),
            "mae": (self.sum_abs / self.n, self.n),
            "psnr": (math.inf if mse == 0 else 10.0 * math.log10(self.d_max ** 2 / mse),
                     self.n),
        }
        ssim = np.concatenate(self.ssim_vals) if self.ssim_vals else np.empty(0)
        if ssim.size:
            metrics["ssim"] = (float(ssim.mean()), int(ssim.size))
        prov = dict(provenance or {})
        prov.setdefault("psnr_peak_m", self.d_max)
        return MetricReport(metrics=metrics, provenance=prov)


class NormalMetricAccumulator:
    """Pools angular-error metrics over many normal-map pairs."""

    def __init__(self):
        self.angles = []

    def add(self, pred: NormalMap, gt: NormalMap) -> None:
        if pred.values.shape != gt.values.shape:
            raise EvaluationError("prediction/ground-truth dimensions differ")
        valid = gt.valid & pred.valid
        p = pred.values[valid].astype(np.float64)
        g = gt.values[valid].astype(np.float64)
        dot = np.clip(np.sum(p * g, axis=1), -1.0, 1.0)
        self.angles.append(np.degrees(np.arccos(dot)))

    def report(self, provenance: dict | None = None) -> MetricReport:
        angles = np.concatenate(self.angles) if self.angles else np.empty(0)
        if angles.size == 0:
            raise EvaluationError("no jointly valid pixels")
        n = int(angles.size)
        metrics = {
            "median_deg": (float(np.median(angles)), n),
            "mean_deg": (float(angles.mean()), n),
        }
        for thr in ANGLE_THRESHOLDS_DEG:
            metrics[f"acc_{thr:g}"] = (float(np.mean(angles <= thr)), n)
        return MetricReport(metrics=metrics, provenance=dict(provenance or {}))


def depth_metrics(pred: DepthMap, gt: DepthMap,
                  provenance: dict | None = None) -> MetricReport:
    """Depth metrics for a single prediction/ground-truth pair."""
    acc = DepthMetricAccumulator()
    acc.add(pred, gt)
    return acc.report(provenance)


def normal_metrics(pred: NormalMap, gt: NormalMap,
                   provenance: dict | None = None) -> MetricReport:
    """Angular metrics for a single normal-map pair."""
    acc = NormalMetricAccumulator()
    acc.add(pred, gt)
    return acc.report(provenance)


def write_metric_csv(rows: list[tuple[str, MetricReport]], path) -> None:
    """One CSV row per (method, report); all reports must share metric keys."""
    if not rows:
        raise ValueError("no reports to tabulate")
    keys = list(rows[0][1].metrics.keys())
    for name, rep in rows:
        if list(rep.metrics.keys()) != keys:
            raise ValueError(f"metric keys of {name!r} conflict with the first report")
    lines = ["method," + ",".join(keys)]
    for name, rep in rows:
        vals = [repr(rep.metrics[k][0]) for k in keys]
        lines.append(name + "," + ",".join(vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
