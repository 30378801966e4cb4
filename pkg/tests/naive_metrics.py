"""Naive double-loop reference implementations of every evaluation metric.

Kept deliberately independent of the package implementations: plain Python
loops, no scipy, no shared code. Used as the oracle for metric tests.
"""

import math

import numpy as np


def naive_depth_metrics(pred, gt, d_max):
    """RMSE / RMSE_log / MAE / PSNR over pixels valid in both rasters."""
    h, w = gt.shape
    sq = sq_log = ab = 0.0
    n = 0
    for r in range(h):
        for c in range(w):
            if gt[r, c] > 0 and pred[r, c] > 0:
                e = pred[r, c] - gt[r, c]
                sq += e * e
                ab += abs(e)
                le = math.log(pred[r, c]) - math.log(gt[r, c])
                sq_log += le * le
                n += 1
    if n == 0:
        raise ValueError("no valid pixels")
    mse = sq / n
    return {
        "rmse": math.sqrt(mse),
        "rmse_log": math.sqrt(sq_log / n),
        "mae": ab / n,
        "psnr": math.inf if mse == 0 else 10.0 * math.log10(d_max * d_max / mse),
        "n": n,
    }


def naive_gaussian_kernel(side, sigma=1.5):
    half = side // 2
    k = np.empty((side, side))
    for i in range(side):
        for j in range(side):
            k[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2)
                               / (2 * sigma * sigma))
    return k / k.sum()


def naive_ssim(pred, gt, d_max, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over Gaussian windows fully inside the joint valid mask.

    The window shrinks to the largest odd side that fits small rasters.
    Returns (mean, count); count == 0 when no window fits.
    """
    h, w = gt.shape
    side = min(window, h, w)
    if side % 2 == 0:
        side -= 1
    half = side // 2
    ker = naive_gaussian_kernel(side, sigma)
    c1 = (k1 * d_max) ** 2
    c2 = (k2 * d_max) ** 2
    vals = []
    for r in range(half, h - half):
        for c in range(half, w - half):
            win_p = pred[r - half:r + half + 1, c - half:c + half + 1]
            win_g = gt[r - half:r + half + 1, c - half:c + half + 1]
            if np.any(win_p <= 0) or np.any(win_g <= 0):
                continue
            mx = my = 0.0
            for i in range(side):
                for j in range(side):
                    mx += ker[i, j] * win_p[i, j]
                    my += ker[i, j] * win_g[i, j]
            vx = vy = cov = 0.0
            for i in range(side):
                for j in range(side):
                    vx += ker[i, j] * (win_p[i, j] - mx) ** 2
                    vy += ker[i, j] * (win_g[i, j] - my) ** 2
                    cov += ker[i, j] * (win_p[i, j] - mx) * (win_g[i, j] - my)
            val = ((2 * mx * my + c1) * (2 * cov + c2)) / (
                (mx * mx + my * my + c1) * (vx + vy + c2))
            vals.append(val)
    if not vals:
        return math.nan, 0
    return sum(vals) / len(vals), len(vals)


def naive_normal_metrics(pred, gt):
    """Median/mean angular error (degrees) and closed-threshold accuracies."""
    h, w = gt.shape[:2]
    angles = []
    for r in range(h):
        for c in range(w):
            if not any(gt[r, c]) or not any(pred[r, c]):
                continue
            dot = sum(float(pred[r, c, i]) * float(gt[r, c, i]) for i in range(3))
            dot = max(-1.0, min(1.0, dot))
            angles.append(math.degrees(math.acos(dot)))
    if not angles:
        raise ValueError("no valid pixels")
    angles.sort()
    n = len(angles)
    median = (angles[n // 2] if n % 2 == 1
              else 0.5 * (angles[n // 2 - 1] + angles[n // 2]))
    out = {"median_deg": median, "mean_deg": sum(angles) / n, "n": n}
    for thr in (11.25, 16.0, 22.5, 30.0):
        out[f"acc_{thr:g}"] = sum(1 for a in angles if a <= thr) / n
    return out
