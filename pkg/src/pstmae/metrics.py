"""Field-level evaluation metrics and the per-variable/per-step report.

All metrics operate on normalized fields in [0,1]. SSIM follows the
canonical windowed formulation (11x11 Gaussian, sigma 1.5, K1=0.01,
K2=0.03, dynamic range 1); PSNR uses MAX=1 with exact matches capped at
120 dB and flagged. Reports carry both the mean of per-frame PSNR in dB
and the PSNR of the aggregated MSE, since the two differ.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 120.0
PSNR_EXACT_MSE = 1e-12


def mse_field(pred, truth):
    """Mean squared error between two equally-shaped fields."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    d = pred - truth
    return float((d * d).mean())


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_field(pred, truth, window=11, sigma=1.5, k1=0.01, k2=0.03, max_val=1.0):
    """Mean local structural similarity over valid window positions.

    Fields smaller than the window fall back to the largest odd window
    that fits.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"ssim expects two equal 2-D fields, got {pred.shape} vs {truth.shape}")
    m = min(pred.shape)
    if window > m:
        window = m if m % 2 else m - 1
    w = _gaussian_window(window, sigma)

    def local(f):
        v = sliding_window_view(f, (window, window))
        return np.einsum("ijuv,uv->ij", v, w, optimize=True)

    mu_x = local(pred)
    mu_y = local(truth)
    xx = local(pred * pred) - mu_x * mu_x
    yy = local(truth * truth) - mu_y * mu_y
    xy = local(pred * truth) - mu_x * mu_y
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float((num / den).mean())


def psnr_from_mse(m, max_val=1.0):
    """10*log10(MAX^2 / MSE); near-exact matches are capped at 120 dB."""
    if m < PSNR_EXACT_MSE:
        return PSNR_CAP_DB
    return 20.0 * math.log10(max_val) - 10.0 * math.log10(m)


def psnr_field(pred, truth, max_val=1.0):
    return psnr_from_mse(mse_field(pred, truth), max_val)


def psnr_is_exact(pred, truth):
    return mse_field(pred, truth) < PSNR_EXACT_MSE


def error_map(pred, truth, path_base):
    """Write |pred-truth| as an 8-bit PGM plus a JSON scale sidecar.

    The maximum-error pixel maps to 255; the sidecar records the float
    maximum so the linear scale round-trips.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    err = np.abs(pred - truth)
    peak = float(err.max())
    if peak > 0:
        img = np.rint(err / peak * 255.0).astype(np.uint8)
    else:
        img = np.zeros(err.shape, dtype=np.uint8)
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    pgm = base.with_suffix(".pgm")
    with open(pgm, "wb") as f:
        f.write(f"P5\n{err.shape[1]} {err.shape[0]}\n255\n".encode())
        f.write(img.tobytes())
    sidecar = {"scale": "linear", "max_abs_error": peak, "levels": 256}
    with open(base.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f, sort_keys=True)
        f.write("\n")
    return pgm


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricRow:
    dataset: str
    model: str
    variable: str
    step: object           # forecast step int, 0 for per-frame reconstruction, "all" for aggregates
    count: int
    mse: float
    ssim: float
    psnr: float            # mean of per-frame dB
    psnr_of_mean_mse: float
    exact_matches: int = 0


CSV_COLUMNS = ["dataset", "model", "variable", "step", "count",
               "mse", "ssim", "psnr", "psnr_of_mean_mse", "exact_matches"]


def make_row(dataset, model, variable, step, mses, ssims, psnrs, exact):
    mses = list(mses)
    n = len(mses)
    mean_mse = sum(mses) / n
    return MetricRow(dataset=dataset, model=model, variable=variable, step=step,
                     count=n, mse=mean_mse, ssim=sum(ssims) / n, psnr=sum(psnrs) / n,
                     psnr_of_mean_mse=_psnr_of(mean_mse), exact_matches=exact)


def _psnr_of(mean_mse):
    return psnr_from_mse(mean_mse)


def aggregate_rows(rows, dataset, model, variable, step="all"):
    """Count-weighted mean of per-step rows; PSNR-of-mean recomputed."""
    total = sum(r.count for r in rows)
    mse = sum(r.mse * r.count for r in rows) / total
    ssim = sum(r.ssim * r.count for r in rows) / total
    psnr = sum(r.psnr * r.count for r in rows) / total
    return MetricRow(dataset=dataset, model=model, variable=variable, step=step,
                     count=total, mse=mse, ssim=ssim, psnr=psnr,
                     psnr_of_mean_mse=_psnr_of(mse),
                     exact_matches=sum(r.exact_matches for r in rows))


@dataclass
class MetricsReport:
    """Per-variable, per-step rows plus their aggregates."""

    rows: list = field(default_factory=list)

    def add(self, row):
        self.rows.append(row)

    def finalize(self):
        """Append per-variable and overall aggregate rows."""
        per_step = [r for r in self.rows if r.step != "all"]
        if not per_step:
            return self
        dataset, model = per_step[0].dataset, per_step[0].model
        variables = sorted({r.variable for r in per_step})
        for v in variables:
            self.rows.append(aggregate_rows([r for r in per_step if r.variable == v],
                                            dataset, model, v))
        self.rows.append(aggregate_rows(per_step, dataset, model, "all"))
        return self

    def overall(self):
        for r in self.rows:
            if r.variable == "all" and r.step == "all":
                return r
        raise ValueError("report not finalized")

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.dataset, r.model, r.variable, r.step, r.count,
                            f"{r.mse:.10e}", f"{r.ssim:.8f}", f"{r.psnr:.6f}",
                            f"{r.psnr_of_mean_mse:.6f}", r.exact_matches])
        return path
