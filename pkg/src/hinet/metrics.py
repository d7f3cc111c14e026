"""PSNR, NMSE and SSIM, plus slice-level evaluation and aggregation.

Evaluation maps network-range images from [-1, 1] onto [0, 1] before
scoring (``to_unit_range``); the metric functions themselves take
images as given.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigError, DataError, DimensionError

log = logging.getLogger(__name__)

ORIENTATION = {"psnr": "higher is better", "nmse": "lower is better", "ssim": "higher is better"}
METRICS = ("psnr", "nmse", "ssim")
SLICE_FIELDS = ("subject", "slice", "psnr", "nmse", "ssim")


def _pair(y, g):
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if y.shape != g.shape:
        raise DimensionError(f"image shapes differ: {y.shape} vs {g.shape}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(g))):
        raise DataError("images must be finite")
    return y, g


def to_unit_range(img):
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def psnr(y, g):
    """PSNR in dB, peak = largest intensity over both images.

    Identical images give ``math.inf``.
    """
    y, g = _pair(y, g)
    mse = np.mean((y - g) ** 2)
    if mse == 0:
        return math.inf
    peak = max(y.max(), g.max())
    return float(10.0 * np.log10(peak ** 2 / mse))


def nmse(y, g):
    y, g = _pair(y, g)
    ref = np.sum(y ** 2)
    if ref == 0:
        raise DataError("NMSE is undefined for an all-zero reference")
    return float(np.sum((y - g) ** 2) / ref)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(y, g, data_range=1.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03, full=False):
    """Mean SSIM over every fully-contained Gaussian window position."""
    y, g = _pair(y, g)
    if y.ndim != 2:
        raise DimensionError(f"ssim expects 2-D images, got {y.shape}")
    if win_size > min(y.shape):
        raise ConfigError(f"window {win_size} exceeds image shape {y.shape}")
    w = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(a):
        return signal.correlate(a, w, mode="valid", method="direct")

    mu_y, mu_g = filt(y), filt(g)
    var_y = filt(y * y) - mu_y * mu_y
    var_g = filt(g * g) - mu_g * mu_g
    cov = filt(y * g) - mu_y * mu_g
    smap = ((2 * mu_y * mu_g + c1) * (2 * cov + c2)) / ((mu_y * mu_y + mu_g * mu_g + c1) * (var_y + var_g + c2))
    return smap if full else float(smap.mean())


def image_metrics(y, g):
    """PSNR/NMSE/SSIM of a [-1, 1] prediction against a [-1, 1] target."""
    yu, gu = to_unit_range(y), to_unit_range(g)
    return {"psnr": psnr(yu, gu), "nmse": nmse(yu, gu), "ssim": ssim(yu, gu)}


@dataclass
class MetricsRecord:
    subject: str
    slice: int
    psnr: float
    nmse: float
    ssim: float


@dataclass
class AggregateReport:
    task: str
    stats: dict                     # metric -> {"mean", "std", "count"}
    count: int
    n_infinite_psnr: int = 0
    skipped_subjects: list = field(default_factory=list)
    orientation: dict = field(default_factory=lambda: dict(ORIENTATION))

    def row(self):
        out = {"task": self.task, "count": self.count}
        for m in METRICS:
            out[f"{m}_mean"] = self.stats[m]["mean"]
            out[f"{m}_std"] = self.stats[m]["std"]
        return out

    def format_table(self, label=None):
        return format_table([(label or self.task, self)])


def aggregate(records, task="", skipped_subjects=(), per_subject=False):
    """Mean and population std of each metric over slices (or over
    per-subject means when ``per_subject``).  Infinite PSNR values are
    dropped from the PSNR statistics and counted."""
    records = list(records)
    if per_subject:
        by_subject = {}
        for r in records:
            by_subject.setdefault(r.subject, []).append(r)
        records = [
            MetricsRecord(sid, -1, *(_finite_mean([getattr(r, m) for r in rs]) for m in METRICS))
            for sid, rs in by_subject.items()
        ]
    stats, n_inf = {}, 0
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in records], dtype=np.float64)
        if m == "psnr":
            finite = np.isfinite(vals)
            n_inf = int((~finite).sum())
            if n_inf:
                log.warning("excluding %d slice(s) with infinite PSNR from the mean", n_inf)
            vals = vals[finite]
        stats[m] = {
            "mean": float(vals.mean()) if vals.size else math.nan,
            "std": float(vals.std()) if vals.size else math.nan,
            "count": int(vals.size),
        }
    return AggregateReport(task, stats, len(records), n_inf, list(skipped_subjects))


def _finite_mean(vals):
    vals = np.asarray(vals, dtype=np.float64)
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if vals.size else math.inf


def write_slice_csv(path, records):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SLICE_FIELDS)
        for r in records:
            w.writerow([r.subject, r.slice, repr(r.psnr), repr(r.nmse), repr(r.ssim)])
    return path


def read_slice_csv(path):
    with open(path, newline="") as fh:
        return [MetricsRecord(row["subject"], int(row["slice"]), float(row["psnr"]), float(row["nmse"]),
                              float(row["ssim"])) for row in csv.DictReader(fh)]


def format_table(rows):
    """Text table in the layout ``Methods | PSNR | NMSE | SSIM`` with mean±std cells."""
    header = f"{'Methods':<16}| {'PSNR ↑':<18}| {'NMSE ↓':<18}| {'SSIM ↑':<18}"
    lines = [header, "-" * len(header)]
    for label, rep in rows:
        if rep is None:
            lines.append(f"{label:<16}| {'(failed)':<18}| {'':<18}| {'':<18}")
            continue
        s = rep.stats
        cells = [f"{s['psnr']['mean']:.2f}±{s['psnr']['std']:.3f}",
                 f"{s['nmse']['mean']:.4f}±{s['nmse']['std']:.3f}",
                 f"{s['ssim']['mean']:.4f}±{s['ssim']['std']:.3f}"]
        lines.append(f"{label:<16}| " + "| ".join(f"{c:<18}" for c in cells))
    return "\n".join(lines)
