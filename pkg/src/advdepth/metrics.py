"""Depth metrics, target selection and the per-image CSV report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = (
    "image-id",
    "method",
    "mode",
    "clean-rmse",
    "adv-rmse",
    "rmse-ratio",
    "clean-mmd",
    "adv-mmd",
    "mmd-ratio",
    "target-depth",
)


@dataclass(frozen=True)
class SparseDepth:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if np.shape(self.values) != np.shape(self.valid):
            raise ValueError("values and valid mask differ in shape")

    @property
    def valid_fraction(self) -> float:
        return float(np.mean(self.valid))


def _unpack(gt, valid):
    if isinstance(gt, SparseDepth):
        return np.asarray(gt.values, dtype=np.float64), np.asarray(gt.valid) > 0
    if valid is None:
        raise TypeError("valid mask required when gt is a plain array")
    return np.asarray(gt, dtype=np.float64), np.asarray(valid) > 0


def rmse(pred, gt, valid=None) -> float:
    """Root mean squared error over valid ground-truth pixels only."""
    values, m = _unpack(gt, valid)
    pred = np.asarray(pred, dtype=np.float64).reshape(values.shape)
    n = int(m.sum())
    if n == 0:
        raise ValueError("rmse needs at least one valid pixel")
    d = pred[m] - values[m]
    return math.sqrt(float(np.sum(d * d)) / n)


def mmd(pred, mask) -> float:
    """Masked mean depth: mean prediction over the mask (ground truth ignored)."""
    m = np.asarray(mask) > 0
    n = int(m.sum())
    if n == 0:
        raise ValueError("mmd needs a nonempty mask")
    return float(np.sum(np.asarray(pred, dtype=np.float64).reshape(m.shape)[m])) / n


def select_targets(instances, gt, valid=None, threshold: float = 50.0) -> list:
    """Instance masks whose mean valid ground-truth depth is below ``threshold``.

    Instances without a single valid ground-truth pixel are dropped.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    values, v = _unpack(gt, valid)
    kept = []
    for mask in instances:
        sel = (np.asarray(mask) > 0) & v
        if sel.any() and values[sel].mean() < threshold:
            kept.append(mask)
    return kept


@dataclass(frozen=True)
class MetricReport:
    clean_rmse: float | None = None
    adv_rmse: float | None = None
    rmse_ratio: float | None = None
    clean_mmd: float | None = None
    adv_mmd: float | None = None
    mmd_ratio: float | None = None


def _ratio(clean, adv):
    if clean is None or adv is None or clean <= 0:
        return None
    return adv / clean


def ratio_report(clean_rmse=None, adv_rmse=None, clean_mmd=None, adv_mmd=None) -> MetricReport:
    """Attach adversarial/clean ratios; a ratio is None when the clean value is not positive."""
    return MetricReport(
        clean_rmse, adv_rmse, _ratio(clean_rmse, adv_rmse), clean_mmd, adv_mmd, _ratio(clean_mmd, adv_mmd)
    )


def format_ratio(r) -> str:
    return "" if r is None else f"{r:.1f}×"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _parse(s):
    return None if s == "" else float(s)


def write_csv(path, rows):
    """``rows``: iterable of ``(image_id, method, mode, MetricReport, target_depth)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for image_id, method, mode, r, target in rows:
            w.writerow(
                [
                    image_id,
                    method,
                    mode,
                    _fmt(r.clean_rmse),
                    _fmt(r.adv_rmse),
                    _fmt(r.rmse_ratio),
                    _fmt(r.clean_mmd),
                    _fmt(r.adv_mmd),
                    _fmt(r.mmd_ratio),
                    _fmt(target),
                ]
            )


def read_csv(path) -> list:
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames is None:
            return []
        missing = set(CSV_COLUMNS[:9]) - set(rd.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for r in rd:
            rep = MetricReport(*(_parse(r[c]) for c in CSV_COLUMNS[3:9]))
            rows.append((r["image-id"], r["method"], r["mode"], rep, _parse(r.get("target-depth", "") or "")))
        return rows
