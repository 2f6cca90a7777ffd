"""Reconstruction metrics and per-class aggregation.

Report CSV columns, in order: ``index, class, rrmse_t, rrmse_s, cc,
cc_p_value, snr_out``. ``snr_out`` is capped at ``SNR_CAP_DB`` when the
estimate is exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

SNR_CAP_DB = 120.0
METRIC_NAMES = ("rrmse_t", "rrmse_s", "cc", "cc_p_value", "snr_out")
CSV_COLUMNS = ("index", "class") + METRIC_NAMES


def _pair(x_hat, x):
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    return x_hat, x


def _relative(err, ref):
    denom = np.linalg.norm(ref)
    if denom == 0:
        raise ValueError("reference has zero energy")
    return float(np.linalg.norm(err) / denom)


def periodogram(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.abs(np.fft.fft(x)) ** 2 / x.size


def rrmse_t(x_hat, x) -> float:
    x_hat, x = _pair(x_hat, x)
    return _relative(x_hat - x, x)


def rrmse_s(x_hat, x) -> float:
    x_hat, x = _pair(x_hat, x)
    px = periodogram(x)
    return _relative(periodogram(x_hat) - px, px)


def cc(x_hat, x) -> float:
    x_hat, x = _pair(x_hat, x)
    if x.size < 3:
        raise ValueError("correlation needs at least 3 samples")
    a, b = x_hat - x_hat.mean(), x - x.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("correlation undefined for constant input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cc_p_value(x_hat, x) -> float:
    """Two-sided p-value of the Pearson r via t = r√((n-2)/(1-r²))."""
    r = cc(x_hat, x)
    n = np.size(x)
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 2)))


def snr_out(x_hat, x) -> float:
    x_hat, x = _pair(x_hat, x)
    err = np.sum((x_hat - x) ** 2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(np.sum(x * x) / err))


def segment_metrics(x_hat, x) -> dict[str, float]:
    return {"rrmse_t": rrmse_t(x_hat, x), "rrmse_s": rrmse_s(x_hat, x), "cc": cc(x_hat, x),
            "cc_p_value": cc_p_value(x_hat, x), "snr_out": snr_out(x_hat, x)}


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)

    @classmethod
    def compute(cls, estimates, references, labels: Sequence[str]) -> "MetricsReport":
        rows = []
        for i, (xh, x, lab) in enumerate(zip(estimates, references, labels)):
            row = {"index": i, "class": str(getattr(lab, "value", lab))}
            row.update(segment_metrics(xh, x))
            row["snr_out"] = min(row["snr_out"], SNR_CAP_DB)
            rows.append(row)
        return cls(rows)

    def classes(self) -> list[str]:
        return sorted({r["class"] for r in self.rows})

    def aggregate(self) -> dict:
        """Mean and std of every metric per class and over all rows."""
        groups = {c: [r for r in self.rows if r["class"] == c] for c in self.classes()}
        groups["overall"] = self.rows
        out = {}
        for name, rows in groups.items():
            stats_ = {"count": len(rows)}
            for m in METRIC_NAMES:
                v = np.array([r[m] for r in rows], dtype=np.float64)
                stats_[m] = {"mean": float(v.mean()) if v.size else math.nan,
                             "std": float(v.std()) if v.size else math.nan}
            out[name] = stats_
        return out

    def mean(self, metric: str, cls: str = "overall") -> float:
        return self.aggregate()[cls][metric]["mean"]

    def write(self, csv_path, json_path=None) -> None:
        csv_path = Path(csv_path)
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r["index"], r["class"]] + [repr(float(r[m])) for m in METRIC_NAMES])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.aggregate(), indent=1) + "\n")

    @classmethod
    def read(cls, csv_path) -> "MetricsReport":
        with Path(csv_path).open() as fh:
            rows = []
            for r in csv.DictReader(fh):
                row = {"index": int(r["index"]), "class": r["class"]}
                row.update({m: float(r[m]) for m in METRIC_NAMES})
                rows.append(row)
        return cls(rows)
