"""Glue between trained branches, the samplers and the metric reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoiser import BranchDenoiser
from .metrics import MetricsReport
from .sampler import SamplerConfig, StepState, joint_sample, single_branch_sample
from .schedule import NoiseSchedule
from .signals import ARTIFACT_CLASSES, MixedExample

VARIANTS = ("base", "base+artifacts", "full")
TABLE_METRICS = ("rrmse_t", "rrmse_s", "cc", "snr_out")


@dataclass
class DenoiseResult:
    clean: np.ndarray
    artifact: np.ndarray | None
    residual_rows: list[dict]


def split_arrays(items: list[MixedExample]):
    y = np.stack([e.mixture.samples for e in items])
    x = np.stack([e.clean.samples for e in items])
    labels = [e.label for e in items]
    return y, x, labels


def denoise(items: list[MixedExample], s: NoiseSchedule, cfg: SamplerConfig, eeg: BranchDenoiser,
            artifact: BranchDenoiser | None = None) -> DenoiseResult:
    """Denoise every mixture in ``items`` as one batch.

    With an artifact branch this is the joint sampler and the per-step
    residual norms are recorded; without one it is the EEG-only sampler.
    """
    y, _, labels = split_arrays(items)
    rng = np.random.default_rng(cfg.seed)
    if artifact is None:
        return DenoiseResult(single_branch_sample(eeg, y, labels, s, cfg, rng), None, [])
    rows = []
    y_norm = np.linalg.norm(y, axis=1)

    def record(st: StepState):
        before = np.linalg.norm(st.residual, axis=1)
        after = np.linalg.norm(y - (st.x0_hat + cfg.lambda_snr * st.x0_hat_art), axis=1)
        rows.append({"step": st.t, "residual_norm_mean": float(before.mean()),
                     "residual_norm_max": float(before.max()),
                     "relative_residual_mean": float((before / y_norm).mean()),
                     "post_correction_norm_max": float(after.max())})

    x0, x0p = joint_sample(eeg, artifact, y, labels, s, cfg, rng, trace=record)
    return DenoiseResult(x0, x0p, rows)


def write_residuals(path, rows: list[dict]) -> None:
    cols = ("step", "residual_norm_mean", "residual_norm_max", "relative_residual_mean",
            "post_correction_norm_max")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["step"]] + [repr(r[c]) for c in cols[1:]])


def ablation_table(reports: dict[str, MetricsReport]) -> list[dict]:
    """Rows (artifact, metric) for EOG/EMG/ECG/Avg × four metrics, one column per variant."""
    aggs = {v: r.aggregate() for v, r in reports.items()}
    rows = []
    for cls in [c.value for c in ARTIFACT_CLASSES] + ["Avg"]:
        key = "overall" if cls == "Avg" else cls
        for m in TABLE_METRICS:
            row = {"artifact": cls, "metric": m}
            for v in VARIANTS:
                agg = aggs.get(v, {})
                row[v] = agg[key][m]["mean"] if key in agg else float("nan")
            rows.append(row)
    return rows


def write_ablation(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("artifact", "metric") + VARIANTS)
        for r in rows:
            w.writerow([r["artifact"], r["metric"]] + [repr(float(r[v])) for v in VARIANTS])


def read_ablation(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{"artifact": r["artifact"], "metric": r["metric"], **{v: float(r[v]) for v in VARIANTS}}
                for r in csv.DictReader(fh)]

