"""``d4pm`` command line: synth-data, train, denoise, evaluate, ablate, oracle-check.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 I/O error.
Settings come from flags, then ``--config FILE`` (flat ``key = value`` lines,
keys spelled like the long flags), then built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .denoiser import BranchDenoiser, DenoiserConfig
from .metrics import MetricsReport
from .oracle import run_oracle_checks
from .pipeline import VARIANTS, ablation_table, denoise, write_ablation, write_residuals
from .sampler import SamplerConfig, SamplingError
from .schedule import make_schedule
from .signals import (ARTIFACT_CLASSES, DEFAULT_SAMPLE_RATE, SegmentFileError, SignalClass, Segment,
                      build_mixed_dataset, generate_synthetic, load_dataset, load_segments, save_dataset,
                      save_segments)
from .trainer import (Branch, CheckpointError, TrainConfig, TrainingDiverged, best_network, load_checkpoint,
                      save_checkpoint, train_branch)

log = logging.getLogger("d4pm")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --- config file ------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# --- argument parsing ---------------------------------------------------------


def _add_network(p):
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--encoder-blocks", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--film-dim", type=int, default=32)


def _add_schedule(p):
    p.add_argument("--steps", type=int, default=50, help="diffusion steps T")
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.2)


def _add_training(p):
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    _add_schedule(p)
    _add_network(p)


def _add_sampling(p):
    p.add_argument("--lambda-dc", type=float, default=0.5)
    p.add_argument("--lambda-snr", type=float, default=1.0)
    p.add_argument("--independent-eta", action="store_true", help="draw separate noise per branch")
    p.add_argument("--stochastic-level", action="store_true")
    p.add_argument("--artifact-x0-formula", choices=("standard", "as_printed"), default="standard")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d4pm", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write synthetic class pools and a mixed dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--sample-rate", type=float, default=DEFAULT_SAMPLE_RATE)
    p.add_argument("--clean-count", type=int, default=500)
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--snr-min", type=float, default=-5.0)
    p.add_argument("--snr-max", type=float, default=5.0)

    p = sub.add_parser("train", help="train the EEG and/or artifact branch")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branch", choices=("eeg", "artifact", "both"), default="both")
    p.add_argument("--no-class-label", action="store_true", help="drop the class embedding")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    _add_training(p)

    p = sub.add_parser("denoise", help="run the sampler over a dataset split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--checkpoint-eeg", required=True)
    p.add_argument("--checkpoint-artifact")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_sampling(p)

    p = sub.add_parser("evaluate", help="metrics of an estimate file against the clean split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--estimate", required=True, help="segment file (stem, .json or .f32)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="compare base, base+artifacts and full on one test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-eeg", help="full-method EEG checkpoint (trained if absent)")
    p.add_argument("--checkpoint-artifact", help="full-method artifact checkpoint (trained if absent)")
    _add_training(p)
    _add_sampling(p)

    p = sub.add_parser("oracle-check", help="validate the samplers against Gaussian closed forms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--out", help="optional JSON report path")
    _add_schedule(p)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        try:
            settings = read_config(known.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        subparser = sub.choices[command]
        actions = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, raw in settings.items():
            action = actions.get(key)
            if action is None:
                raise UsageError(f"config key {key!r} is not an option of {command}")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    defaults[key] = action.type(raw) if action.type else raw
                except ValueError as exc:
                    raise UsageError(f"config key {key}: {exc}") from exc
                if action.choices is not None and defaults[key] not in action.choices:
                    raise UsageError(f"config key {key}: {raw!r} not in {list(action.choices)}")
            action.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


# --- helpers ----------------------------------------------------------------


def _out_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"output directory {p} does not exist")
    return p


def _train_config(args, branch: Branch) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
                       T=args.steps, beta_start=args.beta_start, beta_end=args.beta_end, branch=branch)


def _net_config(args, n: int, use_label: bool = True) -> DenoiserConfig:
    return DenoiserConfig(n=n, channels=args.channels, encoder_blocks=args.encoder_blocks, heads=args.heads,
                          film_embed_dim=args.film_dim, use_class_label=use_label)


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(lambda_dc=args.lambda_dc, lambda_snr=args.lambda_snr, share_eta=not args.independent_eta,
                         stochastic_level=args.stochastic_level, artifact_x0_formula=args.artifact_x0_formula,
                         seed=args.seed)


def _write_trace(path, traces: dict[str, list[dict]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("branch", "epoch", "train_loss", "val_loss"))
        for branch, trace in traces.items():
            for e in trace:
                w.writerow([branch, e["epoch"], repr(e["train_loss"]), repr(e["val_loss"])])


def _train(ds, args, branch: Branch, out: Path, stem: str, use_label=True, resume=False):
    cfg = _train_config(args, branch)
    ckpt = out / stem
    state = None
    if resume:
        state, saved = load_checkpoint(ckpt, expect_branch=branch)
        if saved.seed != cfg.seed:
            raise UsageError(f"resume seed {cfg.seed} differs from checkpoint seed {saved.seed}")
    n = len(ds.train[0].mixture)
    state = train_branch(ds, cfg, net_cfg=_net_config(args, n, use_label), resume=state)
    save_checkpoint(ckpt, state, cfg)
    return state, cfg


# --- subcommands --------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = _out_dir(args.out)
    seeds = np.random.SeedSequence(args.seed).generate_state(5).tolist()
    clean = generate_synthetic(SignalClass.CLEAN, args.clean_count, args.n, seeds[0], args.sample_rate)
    pools = {c: generate_synthetic(c, args.per_class, args.n, seeds[i + 1], args.sample_rate)
             for i, c in enumerate(ARTIFACT_CLASSES)}
    save_segments(out / "clean", clean)
    for c, segs in pools.items():
        save_segments(out / c.value.lower(), segs)
    ds = build_mixed_dataset(clean, pools, (args.snr_min, args.snr_max), pairing_seed=seeds[4])
    save_dataset(out, ds)
    manifest = {"seed": args.seed, "generator_seeds": {"CLEAN": seeds[0], "EOG": seeds[1], "EMG": seeds[2],
                                                       "ECG": seeds[3]},
                "pairing_seed": seeds[4], "n": args.n, "sample_rate_hz": args.sample_rate,
                "snr_range_db": [args.snr_min, args.snr_max],
                "sizes": {k: len(v) for k, v in ds.parts().items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {sum(manifest['sizes'].values())} pairs "
          f"({manifest['sizes']['train']}/{manifest['sizes']['validation']}/{manifest['sizes']['test']}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.dataset)
    branches = [Branch.EEG, Branch.ARTIFACT] if args.branch == "both" else [Branch.parse(args.branch)]
    traces = {}
    for b in branches:
        state, _ = _train(ds, args, b, out, b.value.lower(), use_label=not args.no_class_label, resume=args.resume)
        traces[b.value] = state.trace
        print(f"{b.value}: best epoch {state.best_epoch}, validation L1 {state.best_val:.5f}")
    _write_trace(out / "loss_trace.csv", traces)
    return EXIT_OK


def _load_branch(path, branch: Branch):
    state, cfg = load_checkpoint(path, expect_branch=branch)
    return BranchDenoiser(best_network(state)), cfg


def cmd_denoise(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.dataset)
    items = ds.parts()[args.split]
    if not items:
        raise UsageError(f"split {args.split} is empty")
    eeg, cfg = _load_branch(args.checkpoint_eeg, Branch.EEG)
    art = None
    if args.variant != "base":
        if not args.checkpoint_artifact:
            raise UsageError(f"variant {args.variant} needs --checkpoint-artifact")
        art, _ = _load_branch(args.checkpoint_artifact, Branch.ARTIFACT)
    s = cfg.schedule()
    res = denoise(items, s, _sampler_config(args), eeg, art)
    fs = items[0].clean.sample_rate
    save_segments(out / "denoised", [Segment(v, e.label, fs) for v, e in zip(res.clean, items)],
                  extra={"variant": args.variant, "split": args.split})
    if res.artifact is not None:
        save_segments(out / "artifact_estimate", [Segment(v, e.label, fs) for v, e in zip(res.artifact, items)],
                      extra={"variant": args.variant, "split": args.split})
        write_residuals(out / "residuals.csv", res.residual_rows)
    print(f"denoised {len(items)} segments ({args.variant}) into {out}")
    return EXIT_OK


def evaluate_items(items, estimates) -> tuple[MetricsReport, MetricsReport]:
    clean = [e.clean.samples for e in items]
    labels = [e.label for e in items]
    return (MetricsReport.compute(estimates, clean, labels),
            MetricsReport.compute([e.mixture.samples for e in items], clean, labels))


def cmd_evaluate(args) -> int:
    out = _out_dir(args.out)
    items = load_dataset(args.dataset).parts()[args.split]
    est = load_segments(args.estimate)
    if len(est) != len(items):
        raise UsageError(f"estimate has {len(est)} segments, split {args.split} has {len(items)}")
    report, noisy = evaluate_items(items, [e.samples for e in est])
    report.write(out / "metrics.csv", out / "metrics.json")
    noisy.write(out / "noisy_metrics.csv", out / "noisy_metrics.json")
    agg, base = report.aggregate()["overall"], noisy.aggregate()["overall"]
    print(f"CC {agg['cc']['mean']:.4f} (noisy {base['cc']['mean']:.4f}), "
          f"SNR {agg['snr_out']['mean']:.3f} dB (noisy {base['snr_out']['mean']:.3f} dB)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.dataset)
    if not ds.test:
        raise UsageError("test split is empty")
    sampler_cfg = _sampler_config(args)
    s = make_schedule(args.steps, args.beta_start, args.beta_end)

    nets = {}
    for b in (Branch.EEG, Branch.ARTIFACT):
        state, _ = _train(ds, args, b, out, f"nolabel_{b.value.lower()}", use_label=False)
        nets[("nolabel", b)] = BranchDenoiser(best_network(state))
    for b, given in ((Branch.EEG, args.checkpoint_eeg), (Branch.ARTIFACT, args.checkpoint_artifact)):
        if given:
            nets[("full", b)], cfg = _load_branch(given, b)
            if cfg.schedule().to_dict() != s.to_dict():
                raise UsageError(f"checkpoint {given} uses schedule {cfg.schedule().to_dict()}")
        else:
            state, _ = _train(ds, args, b, out, f"full_{b.value.lower()}")
            nets[("full", b)] = BranchDenoiser(best_network(state))

    plan = {"base": (nets[("nolabel", Branch.EEG)], None),
            "base+artifacts": (nets[("nolabel", Branch.EEG)], nets[("nolabel", Branch.ARTIFACT)]),
            "full": (nets[("full", Branch.EEG)], nets[("full", Branch.ARTIFACT)])}
    reports = {}
    for variant, (eeg, art) in plan.items():
        res = denoise(ds.test, s, sampler_cfg, eeg, art)
        reports[variant], _ = evaluate_items(ds.test, res.clean)
        reports[variant].write(out / f"metrics_{variant}.csv", out / f"metrics_{variant}.json")
    rows = ablation_table(reports)
    write_ablation(out / "ablation.csv", rows)
    for r in rows:
        print(f"{r['artifact']:>4} {r['metric']:>8} " + " ".join(f"{r[v]:9.4f}" for v in VARIANTS))
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    results = run_oracle_checks(n=args.n, T=args.steps, runs=args.runs, seed=args.seed,
                                beta_start=args.beta_start, beta_end=args.beta_end)
    for r in results:
        zs = " ".join(f"{z:+.2f}" for z in np.ravel(r.z_scores))
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max|z|={r.max_abs_z:.3f} {r.detail}" + (f" z=[{zs}]" if zs else ""))
    if args.out:
        Path(args.out).write_text(json.dumps(
            [{"name": r.name, "passed": r.passed, "z_scores": np.ravel(r.z_scores).tolist(), "detail": r.detail}
             for r in results], indent=1) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "denoise": cmd_denoise,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "oracle-check": cmd_oracle_check}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get("D4PM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return COMMANDS[args.command](args)
    except (OSError, SegmentFileError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
