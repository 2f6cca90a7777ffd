"""Training of one branch denoiser and the checkpoint file format.

A checkpoint is ``<stem>.json`` (manifest) plus ``<stem>.bin`` holding
little-endian float32 tensors back to back; the manifest lists each tensor's
name, shape and element offset. Tensors prefixed ``resume.`` carry the last
weights and Adam moments so training can continue exactly.
"""

from __future__ import annotations

import copy
import enum
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .denoiser import CLASS_INDEX, Denoiser, DenoiserConfig, init_params, l1_loss
from .schedule import NoiseSchedule, make_schedule, sample_continuous_level, sample_continuous_levels
from .signals import DatasetSplit, MixedExample, Segment

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_VALIDATION_STREAM = 1_000_003


class Branch(str, enum.Enum):
    EEG = "EEG"
    ARTIFACT = "ARTIFACT"

    @classmethod
    def parse(cls, v) -> "Branch":
        if isinstance(v, cls):
            return v
        try:
            return cls(str(v).upper())
        except ValueError:
            raise ValueError(f"unknown branch {v!r}") from None


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2
    branch: Branch = Branch.EEG
    # Perturb with the continuous level instead of the discrete ᾱ_t.
    perturb_with_level: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branch", Branch.parse(self.branch))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.eps <= 0:
            raise ValueError(f"invalid training hyperparameters in {self}")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("adam betas must lie in [0, 1)")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch"] = self.branch.value
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: (tuple(v) if k == "betas" else v) for k, v in d.items()})


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    net: Denoiser
    best_state: dict
    optimizer_state: dict | None
    epoch: int
    best_val: float
    best_epoch: int
    trace: list[dict] = field(default_factory=list)


def make_training_example(x0: Segment | np.ndarray, y: Segment | np.ndarray, z, s: NoiseSchedule,
                          rng: np.random.Generator, eps: np.ndarray | None = None, t: int | None = None):
    """One diffused sample: returns ``(x_t, eps_target, level, z)``.

    ``eps`` and ``t`` override the random draws (test hooks).
    """
    x0 = np.asarray(getattr(x0, "samples", x0), dtype=np.float64)
    y = np.asarray(getattr(y, "samples", y), dtype=np.float64)
    if x0.shape != y.shape:
        raise ValueError("x0 and y must share a length")
    t = int(rng.integers(1, s.T + 1)) if t is None else t
    level = sample_continuous_level(s, t, rng)
    eps = rng.standard_normal(x0.shape) if eps is None else np.asarray(eps, dtype=np.float64)
    ab = s.alpha_bar_at(t)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return x_t, eps, level, z


def branch_target(ex: MixedExample, branch: Branch) -> np.ndarray:
    """Regression source: clean x for EEG, the scaled artifact λx' for ARTIFACT."""
    return ex.clean.samples if branch == Branch.EEG else ex.scaled_artifact


def _arrays(items: list[MixedExample], branch: Branch):
    x0 = np.stack([branch_target(e, branch) for e in items])
    y = np.stack([e.mixture.samples for e in items])
    z = np.array([CLASS_INDEX[e.label] for e in items], dtype=np.int64)
    return x0, y, z


def _diffuse(x0, s: NoiseSchedule, rng, perturb_with_level: bool):
    """Vectorized forward noising of a (B, N) batch."""
    b = x0.shape[0]
    t = rng.integers(1, s.T + 1, size=b)
    level = sample_continuous_levels(s, t, rng)
    eps = rng.standard_normal(x0.shape)
    scale = level if perturb_with_level else np.sqrt(s.alpha_bar[t - 1])
    x_t = scale[:, None] * x0 + np.sqrt(1.0 - scale ** 2)[:, None] * eps
    return x_t, eps, level


def _tensors(*arrays):
    return [torch.as_tensor(a, dtype=torch.float32) if a.dtype != np.int64 else torch.as_tensor(a)
            for a in arrays]


def evaluate_loss(net: Denoiser, arrays, s: NoiseSchedule, rng, batch_size: int,
                  perturb_with_level: bool = False) -> float:
    """Mean L1 ε error over a whole split for one draw of (t, ε)."""
    x0, y, z = arrays
    x_t, eps, level = _diffuse(x0, s, rng, perturb_with_level)
    total = 0.0
    with torch.no_grad():
        for i in range(0, x0.shape[0], batch_size):
            sl = slice(i, i + batch_size)
            xt_, y_, lv_, z_, e_ = _tensors(x_t[sl], y[sl], level[sl], z[sl], eps[sl])
            total += float(l1_loss(net, xt_, y_, lv_, z_, e_)) * xt_.shape[0]
    return total / x0.shape[0]


def _optimizer(net: Denoiser, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)


def train_branch(dataset: DatasetSplit, cfg: TrainConfig, s: NoiseSchedule | None = None,
                 net_cfg: DenoiserConfig | None = None, resume: TrainState | None = None) -> TrainState:
    """Fit one branch; the returned state's ``best_state`` is the best-validation weights.

    Every epoch redraws (t, ε, level) from a generator seeded by
    ``(seed, epoch)``, so a resumed run continues exactly where a
    straight run would be.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    s = cfg.schedule() if s is None else s
    branch = cfg.branch
    train = _arrays(dataset.train, branch)
    val_items = dataset.validation or dataset.train
    val = _arrays(val_items, branch)
    n_train = train[0].shape[0]

    if resume is None:
        net_cfg = net_cfg or DenoiserConfig(n=train[0].shape[1])
        net = init_params(net_cfg, cfg.seed)
        opt = _optimizer(net, cfg)
        val0 = evaluate_loss(net, val, s, np.random.default_rng([cfg.seed, _VALIDATION_STREAM]),
                             cfg.batch_size, cfg.perturb_with_level)
        tr0 = evaluate_loss(net, train, s, np.random.default_rng([cfg.seed, 0]), cfg.batch_size,
                            cfg.perturb_with_level)
        state = TrainState(net, copy.deepcopy(net.state_dict()), None, 0, val0, 0,
                           [{"epoch": 0, "train_loss": tr0, "val_loss": val0}])
    else:
        state = resume
        net = state.net
        opt = _optimizer(net, cfg)
        if state.optimizer_state is not None:
            opt.load_state_dict(state.optimizer_state)
    if net.cfg.n != train[0].shape[1]:
        raise ValueError(f"network length {net.cfg.n} does not match data length {train[0].shape[1]}")

    net.train()
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n_train)
        x_t, eps, level = _diffuse(train[0][order], s, rng, cfg.perturb_with_level)
        y, z = train[1][order], train[2][order]
        losses = []
        for i in range(0, n_train, cfg.batch_size):
            sl = slice(i, i + cfg.batch_size)
            xt_, y_, lv_, z_, e_ = _tensors(x_t[sl], y[sl], level[sl], z[sl], eps[sl])
            loss = l1_loss(net, xt_, y_, lv_, z_, e_)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"{branch.value} branch: non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()) * xt_.shape[0])
        train_loss = sum(losses) / n_train
        val_loss = evaluate_loss(net, val, s, np.random.default_rng([cfg.seed, _VALIDATION_STREAM]),
                                 cfg.batch_size, cfg.perturb_with_level)
        state.trace.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < state.best_val:
            state.best_val, state.best_epoch = val_loss, epoch
            state.best_state = copy.deepcopy(net.state_dict())
        state.epoch = epoch
        log.info("%s epoch %d train %.4f val %.4f", branch.value, epoch, train_loss, val_loss)
    net.eval()
    state.optimizer_state = copy.deepcopy(opt.state_dict())
    return state


def best_network(state: TrainState) -> Denoiser:
    net = copy.deepcopy(state.net)
    net.load_state_dict(state.best_state)
    return net.eval()


# --- checkpoint I/O ---------------------------------------------------------


def _ckpt_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> Path:
    """Write manifest + tensor blob; returns the manifest path."""
    manifest_path, blob_path = _ckpt_paths(path)
    tensors: list[tuple[str, torch.Tensor]] = [(f"model.{k}", v) for k, v in state.best_state.items()]
    tensors += [(f"resume.model.{k}", v) for k, v in state.net.state_dict().items()]
    steps = {}
    if state.optimizer_state is not None:
        names = [n for n, _ in state.net.named_parameters()]
        for idx, st in state.optimizer_state["state"].items():
            name = names[idx]
            tensors.append((f"resume.adam.exp_avg.{name}", st["exp_avg"]))
            tensors.append((f"resume.adam.exp_avg_sq.{name}", st["exp_avg_sq"]))
            steps[name] = float(st["step"])
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "branch": cfg.branch.value,
        "train_config": cfg.to_dict(),
        "denoiser_config": state.net.cfg.to_dict(),
        "schedule": {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val": state.best_val,
        "adam_steps": steps,
        "loss_trace": state.trace,
        "tensors": entries,
        "n_floats": offset,
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


def load_checkpoint(path, expect_branch: Branch | str | None = None) -> tuple[TrainState, TrainConfig]:
    manifest_path, blob_path = _ckpt_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    if expect_branch is not None and manifest["branch"] != Branch.parse(expect_branch).value:
        raise CheckpointError(f"checkpoint branch {manifest['branch']} where {Branch.parse(expect_branch).value} expected")
    raw = blob_path.read_bytes() if blob_path.exists() else b""
    expected = int(manifest["n_floats"]) * 4
    if len(raw) != expected:
        raise CheckpointError(f"{blob_path}: expected {expected} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4")
    tensors = {}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        tensors[e["name"]] = torch.from_numpy(flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy())

    cfg = TrainConfig.from_dict(manifest["train_config"])
    net_cfg = DenoiserConfig(**manifest["denoiser_config"])
    net = Denoiser(net_cfg)

    def extract(prefix):
        out = {}
        for k, ref in net.state_dict().items():
            key = prefix + k
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key}")
            if tuple(tensors[key].shape) != tuple(ref.shape):
                raise CheckpointError(f"tensor {key}: shape {tuple(tensors[key].shape)} vs expected {tuple(ref.shape)}")
            out[k] = tensors[key]
        return out

    best = extract("model.")
    has_resume = any(k.startswith("resume.model.") for k in tensors)
    net.load_state_dict(extract("resume.model.") if has_resume else best)
    opt_state = None
    if manifest.get("adam_steps"):
        opt = _optimizer(net, cfg)
        sd = opt.state_dict()
        names = [n for n, _ in net.named_parameters()]
        sd["state"] = {
            i: {"step": torch.tensor(manifest["adam_steps"][n]),
                "exp_avg": tensors[f"resume.adam.exp_avg.{n}"],
                "exp_avg_sq": tensors[f"resume.adam.exp_avg_sq.{n}"]}
            for i, n in enumerate(names) if n in manifest["adam_steps"]
        }
        opt_state = sd
    state = TrainState(net.eval(), best, opt_state, int(manifest["epoch"]), float(manifest["best_val"]),
                       int(manifest["best_epoch"]), list(manifest["loss_trace"]))
    return state, cfg
