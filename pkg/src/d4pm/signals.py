"""Segments, SNR-controlled mixing, synthetic generators and dataset files.

The on-disk segment format is a JSON header next to a little-endian float32
blob holding ``n_segments * length`` samples, segments concatenated.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1
DEFAULT_SAMPLE_RATE = 64.0
MIN_LENGTH = 8


class SignalClass(str, enum.Enum):
    CLEAN = "CLEAN"
    EOG = "EOG"
    EMG = "EMG"
    ECG = "ECG"

    @classmethod
    def parse(cls, value: "SignalClass | str") -> "SignalClass":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown signal class {value!r}") from None


ARTIFACT_CLASSES = (SignalClass.EOG, SignalClass.EMG, SignalClass.ECG)


class SegmentFileError(ValueError):
    """Raised for malformed, truncated or non-finite segment files."""


@dataclass(frozen=True)
class Segment:
    samples: np.ndarray
    class_label: SignalClass
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size < MIN_LENGTH:
            raise ValueError(f"segment must be 1-D with at least {MIN_LENGTH} samples")
        if not np.all(np.isfinite(arr)):
            raise ValueError("segment contains non-finite samples")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "class_label", SignalClass.parse(self.class_label))

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class MixedExample:
    clean: Segment
    artifact: Segment
    lambda_snr: float
    mixture: Segment
    target_snr_db: float

    @property
    def label(self) -> SignalClass:
        return self.artifact.class_label

    @property
    def scaled_artifact(self) -> np.ndarray:
        """The artifact's contribution to the mixture, λ_SNR · x'."""
        return self.lambda_snr * self.artifact.samples


@dataclass
class DatasetSplit:
    train: list[MixedExample]
    validation: list[MixedExample]
    test: list[MixedExample]
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    meta: dict = field(default_factory=dict)

    def parts(self) -> dict[str, list[MixedExample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def snr_db(x: np.ndarray, scaled_artifact: np.ndarray) -> float:
    """10·log10(‖x‖² / ‖λx'‖²)."""
    return float(10.0 * np.log10(np.sum(np.square(x)) / np.sum(np.square(scaled_artifact))))


def lambda_for_snr(x: Segment, xp: Segment, snr_db: float) -> float:
    nx = np.linalg.norm(x.samples)
    nxp = np.linalg.norm(xp.samples)
    if nx == 0.0 or nxp == 0.0:
        raise ValueError("cannot scale for SNR with a zero-energy signal")
    return float(nx / nxp * 10.0 ** (-snr_db / 20.0))


def mix(x: Segment, xp: Segment, lambda_snr: float) -> MixedExample:
    if len(x) != len(xp):
        raise ValueError(f"length mismatch: clean {len(x)} vs artifact {len(xp)}")
    if not lambda_snr > 0:
        raise ValueError(f"lambda_snr must be positive, got {lambda_snr}")
    scaled = lambda_snr * xp.samples
    y = x.samples + scaled
    mixture = Segment(y, xp.class_label, x.sample_rate)
    return MixedExample(x, xp, float(lambda_snr), mixture, snr_db(x.samples, scaled))


# --- synthetic generators -------------------------------------------------


def _unit_rms(v: np.ndarray) -> np.ndarray:
    v = v - v.mean()
    rms = np.sqrt(np.mean(v * v))
    out = v / rms if rms > 0 else v
    # Round to the float32 payload so in-memory data equals what is stored.
    return out.astype(np.float32).astype(np.float64)


def _shaped_noise(rng, n, fs, lo, hi, exponent=0.0):
    """Gaussian noise with power ∝ f^-exponent restricted to [lo, hi] Hz."""
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spec = rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size)
    mask = (freqs >= lo) & (freqs <= hi)
    amp = np.zeros_like(freqs)
    amp[mask] = np.maximum(freqs[mask], 1.0) ** (-exponent / 2.0)
    return np.fft.irfft(spec * amp, n)


def _clean(rng, n, fs):
    t = np.arange(n) / fs
    k = rng.integers(3, 7)
    f = rng.uniform(1.0, 30.0, size=k)
    a = rng.uniform(0.5, 1.5, size=k) / np.sqrt(f)
    ph = rng.uniform(0, 2 * np.pi, size=k)
    sines = (a[:, None] * np.sin(2 * np.pi * f[:, None] * t + ph[:, None])).sum(0)
    pink = _shaped_noise(rng, n, fs, 1.0, 30.0, exponent=1.0)
    pink *= 0.3 * np.std(sines) / (np.std(pink) + 1e-12)
    return sines + pink


def _eog(rng, n, fs):
    t = np.arange(n) / fs
    dur = n / fs
    out = np.zeros(n)
    for _ in range(rng.integers(1, 4)):
        c = rng.uniform(0.2 * dur, 0.8 * dur)
        w = rng.uniform(0.15, 0.35)
        out += rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5) * np.exp(-0.5 * ((t - c) / w) ** 2)
    out += 0.3 * _shaped_noise(rng, n, fs, 0.0, 1.0) * np.sqrt(n)
    # Remove the endpoint ramp so the segment has no wrap-around step.
    return out - np.linspace(out[0], out[-1], n)


def _emg(rng, n, fs):
    hi = fs / 2.0
    noise = _shaped_noise(rng, n, fs, 20.0, hi)
    gate = np.zeros(n)
    for _ in range(rng.integers(1, 4)):
        start = rng.integers(0, n)
        length = rng.integers(max(2, n // 8), max(3, n // 2))
        gate[start:start + length] = 1.0
    # Soft edges keep the gated bursts from leaking energy below 20 Hz.
    win = max(3, int(fs * 0.05)) | 1
    kernel = np.hanning(win + 2)[1:-1]
    gate = np.convolve(gate, kernel / kernel.sum(), mode="same")
    return noise * (0.1 + gate)


ECG_PERIOD_S = 0.8
ECG_JITTER = 0.05


def ecg_template(fs: float) -> np.ndarray:
    """P-QRS-T shaped beat sampled at ``fs``, peak at index ``len // 2``."""
    half = int(round(0.3 * fs))
    t = np.arange(-half, half + 1) / fs
    g = lambda mu, sd, a: a * np.exp(-0.5 * ((t - mu) / sd) ** 2)
    return g(-0.16, 0.025, 0.15) + g(-0.025, 0.01, -0.15) + g(0.0, 0.012, 1.0) \
        + g(0.025, 0.01, -0.25) + g(0.2, 0.04, 0.3)


def _ecg(rng, n, fs):
    tmpl = ecg_template(fs)
    half = tmpl.size // 2
    out = np.zeros(n + 2 * tmpl.size)
    period = ECG_PERIOD_S * fs
    pos = rng.uniform(0, period)
    while pos < n + tmpl.size:
        i = int(round(pos)) + half
        out[i - half:i + half + 1] += tmpl
        pos += period * (1.0 + rng.uniform(-ECG_JITTER, ECG_JITTER))
    return out[tmpl.size:tmpl.size + n]


_GENERATORS = {SignalClass.CLEAN: _clean, SignalClass.EOG: _eog,
               SignalClass.EMG: _emg, SignalClass.ECG: _ecg}


def generate_synthetic(cls, count: int, n: int, seed, sample_rate: float = DEFAULT_SAMPLE_RATE) -> list[Segment]:
    """Generate ``count`` unit-RMS segments of one class.

    Each segment draws from its own child generator so a segment does not
    depend on how many were requested before it.
    """
    cls = SignalClass.parse(cls)
    if count < 1:
        raise ValueError("count must be >= 1")
    if n < MIN_LENGTH:
        raise ValueError(f"n must be >= {MIN_LENGTH}")
    gen = _GENERATORS[cls]
    children = np.random.SeedSequence(seed).spawn(count)
    return [Segment(_unit_rms(gen(np.random.default_rng(c), n, sample_rate)), cls, sample_rate)
            for c in children]


# --- dataset construction ---------------------------------------------------


def split_sizes(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer split sizes by the largest-remainder rule."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("split fractions must be non-negative and sum to 1")
    raw = fr * total
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[: total - sizes.sum()]] += 1
    return sizes.tolist()


def build_mixed_dataset(clean: Sequence[Segment], artifacts_by_class: Mapping, snr_range_db=(-5.0, 5.0),
                        pairing_seed=0, fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Pair artifacts with clean segments, mix at random SNRs and split.

    Clean segments are drawn without replacement for EOG and ECG; EMG pairs
    reuse segments from the whole clean pool.
    """
    lo, hi = (float(v) for v in snr_range_db)
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ValueError(f"invalid SNR range {snr_range_db}")
    if not clean:
        raise ValueError("clean pool is empty")
    pools = {SignalClass.parse(k): list(v) for k, v in artifacts_by_class.items()}
    if not pools or any(not v for v in pools.values()):
        raise ValueError("artifact pools must be nonempty")
    n_exclusive = sum(len(v) for k, v in pools.items() if k != SignalClass.EMG)
    if n_exclusive > len(clean):
        raise ValueError(f"{n_exclusive} non-EMG artifacts need as many clean segments, have {len(clean)}")

    rng = np.random.default_rng(pairing_seed)
    free = rng.permutation(len(clean)).tolist()
    pairs = []
    for cls in ARTIFACT_CLASSES:
        for j, art in enumerate(pools.get(cls, [])):
            ci = int(rng.integers(len(clean))) if cls == SignalClass.EMG else free.pop()
            target = float(rng.uniform(lo, hi))
            ex = mix(clean[ci], art, lambda_for_snr(clean[ci], art, target))
            pairs.append((ex, {"class": cls.value, "artifact_index": j, "clean_index": ci,
                               "snr_db": target, "lambda_snr": ex.lambda_snr}))
    order = rng.permutation(len(pairs))
    n_train, n_val, _ = split_sizes(len(pairs), fractions)
    idx = {"train": order[:n_train], "validation": order[n_train:n_train + n_val],
           "test": order[n_train + n_val:]}
    parts = {k: [pairs[i][0] for i in v] for k, v in idx.items()}
    meta = {k: [pairs[i][1] for i in v] for k, v in idx.items()}
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], tuple(fractions), meta)


# --- file I/O ---------------------------------------------------------------


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".f32"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".f32")


def save_segments(path, segments: Sequence[Segment], extra: dict | None = None) -> Path:
    """Write ``<stem>.json`` + ``<stem>.f32``; returns the header path.

    Per-segment class labels go in the ``labels`` header field when the
    segments are not all of one class.
    """
    header_path, blob_path = _paths(path)
    n = len(segments[0]) if segments else 0
    if any(len(s) != n for s in segments):
        raise ValueError("all segments in a file must share one length")
    labels = [s.class_label.value for s in segments]
    kinds = sorted(set(labels))
    header = {
        "version": FORMAT_VERSION,
        "n_segments": len(segments),
        "length": n,
        "sample_rate_hz": float(segments[0].sample_rate) if segments else DEFAULT_SAMPLE_RATE,
        "class": kinds[0] if len(kinds) == 1 else "MIXED",
    }
    if len(kinds) > 1:
        header["labels"] = labels
    if extra:
        header.update(extra)
    data = np.stack([s.samples for s in segments]).astype("<f4") if segments else np.zeros(0, "<f4")
    blob_path.write_bytes(data.tobytes())
    header_path.write_text(json.dumps(header, indent=1) + "\n")
    return header_path


def read_header(path) -> dict:
    header_path, _ = _paths(path)
    try:
        header = json.loads(header_path.read_text())
        int(header["n_segments"]), int(header["length"]), float(header["sample_rate_hz"]), header["class"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SegmentFileError(f"malformed header {header_path}: {exc}") from exc
    if header.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise SegmentFileError(f"unsupported format version {header['version']}")
    return header


def load_array(path) -> tuple[np.ndarray, dict]:
    """Raw (n_segments, length) float32 payload plus header."""
    header = read_header(path)
    _, blob_path = _paths(path)
    n_seg, length = int(header["n_segments"]), int(header["length"])
    raw = blob_path.read_bytes() if blob_path.exists() else b""
    expected = n_seg * length * 4
    if len(raw) != expected:
        raise SegmentFileError(f"{blob_path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(n_seg, length)
    if not np.all(np.isfinite(arr)):
        raise SegmentFileError(f"{blob_path}: non-finite samples")
    return arr, header


def load_segments(path) -> list[Segment]:
    arr, header = load_array(path)
    if arr.shape[0] == 0:
        return []
    labels = header.get("labels") or [header["class"]] * arr.shape[0]
    if len(labels) != arr.shape[0]:
        raise SegmentFileError("labels length does not match n_segments")
    fs = float(header["sample_rate_hz"])
    try:
        return [Segment(row.astype(np.float64), lab, fs) for row, lab in zip(arr, labels)]
    except ValueError as exc:
        raise SegmentFileError(str(exc)) from exc


def save_dataset(directory, ds: DatasetSplit) -> None:
    """One clean/artifact/mixture file triple per split plus ``dataset.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, items in ds.parts().items():
        save_segments(d / f"{name}_clean", [e.clean for e in items])
        save_segments(d / f"{name}_artifact", [e.artifact for e in items])
        save_segments(d / f"{name}_mixture", [e.mixture for e in items])
    manifest = {"version": FORMAT_VERSION, "fractions": list(ds.fractions), "pairs": ds.meta,
                "sizes": {k: len(v) for k, v in ds.parts().items()}}
    (d / "dataset.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(directory) -> DatasetSplit:
    """Inverse of :func:`save_dataset`.

    Mixtures are rebuilt from the stored clean/artifact payload and the
    exact λ_SNR in the manifest; the stored mixture file must agree with
    that to float32 precision.
    """
    d = Path(directory)
    try:
        manifest = json.loads((d / "dataset.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SegmentFileError(f"cannot read dataset manifest in {d}: {exc}") from exc
    parts = {}
    for name in ("train", "validation", "test"):
        meta = manifest["pairs"][name]
        clean = load_segments(d / f"{name}_clean")
        art = load_segments(d / f"{name}_artifact")
        stored, _ = load_array(d / f"{name}_mixture")
        if not (len(clean) == len(art) == len(meta) == stored.shape[0]):
            raise SegmentFileError(f"{name}: inconsistent segment counts")
        items = [mix(c, a, float(m["lambda_snr"])) for c, a, m in zip(clean, art, meta)]
        if items:
            rebuilt = np.stack([e.mixture.samples for e in items]).astype("<f4")
            if not np.array_equal(rebuilt, stored):
                raise SegmentFileError(f"{name}: mixture file disagrees with clean + lambda * artifact")
        parts[name] = items
    return DatasetSplit(parts["train"], parts["validation"], parts["test"],
                        tuple(manifest["fractions"]), manifest["pairs"])
