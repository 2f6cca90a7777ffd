"""Dual-path conditional ε-prediction network with shared Dual-FiLM modulation.

Path A reads the diffused signal x_t, path B the noisy observation y. Both
paths run a short conv stack and ``encoder_blocks`` pre-norm transformer
blocks; a shared FiLM trunk embeds the continuous noise level and the artifact
class and emits one (γ, ξ) pair per modulation site. The two paths are fused
by channel concatenation and a 1x1 conv, then projected back to one channel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .signals import ARTIFACT_CLASSES, SignalClass

CLASS_INDEX = {c: i for i, c in enumerate(ARTIFACT_CLASSES)}


@dataclass(frozen=True)
class DenoiserConfig:
    n: int = 64
    channels: int = 32
    encoder_blocks: int = 3
    heads: int = 4
    film_embed_dim: int = 32
    n_classes: int = 3
    use_class_label: bool = True
    kernel_size: int = 5

    def __post_init__(self):
        if self.n < 1 or self.channels < 1 or self.heads < 1 or self.film_embed_dim < 2:
            raise ValueError(f"invalid denoiser config {self}")
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.encoder_blocks < 1:
            raise ValueError("encoder_blocks must be >= 1")
        if self.film_embed_dim % 2:
            raise ValueError("film_embed_dim must be even")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def n_sites(self) -> int:
        return 2 * (self.encoder_blocks + 1)

    def to_dict(self) -> dict:
        return asdict(self)


def class_index(z) -> int:
    z = SignalClass.parse(z)
    if z not in CLASS_INDEX:
        raise ValueError(f"{z.value} is not an artifact class")
    return CLASS_INDEX[z]


def level_embedding(level: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Sinusoidal embedding of the continuous noise level, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=level.dtype) / half)
    arg = scale * level[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class EncoderBlock(nn.Module):
    """Pre-norm multi-head self-attention + feed-forward (width 2C), on (B, C, N)."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.ff1 = nn.Linear(channels, 2 * channels)
        self.ff2 = nn.Linear(2 * channels, channels)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        x = h.transpose(1, 2)  # (B, N, C)
        b, n, c = x.shape
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        split = lambda u: u.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        q, k, v = split(q), split(k), split(v)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c // self.heads), dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(b, n, c))
        x = x + self.ff2(F.silu(self.ff1(self.norm2(x))))
        return x.transpose(1, 2)


class Path(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        c, k = cfg.channels, cfg.kernel_size
        self.conv1 = nn.Conv1d(1, c, k, padding=k // 2)
        self.conv2 = nn.Conv1d(c, c, k, padding=k // 2)
        self.pos_bias = nn.Parameter(torch.zeros(cfg.n))
        self.blocks = nn.ModuleList(EncoderBlock(c, cfg.heads) for _ in range(cfg.encoder_blocks))

    def forward(self, x: torch.Tensor, films) -> torch.Tensor:
        h = F.silu(self.conv2(F.silu(self.conv1(x[:, None, :]))))
        h = h + self.pos_bias
        gamma, xi = films[0]
        h = gamma[:, :, None] * h + xi[:, :, None]
        for block, (gamma, xi) in zip(self.blocks, films[1:]):
            h = block(h)
            h = gamma[:, :, None] * h + xi[:, :, None]
        return h


class DualFiLM(nn.Module):
    """Shared trunk: level embedding MLP plus class embedding, per-site (γ, ξ) heads.

    Heads start at zero so γ = 1 and ξ = 0 until training moves them.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.film_embed_dim
        self.dim = d
        self.use_class_label = cfg.use_class_label
        self.mlp1 = nn.Linear(d, d)
        self.mlp2 = nn.Linear(d, d)
        self.class_embed = nn.Embedding(cfg.n_classes, d)
        self.heads = nn.ModuleList(nn.Linear(d, 2 * cfg.channels) for _ in range(cfg.n_sites))
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, level: torch.Tensor, z: torch.Tensor):
        e = self.mlp2(F.silu(self.mlp1(level_embedding(level, self.dim))))
        if self.use_class_label:
            e = e + self.class_embed(z)
        e = F.silu(e)
        out = []
        for head in self.heads:
            d_gamma, xi = head(e).chunk(2, dim=-1)
            out.append((1.0 + d_gamma, xi))
        return out


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c, k = cfg.channels, cfg.kernel_size
        self.film = DualFiLM(cfg)
        self.path_a = Path(cfg)
        self.path_b = Path(cfg)
        self.fuse = nn.Conv1d(2 * c, c, 1)
        self.out = nn.Conv1d(c, 1, k, padding=k // 2)

    def forward(self, x_t: torch.Tensor, y: torch.Tensor, level: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """x_t, y: (B, N); level: (B,); z: (B,) class indices. Returns ε̂ (B, N)."""
        if x_t.shape != y.shape or x_t.shape[-1] != self.cfg.n:
            raise ValueError(f"expected x_t and y of length {self.cfg.n}, got {tuple(x_t.shape)} and {tuple(y.shape)}")
        films = self.film(level, z)
        e = self.cfg.encoder_blocks + 1
        ha = self.path_a(x_t, films[:e])
        hb = self.path_b(y, films[e:])
        h = F.silu(self.fuse(torch.cat([ha, hb], dim=1)))
        return self.out(h)[:, 0, :]


def init_params(cfg: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Fresh network with fan-in scaled uniform weights; deterministic in ``seed``."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = Denoiser(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def _as_batch(x, dtype) -> torch.Tensor:
    t = torch.tensor(np.asarray(x), dtype=dtype)
    return t[None] if t.ndim == 1 else t


def _levels(level, batch: int, dtype) -> torch.Tensor:
    value = getattr(level, "value", level)
    t = torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=dtype).reshape(-1)
    return t.expand(batch) if t.numel() == 1 else t


def _classes(z, batch: int) -> torch.Tensor:
    if isinstance(z, (str, SignalClass)):
        return torch.full((batch,), class_index(z), dtype=torch.long)
    zs = [class_index(v) for v in z]
    return torch.tensor(zs, dtype=torch.long)


def film(net: Denoiser, level, z) -> list[tuple[np.ndarray, np.ndarray]]:
    """(γ, ξ) per modulation site for one (level, class) pair."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net.film(_levels(level, 1, dtype), _classes(z, 1))
    return [(g[0].numpy().copy(), x[0].numpy().copy()) for g, x in out]


def forward(net: Denoiser, x_t, y, level, z) -> np.ndarray:
    """Numpy-in / numpy-out evaluation; accepts one segment or a (B, N) batch."""
    dtype = next(net.parameters()).dtype
    xt, yy = _as_batch(x_t, dtype), _as_batch(y, dtype)
    if xt.shape != yy.shape:
        raise ValueError(f"length mismatch: x_t {tuple(xt.shape)} vs y {tuple(yy.shape)}")
    if not (torch.isfinite(xt).all() and torch.isfinite(yy).all()):
        raise ValueError("non-finite denoiser input")
    b = xt.shape[0]
    with torch.no_grad():
        out = net(xt, yy, _levels(level, b, dtype), _classes(z, b))
    out = out.double().numpy()
    return out[0] if np.ndim(x_t) == 1 else out


def l1_loss(net: Denoiser, x_t, y, level, z, eps_target) -> torch.Tensor:
    """Mean absolute ε error over batch and samples (differentiable)."""
    return (eps_target - net(x_t, y, level, z)).abs().mean()


def _stack_batch(net: Denoiser, batch):
    if len(batch) == 0:
        raise ValueError("empty batch")
    dtype = next(net.parameters()).dtype
    x_t = torch.stack([torch.as_tensor(np.asarray(b[0]), dtype=dtype) for b in batch])
    y = torch.stack([torch.as_tensor(np.asarray(b[1]), dtype=dtype) for b in batch])
    level = torch.cat([_levels(b[2], 1, dtype) for b in batch])
    z = _classes([b[3] for b in batch], len(batch))
    eps = torch.stack([torch.as_tensor(np.asarray(b[4]), dtype=dtype) for b in batch])
    return x_t, y, level, z, eps


def batch_loss(net: Denoiser, batch) -> float:
    """L1 loss of a list of ``(x_t, y, level, z, eps_target)`` items, no gradients."""
    with torch.no_grad():
        return float(l1_loss(net, *_stack_batch(net, batch)))


def loss_and_grad(net: Denoiser, batch) -> tuple[float, dict[str, np.ndarray]]:
    """L1 loss and exact parameter gradients for a list of
    ``(x_t, y, level, z, eps_target)`` items, keyed like ``state_dict``."""
    tensors = _stack_batch(net, batch)
    net.zero_grad(set_to_none=True)
    loss = l1_loss(net, *tensors)
    loss.backward()
    grads = {name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
             for name, p in net.named_parameters()}
    net.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


class BranchDenoiser:
    """Adapter letting the sampler call a trained network on numpy arrays."""

    def __init__(self, net: Denoiser):
        self.net = net.eval()

    def __call__(self, x_t: np.ndarray, y: np.ndarray, level, z) -> np.ndarray:
        return forward(self.net, x_t, y, level, z)
