"""Central finite-difference check of the denoiser's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import Denoiser, batch_loss, loss_and_grad


@dataclass
class GradSample:
    name: str
    index: tuple
    analytic: float
    numeric: float

    def error(self, abs_floor: float = 1e-6) -> float:
        """Relative error with an absolute floor on the denominator."""
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), abs_floor)


def check_gradients(net: Denoiser, batch, n_params: int, rng: np.random.Generator, h: float = 1e-4) -> list[GradSample]:
    """Compare autograd against (L(p+h) - L(p-h)) / 2h for ``n_params`` scalars.

    Scalars are drawn so every tensor is represented before any repeats.
    Run on a float64 network; weights are restored after each probe.
    """
    _, grads = loss_and_grad(net, batch)
    params = dict(net.named_parameters())
    names = list(params)
    if n_params >= len(names):
        picks = names + [names[i] for i in rng.integers(0, len(names), n_params - len(names))]
    else:
        picks = [names[i] for i in rng.permutation(len(names))[:n_params]]
    out = []
    for name in picks:
        p = params[name]
        idx = tuple(int(rng.integers(0, d)) for d in p.shape)
        orig = p[idx].item()
        with torch.no_grad():
            p[idx] = orig + h
        up = batch_loss(net, batch)
        with torch.no_grad():
            p[idx] = orig - h
        down = batch_loss(net, batch)
        with torch.no_grad():
            p[idx] = orig
        out.append(GradSample(name, idx, float(grads[name][idx]), (up - down) / (2 * h)))
    return out
