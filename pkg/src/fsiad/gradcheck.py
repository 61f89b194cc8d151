"""Central finite-difference gradient comparison in 64-bit."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

STEP = 1e-5


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], n_probe: int = 10,
                    rng: np.random.Generator | None = None, step: float = STEP):
    """Compare autograd against central differences on ``n_probe`` random coordinates per tensor.

    ``fn`` must return a scalar and read the current values of ``tensors``
    (which must be float64 leaves with ``requires_grad``). Returns the worst
    relative error and a list of (tensor index, flat index, analytic, numeric).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        if t.dtype != torch.float64:
            raise TypeError("gradient checks run in float64")
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    rows = []
    with torch.no_grad():
        for ti, t in enumerate(tensors):
            flat = t.view(-1)
            picks = rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False)
            for j in picks:
                j = int(j)
                orig = flat[j].item()
                flat[j] = orig + step
                up = fn().item()
                flat[j] = orig - step
                down = fn().item()
                flat[j] = orig
                rows.append((ti, j, grads[ti].view(-1)[j].item(), (up - down) / (2 * step)))
    worst = max(relative_error(a, n) for _, _, a, n in rows)
    return worst, rows


def module_params64(module: torch.nn.Module) -> list[torch.Tensor]:
    module.double()
    return [p for p in module.parameters() if p.requires_grad]
