"""Finite-difference gradient checking helpers (float64 use intended)."""
from __future__ import annotations

from typing import Sequence

import torch


def central_difference_grad(loss_fn, params: Sequence[torch.Tensor], step: float = 1e-5) -> list[torch.Tensor]:
    """Central finite-difference gradient of a scalar ``loss_fn()`` w.r.t. each tensor in ``params``.

    Perturbs parameters in place, one entry at a time.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = (a - n).abs() / (a.abs() + 1e-8)
        worst = max(worst, float(rel.max()))
    return worst
