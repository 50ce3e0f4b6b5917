"""Virtual-adversarial perturbation and the KL consistency loss built on it."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

_ZERO_GRAD = 1e-20


@dataclass(frozen=True)
class PerturbSpec:
    radius: float = 0.5
    xi: float = 1e-4
    power_iters: int = 1

    def __post_init__(self):
        if not (self.radius > 0 and self.xi > 0):
            raise ValueError("radius and xi must be > 0")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")


def _logits_fn(extractor, classifier) -> Callable[[torch.Tensor], torch.Tensor]:
    if classifier is None:
        return extractor
    return lambda x: classifier(extractor(x))


def _unit_rows(d: torch.Tensor) -> torch.Tensor:
    flat = d.reshape(len(d), -1)
    return (flat / flat.norm(dim=1, keepdim=True)).reshape(d.shape)


def kl_from_logits(clean_logits: torch.Tensor, pert_logits: torch.Tensor) -> torch.Tensor:
    """Per-row KL(softmax(clean) || softmax(pert))."""
    logp = F.log_softmax(clean_logits, dim=1)
    logq = F.log_softmax(pert_logits, dim=1)
    return (logp.exp() * (logp - logq)).sum(1)


def compute_perturbation(x: torch.Tensor, extractor, classifier=None, spec: PerturbSpec = PerturbSpec(),
                         generator: Optional[torch.Generator] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Adversarial direction by power iteration, scaled to ``spec.radius`` per sample.

    Returns ``(r, fallback)`` where ``fallback`` marks rows whose probe
    gradient vanished and which keep the random starting direction.
    ``classifier=None`` treats ``extractor`` as the full logits function.
    Only the input receives gradients; model parameters are left alone.
    """
    forward = _logits_fn(extractor, classifier)
    x = x.detach()
    with torch.no_grad():
        clean = forward(x)
    d = _unit_rows(torch.randn(x.shape, generator=generator, dtype=x.dtype))
    start = d
    fallback = torch.zeros(len(x), dtype=torch.bool)
    for _ in range(spec.power_iters):
        probe = (x + spec.xi * d).requires_grad_(True)
        dist = kl_from_logits(clean, forward(probe)).sum()
        (grad,) = torch.autograd.grad(dist, probe)
        norms = grad.reshape(len(x), -1).norm(dim=1)
        dead = ~(norms > _ZERO_GRAD)
        if dead.any():
            log.info("perturbation probe: zero gradient on %d/%d rows, using random direction",
                     int(dead.sum()), len(x))
            grad = grad.clone()
            grad[dead] = start[dead]
        fallback |= dead
        d = _unit_rows(grad.detach())
    return spec.radius * d, fallback


def perturb_loss(x: torch.Tensor, extractor, classifier=None, spec: PerturbSpec = PerturbSpec(),
                 generator: Optional[torch.Generator] = None, r: Optional[torch.Tensor] = None,
                 clean_logits: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean KL between clean (held constant) and perturbed class distributions.

    Pass ``r`` to use a frozen perturbation, ``clean_logits`` to reuse a
    clean forward pass.
    """
    forward = _logits_fn(extractor, classifier)
    if r is None:
        r, _ = compute_perturbation(x, extractor, classifier, spec, generator)
    if clean_logits is None:
        with torch.no_grad():
            clean_logits = forward(x)
    return kl_from_logits(clean_logits.detach(), forward(x + r)).mean()
