"""Prototype-gated pseudo-labels.

An unlabeled sample is kept when its best cosine similarity to any
prototype exceeds ``eps_dist`` and the entropy of its prototype softmax is
below ``eps_ent``. Kept samples are trained on the classifier's own argmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import ConfigError

DEFAULT_TAU_P = 0.07
DEFAULT_EPS_ENT = 0.5
# 0.3 was used for the strong backbone, 0.1 for the weak one
EPS_DIST_STRONG = 0.3
EPS_DIST_WEAK = 0.1


@dataclass(frozen=True)
class SelectionMask:
    in_dist: torch.Tensor
    in_ent: torch.Tensor
    in_pse: torch.Tensor

    def __post_init__(self):
        if not torch.equal(self.in_pse, self.in_dist & self.in_ent):
            raise ValueError("in_pse must equal in_dist & in_ent")

    def counts(self) -> dict:
        return {"n_dist": int(self.in_dist.sum()), "n_ent": int(self.in_ent.sum()),
                "n_pse": int(self.in_pse.sum())}


@dataclass(frozen=True)
class PseudoBatch:
    """Selected rows of one unlabeled batch.

    ``positions`` index into the unlabeled batch; ``batch_size`` is the
    full batch size, the denominator of the pseudo loss.
    """

    x: torch.Tensor
    positions: torch.Tensor
    labels: torch.Tensor
    scores: torch.Tensor
    entropies: torch.Tensor
    batch_size: int

    def __len__(self):
        return len(self.positions)


def prototype_softmax(features: torch.Tensor, prototypes: torch.Tensor,
                      tau_p: float = DEFAULT_TAU_P) -> torch.Tensor:
    if not tau_p > 0:
        raise ConfigError(f"tau_p must be > 0, got {tau_p}")
    return F.softmax(features @ prototypes.t() / tau_p, dim=-1)


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Natural-log entropy along the last axis, with 0 log 0 = 0."""
    return -torch.special.xlogy(p, p).sum(-1)


@torch.no_grad()
def select(features: torch.Tensor, prototypes: torch.Tensor, tau_p: float = DEFAULT_TAU_P,
           eps_dist: float = EPS_DIST_STRONG, eps_ent: float = DEFAULT_EPS_ENT) -> SelectionMask:
    features = features.detach()
    sims = features @ prototypes.t()
    in_dist = sims.max(dim=1).values > eps_dist
    in_ent = entropy(prototype_softmax(features, prototypes, tau_p)) < eps_ent
    return SelectionMask(in_dist, in_ent, in_dist & in_ent)


@torch.no_grad()
def build_pseudo_batch(x: torch.Tensor, features: torch.Tensor, logits: torch.Tensor,
                       prototypes: torch.Tensor, mask: SelectionMask, tau_p: float = DEFAULT_TAU_P) -> PseudoBatch:
    """Freeze pseudo-labels: classifier argmax of the selected rows."""
    pos = mask.in_pse.nonzero().flatten()
    features = features.detach()
    sims = features[pos] @ prototypes.t()
    return PseudoBatch(
        x=x[pos], positions=pos,
        labels=logits.detach()[pos].argmax(dim=1),
        scores=sims.max(dim=1).values if len(pos) else sims.new_zeros(0),
        entropies=entropy(prototype_softmax(features[pos], prototypes, tau_p)),
        batch_size=len(x),
    )


def pseudo_loss_from_logits(logits: torch.Tensor, pseudo: PseudoBatch) -> torch.Tensor:
    """Sum of selected cross-entropies divided by the full batch size."""
    if len(pseudo) == 0:
        return logits.sum() * 0.0
    ce = F.cross_entropy(logits[pseudo.positions], pseudo.labels, reduction="sum")
    return ce / pseudo.batch_size


def pseudo_loss(extractor, classifier, pseudo: PseudoBatch) -> torch.Tensor:
    """Pseudo-label loss recomputed from the live model on ``pseudo.x``."""
    if len(pseudo) == 0:
        return torch.zeros((), dtype=next(classifier.parameters()).dtype)
    logits = classifier(extractor(pseudo.x))
    return F.cross_entropy(logits, pseudo.labels, reduction="sum") / pseudo.batch_size
