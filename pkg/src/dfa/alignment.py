"""Multi-kernel RBF maximum mean discrepancy between prototypes and unlabeled features."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .gradcheck import central_difference_grad, max_relative_error


class KernelError(ValueError):
    pass


class BandwidthStrategy(str, enum.Enum):
    MEDIAN_HEURISTIC = "median_heuristic"
    FIXED_LIST = "fixed_list"


@dataclass(frozen=True)
class KernelSpec:
    strategy: BandwidthStrategy = BandwidthStrategy.MEDIAN_HEURISTIC
    sigmas: Optional[tuple] = None
    n_kernels: int = 5

    def __post_init__(self):
        object.__setattr__(self, "strategy", BandwidthStrategy(self.strategy))
        if self.strategy is BandwidthStrategy.FIXED_LIST:
            if not self.sigmas:
                raise KernelError("fixed_list strategy needs at least one bandwidth")
            sig = tuple(float(s) for s in self.sigmas)
            if any(not s > 0 for s in sig):
                raise KernelError(f"bandwidths must be > 0, got {sig}")
            object.__setattr__(self, "sigmas", sig)
            object.__setattr__(self, "n_kernels", len(sig))
        elif self.n_kernels < 1:
            raise KernelError("n_kernels must be >= 1")

    @classmethod
    def fixed(cls, sigmas: Sequence[float]) -> "KernelSpec":
        return cls(BandwidthStrategy.FIXED_LIST, tuple(sigmas))


def median_bandwidths(Z: torch.Tensor, n_kernels: int = 5) -> tuple:
    """Bandwidths ``sigma_med * 2**j`` centred on the median pairwise distance of ``Z``.

    For five kernels this is {s/4, s/2, s, 2s, 4s}.
    """
    with torch.no_grad():
        d = torch.cdist(Z, Z)
        iu = torch.triu_indices(len(Z), len(Z), offset=1)
        med = float(d[iu[0], iu[1]].median()) if iu.shape[1] else 0.0
    if not med > 0:
        med = 1.0
    half = (n_kernels - 1) / 2
    return tuple(med * 2.0 ** (j - half) for j in range(n_kernels))


def resolve_bandwidths(spec: KernelSpec, A: torch.Tensor, C: torch.Tensor) -> tuple:
    if spec.strategy is BandwidthStrategy.FIXED_LIST:
        return spec.sigmas
    return median_bandwidths(torch.cat([A, C]).detach(), spec.n_kernels)


def sq_distances(A: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    # explicit differences rather than the |a|^2+|c|^2-2ac expansion: exact zeros on the diagonal
    diff = A.unsqueeze(1) - C.unsqueeze(0)
    return (diff * diff).sum(-1)


def rbf_gram(A: torch.Tensor, C: torch.Tensor, spec_or_sigmas) -> torch.Tensor:
    """Sum over bandwidths of ``exp(-|A_i - C_j|^2 / (2 sigma^2))``."""
    if isinstance(spec_or_sigmas, KernelSpec):
        sigmas = resolve_bandwidths(spec_or_sigmas, A, C)
    else:
        sigmas = tuple(float(s) for s in spec_or_sigmas)
    if any(not s > 0 for s in sigmas):
        raise KernelError(f"bandwidths must be > 0, got {sigmas}")
    d2 = sq_distances(A, C)
    return sum(torch.exp(-d2 / (2.0 * s * s)) for s in sigmas)


def mmd(prototypes: torch.Tensor, features: torch.Tensor, spec: KernelSpec = KernelSpec(),
        detach_prototypes: bool = True) -> torch.Tensor:
    """Biased (V-statistic) squared MMD estimate.

    ``mean(K_pp) - 2 mean(K_pu) + mean(K_uu)``. Bandwidths from the median
    heuristic are computed on the combined set and treated as constants.
    """
    if len(features) < 2:
        raise KernelError("mmd needs at least 2 unlabeled features")
    if len(prototypes) < 2:
        raise KernelError("mmd needs at least 2 prototypes")
    P = prototypes.detach() if detach_prototypes else prototypes
    sigmas = resolve_bandwidths(spec, P, features)
    return (rbf_gram(P, P, sigmas).mean()
            - 2.0 * rbf_gram(P, features, sigmas).mean()
            + rbf_gram(features, features, sigmas).mean())


def mmd_loss_grad_check(extractor, prototypes: torch.Tensor, x: torch.Tensor,
                        spec: Optional[KernelSpec] = None, step: float = 1e-5) -> float:
    """Max relative error between autograd and finite differences of the MMD loss.

    Bandwidths are frozen from the initial features so both routes see the
    same kernel. Run in float64.
    """
    params = [p for p in extractor.parameters()]
    if spec is None or spec.strategy is BandwidthStrategy.MEDIAN_HEURISTIC:
        with torch.no_grad():
            sig = median_bandwidths(torch.cat([prototypes, extractor(x)]), spec.n_kernels if spec else 5)
        spec = KernelSpec.fixed(sig)

    def loss():
        return mmd(prototypes, extractor(x), spec)

    for p in params:
        p.grad = None
    value = loss()
    analytic = torch.autograd.grad(value, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    numeric = central_difference_grad(loss, params, step)
    return max_relative_error(analytic, numeric)
