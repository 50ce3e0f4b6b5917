"""Unit-norm feature extractor and temperature-scaled cosine classifier."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_TEMPERATURE = 0.05
_MIN_NORM = 1e-12

_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "gelu": nn.GELU}


class DegenerateFeatureError(ArithmeticError):
    """A vector with (near) zero norm cannot be normalized."""


class ConfigError(ValueError):
    pass


def l2_normalize(v: torch.Tensor, what: str = "feature") -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    if torch.any(norm < _MIN_NORM):
        raise DegenerateFeatureError(f"{what} norm below {_MIN_NORM:g}; normalization undefined")
    return v / norm


def build_mlp(in_dim: int, hidden: Sequence[int] = (64, 64), out_dim: int = 16,
              activation: str = "relu") -> nn.Sequential:
    if activation not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    layers: list[nn.Module] = []
    width = in_dim
    for h in hidden:
        layers += [nn.Linear(width, h), _ACTIVATIONS[activation]()]
        width = h
    layers.append(nn.Linear(width, out_dim))
    return nn.Sequential(*layers)


class FeatureExtractor(nn.Module):
    """Wraps any backbone and L2-normalizes its output.

    The backbone maps a batch of inputs to ``(n, feature_dim)`` raw features;
    MLPs come from :func:`build_mlp`, but conv nets work the same way.
    """

    def __init__(self, backbone: nn.Module, feature_dim: int):
        super().__init__()
        self.backbone = backbone
        self.feature_dim = feature_dim

    @classmethod
    def mlp(cls, in_dim, hidden=(64, 64), feature_dim=16, activation="relu"):
        return cls(build_mlp(in_dim, hidden, feature_dim, activation), feature_dim)

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.backbone(x))


def extract(x: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    if not torch.all(torch.isfinite(x)):
        raise ValueError("inputs must be finite")
    return extractor(x)


class CosineClassifier(nn.Module):
    """Softmax over cosine similarities to K class weight vectors, divided by ``temperature``.

    With ``normalize_weights`` the weight rows are normalized before the
    dot product so logits are true cosines over the temperature.
    """

    def __init__(self, feature_dim: int, n_classes: int, temperature: float = DEFAULT_TEMPERATURE,
                 normalize_weights: bool = True):
        super().__init__()
        if not temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        self.temperature = float(temperature)
        self.normalize_weights = normalize_weights
        self.weight = nn.Parameter(torch.empty(n_classes, feature_dim))
        nn.init.normal_(self.weight, std=0.1)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def weight_vectors(self) -> torch.Tensor:
        if self.normalize_weights:
            return l2_normalize(self.weight, "classifier weight")
        return self.weight

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        """Logits (n, K)."""
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        return m @ self.weight_vectors().t() / self.temperature


def classify(m: torch.Tensor, classifier: CosineClassifier) -> torch.Tensor:
    return F.softmax(classifier(m), dim=-1)


def classification_loss(m: torch.Tensor, y: torch.Tensor, classifier: CosineClassifier) -> torch.Tensor:
    """Mean cross-entropy of the true class."""
    if len(y) == 0:
        raise ValueError("classification_loss needs a non-empty batch")
    return F.cross_entropy(classifier(m), y)
