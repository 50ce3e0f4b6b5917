"""Class-balanced prototype bank.

Two banks are kept. The intermediate bank ``b`` holds, per class, the
feature of the most recent correctly classified labeled sample. The dynamic
bank ``B`` follows ``b`` through an exponentially weighted moving average
applied once per training iteration, so every class contributes exactly once
per update regardless of how often it appears in the data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .model import DegenerateFeatureError, FeatureExtractor, l2_normalize

DEFAULT_GAMMA = 0.1


class BankError(RuntimeError):
    pass


@dataclass(frozen=True)
class UpdateEvent:
    step: int
    cls: int
    event: str  # "replace" or "ewma"
    position: int = -1  # row within the labeled batch, for "replace"
    label: int = -1
    prediction: int = -1

    def as_record(self) -> dict:
        return {"step": self.step, "class": self.cls, "event": self.event,
                "position": self.position, "label": self.label, "prediction": self.prediction}


@dataclass
class UpdateLog:
    events: list = field(default_factory=list)

    def extend(self, events):
        self.events.extend(events)

    def records(self) -> list[dict]:
        return [e.as_record() for e in self.events]

    def replacements(self):
        return [e for e in self.events if e.event == "replace"]

    def ewma_counts(self, n_classes: int) -> np.ndarray:
        counts = np.zeros(n_classes, dtype=np.int64)
        for e in self.events:
            if e.event == "ewma":
                counts[e.cls] += 1
        return counts

    def __len__(self):
        return len(self.events)


class IntermediateBank:
    def __init__(self, b: torch.Tensor, filled: Optional[torch.Tensor] = None):
        self.b = b.detach().clone()
        if filled is None:
            filled = torch.zeros(b.shape[0], dtype=torch.bool)
        self.filled = filled.clone()

    @property
    def n_classes(self) -> int:
        return self.b.shape[0]

    def update(self, features: torch.Tensor, labels, predictions, step: int = 0) -> list[UpdateEvent]:
        """Overwrite ``b[y]`` with the feature of every correctly classified sample.

        Rows are visited in batch order, so the last correct sample of a
        class wins. Misclassified samples leave the bank untouched.
        """
        labels = torch.as_tensor(labels).long()
        predictions = torch.as_tensor(predictions).long()
        K = self.n_classes
        if len(labels) and (labels.max() >= K or labels.min() < 0):
            raise BankError(f"label outside [0, {K})")
        features = features.detach()
        events = []
        correct = (labels == predictions).nonzero().flatten().tolist()
        for j in correct:
            k = int(labels[j])
            self.b[k] = features[j]
            self.filled[k] = True
            events.append(UpdateEvent(step, k, "replace", j, k, int(predictions[j])))
        return events

    def state_dict(self) -> dict:
        return {"b": self.b.clone(), "filled": self.filled.clone()}

    @classmethod
    def from_state(cls, state: dict) -> "IntermediateBank":
        return cls(state["b"], state["filled"])


class DynamicBank:
    """K prototypes updated as ``B <- gamma * B + (1 - gamma) * b`` then renormalized."""

    def __init__(self, B: torch.Tensor, gamma: float = DEFAULT_GAMMA):
        if not 0.0 <= gamma <= 1.0:
            raise BankError(f"gamma must lie in [0, 1], got {gamma}")
        self.B = B.detach().clone()
        self.gamma = float(gamma)
        self.step = 0
        self.contributions = torch.zeros(B.shape[0], dtype=torch.long)

    @property
    def n_classes(self) -> int:
        return self.B.shape[0]

    def update(self, bank: IntermediateBank) -> list[UpdateEvent]:
        """One EWMA step against ``bank``; rows whose slot was never filled are skipped."""
        rows = bank.filled
        if self.gamma == 0.0:
            self.B[rows] = bank.b[rows]
        elif self.gamma < 1.0:
            raw = self.gamma * self.B[rows] + (1.0 - self.gamma) * bank.b[rows]
            self.B[rows] = l2_normalize(raw, "prototype")
        self.contributions[rows] += 1
        events = [UpdateEvent(self.step, int(k), "ewma") for k in rows.nonzero().flatten()]
        self.step += 1
        return events

    def prototypes(self) -> torch.Tensor:
        snap = self.B.clone()
        snap.requires_grad_(False)
        return snap

    def state_dict(self) -> dict:
        return {"B": self.B.clone(), "gamma": self.gamma, "step": self.step,
                "contributions": self.contributions.clone()}

    @classmethod
    def from_state(cls, state: dict) -> "DynamicBank":
        bank = cls(state["B"], state["gamma"])
        bank.step = state["step"]
        bank.contributions = state["contributions"].clone()
        return bank


def update_intermediate(bank: IntermediateBank, features, labels, predictions, step=0):
    events = bank.update(features, labels, predictions, step)
    return bank, UpdateLog(events)


def ewma_update(B: DynamicBank, b: IntermediateBank) -> DynamicBank:
    B.update(b)
    return B


def get_prototypes(B: DynamicBank) -> torch.Tensor:
    return B.prototypes()


def class_mean_prototypes(features: torch.Tensor, labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Per-class normalized mean of ``features``."""
    labels = torch.as_tensor(labels).long()
    counts = torch.bincount(labels, minlength=n_classes)
    if torch.any(counts == 0):
        missing = (counts == 0).nonzero().flatten().tolist()
        raise BankError(f"classes without labeled examples: {missing}")
    sums = torch.zeros(n_classes, features.shape[1], dtype=features.dtype)
    sums.index_add_(0, labels, features)
    means = sums / counts.unsqueeze(1).to(features.dtype)
    try:
        return l2_normalize(means, "class-mean prototype")
    except DegenerateFeatureError as err:
        raise BankError(str(err)) from err


@torch.no_grad()
def init_banks(episode, extractor: FeatureExtractor, classifier=None, gamma: float = DEFAULT_GAMMA,
               dtype=torch.float32):
    """Both banks start at the normalized class means of all labeled features.

    ``classifier`` is accepted for interface symmetry and is not used.
    """
    x = torch.as_tensor(episode.labeled_x(), dtype=dtype)
    y = torch.as_tensor(episode.labeled_y())
    protos = class_mean_prototypes(extractor(x), y, episode.n_classes)
    inter = IntermediateBank(protos, torch.ones(episode.n_classes, dtype=torch.bool))
    return inter, DynamicBank(protos, gamma)
