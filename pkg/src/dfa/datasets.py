"""Synthetic semi-supervised domain adaptation episodes and batch iterators.

An episode holds three splits: labeled source, k-shot labeled target and
unlabeled target. Target ground truth for the unlabeled split is kept on the
episode but is only reachable through :meth:`SSDAEpisode.reveal_labels`,
which evaluation code calls explicitly. The iterators never touch it.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

SOURCE = "source"
TARGET = "target"

DUMP_FORMAT_VERSION = 1


class EpisodeError(ValueError):
    """Raised for invalid episode parameters or inconsistent episode files."""


class ShiftKind(str, enum.Enum):
    ROTATION = "rotation"
    TRANSLATION = "translation"
    SCALE = "scale"
    MIXED = "mixed"


@dataclass(frozen=True)
class ShiftSpec:
    """How the target domain is derived from the source clusters.

    ``magnitude`` is in degrees for rotation, input units for translation
    and a relative factor for scale (target = (1 + magnitude) * x).
    ``mixed`` rotates by ``magnitude`` degrees and then translates by
    ``magnitude / 30`` along the diagonal.
    """

    kind: ShiftKind = ShiftKind.ROTATION
    magnitude: float = 30.0
    noise_std: float = 0.0
    class_imbalance: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ShiftKind(self.kind))
        if not math.isfinite(self.magnitude):
            raise EpisodeError("shift magnitude must be finite")
        if self.noise_std < 0:
            raise EpisodeError("noise_std must be >= 0")
        if self.class_imbalance is not None:
            w = tuple(float(v) for v in self.class_imbalance)
            if any(not (v > 0 and math.isfinite(v)) for v in w):
                raise EpisodeError("class_imbalance weights must be positive")
            object.__setattr__(self, "class_imbalance", w)


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: int
    domain: str


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SSDAEpisode:
    """Immutable container of the three SSDA splits.

    Arrays are read-only. ``target_unlabeled_x`` rows are identified by
    their position; ``reveal_labels`` maps positions to ground truth and is
    meant for evaluation only.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    target_labeled_x: np.ndarray
    target_labeled_y: np.ndarray
    target_unlabeled_x: np.ndarray
    n_classes: int
    shots: int
    _hidden_labels: Optional[np.ndarray] = field(default=None, repr=False)
    # pool positions, so identity of target samples can be audited
    target_labeled_ids: Optional[np.ndarray] = field(default=None, repr=False)
    target_unlabeled_ids: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("source_x", "source_y", "target_labeled_x",
                     "target_labeled_y", "target_unlabeled_x", "_hidden_labels",
                     "target_labeled_ids", "target_unlabeled_ids"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(np.asarray(value)))
        self._validate()

    def _validate(self):
        K = self.n_classes
        if K < 2:
            raise EpisodeError("n_classes must be >= 2")
        for x in (self.source_x, self.target_labeled_x, self.target_unlabeled_x):
            if x.ndim != 2:
                raise EpisodeError("inputs must be 2-D arrays")
            if not np.all(np.isfinite(x)):
                raise EpisodeError("inputs must be finite")
        for y in (self.source_y, self.target_labeled_y):
            if len(y) and (y.min() < 0 or y.max() >= K):
                raise EpisodeError("labels must lie in [0, n_classes)")
        counts = np.bincount(self.target_labeled_y, minlength=K)
        if not np.all(counts == self.shots):
            raise EpisodeError(
                f"target_labeled must hold exactly {self.shots} examples per class, got {counts.tolist()}")
        if self._hidden_labels is not None and len(self._hidden_labels) != len(self.target_unlabeled_x):
            raise EpisodeError("hidden label count does not match unlabeled inputs")

    @property
    def dim(self) -> int:
        return self.source_x.shape[1]

    @property
    def n_source(self) -> int:
        return len(self.source_x)

    @property
    def n_labeled(self) -> int:
        return len(self.target_labeled_x)

    @property
    def n_unlabeled(self) -> int:
        return len(self.target_unlabeled_x)

    @property
    def has_hidden_labels(self) -> bool:
        return self._hidden_labels is not None

    def reveal_labels(self, index=None) -> np.ndarray:
        """Ground truth of the unlabeled split (evaluation only)."""
        if self._hidden_labels is None:
            raise EpisodeError("episode carries no hidden labels")
        if index is None:
            return self._hidden_labels
        return self._hidden_labels[np.asarray(index)]

    def source_examples(self) -> list[LabeledExample]:
        return [LabeledExample(x, int(y), SOURCE) for x, y in zip(self.source_x, self.source_y)]

    def target_labeled_examples(self) -> list[LabeledExample]:
        return [LabeledExample(x, int(y), TARGET)
                for x, y in zip(self.target_labeled_x, self.target_labeled_y)]

    def labeled_x(self) -> np.ndarray:
        return np.concatenate([self.source_x, self.target_labeled_x])

    def labeled_y(self) -> np.ndarray:
        return np.concatenate([self.source_y, self.target_labeled_y])

    def equals(self, other: "SSDAEpisode") -> bool:
        """Bitwise equality of every array and scalar field."""
        if (self.n_classes, self.shots) != (other.n_classes, other.shots):
            return False
        names = ("source_x", "source_y", "target_labeled_x", "target_labeled_y",
                 "target_unlabeled_x", "_hidden_labels")
        for name in names:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes()):
                return False
        return True


def _cluster_means(n_classes: int, dim: int, radius: float) -> np.ndarray:
    # evenly spaced on a circle in the first two coordinates
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    out = x.copy()
    out[:, 0] = c * x[:, 0] - s * x[:, 1]
    out[:, 1] = s * x[:, 0] + c * x[:, 1]
    return out


def apply_shift(x: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    dim = x.shape[1]
    if shift.kind in (ShiftKind.ROTATION, ShiftKind.MIXED) and dim < 2:
        raise EpisodeError("rotation shift needs dim >= 2")
    diag = np.ones(dim) / np.sqrt(dim)
    if shift.kind is ShiftKind.ROTATION:
        return _rotate(x, shift.magnitude)
    if shift.kind is ShiftKind.TRANSLATION:
        return x + shift.magnitude * diag
    if shift.kind is ShiftKind.SCALE:
        return (1.0 + shift.magnitude) * x
    return _rotate(x, shift.magnitude) + (shift.magnitude / 30.0) * diag


def _draw_labels(rng: np.random.Generator, n: int, n_classes: int, weights) -> np.ndarray:
    if weights is None:
        # balanced up to remainder, then shuffled
        y = np.arange(n) % n_classes
        return rng.permutation(y)
    p = np.asarray(weights, dtype=float)
    return rng.choice(n_classes, size=n, p=p / p.sum())


def make_synthetic_episode(seed: int, n_classes: int, dim: int, n_source: int,
                           n_unlabeled: int, shots: int, shift: ShiftSpec = ShiftSpec(),
                           cluster_std: float = 1.0, radius: float = 4.0) -> SSDAEpisode:
    """Gaussian-mixture episode with a shifted target domain.

    Source and target share K isotropic clusters placed on a circle of the
    given radius. The target pool has ``n_unlabeled + shots * n_classes``
    samples; after a seeded shuffle the first ``shots`` per class become the
    labeled target split and the remainder is unlabeled.
    """
    if n_classes < 2:
        raise EpisodeError("n_classes must be >= 2")
    if shots < 1:
        raise EpisodeError("shots must be >= 1")
    if n_source < n_classes:
        raise EpisodeError("n_source must be >= n_classes")
    if n_unlabeled < n_classes:
        raise EpisodeError("n_unlabeled must be >= n_classes")
    if dim < 1:
        raise EpisodeError("dim must be >= 1")
    if shift.kind in (ShiftKind.ROTATION, ShiftKind.MIXED) and dim < 2:
        raise EpisodeError("rotation shift needs dim >= 2")
    if shift.class_imbalance is not None and len(shift.class_imbalance) != n_classes:
        raise EpisodeError("class_imbalance needs one weight per class")

    rng = np.random.default_rng(seed)
    means = _cluster_means(n_classes, dim, radius)

    ys = _draw_labels(rng, n_source, n_classes, shift.class_imbalance)
    xs = means[ys] + cluster_std * rng.standard_normal((n_source, dim))

    n_pool = n_unlabeled + shots * n_classes
    yt = _draw_labels(rng, n_pool, n_classes, shift.class_imbalance)
    xt = means[yt] + cluster_std * rng.standard_normal((n_pool, dim))
    xt = apply_shift(xt, shift)
    if shift.noise_std > 0:
        xt = xt + shift.noise_std * rng.standard_normal(xt.shape)

    order = rng.permutation(n_pool)
    labeled_ids = []
    for k in range(n_classes):
        members = order[yt[order] == k]
        if len(members) < shots:
            raise EpisodeError(
                f"class {k} has {len(members)} target samples, fewer than shots={shots}")
        labeled_ids.extend(members[:shots].tolist())
    labeled_ids = np.array(sorted(labeled_ids, key=lambda i: (yt[i], i)))
    mask = np.ones(n_pool, dtype=bool)
    mask[labeled_ids] = False
    unlabeled_ids = order[mask[order]]

    return SSDAEpisode(
        source_x=xs, source_y=ys,
        target_labeled_x=xt[labeled_ids], target_labeled_y=yt[labeled_ids],
        target_unlabeled_x=xt[unlabeled_ids],
        n_classes=n_classes, shots=shots,
        _hidden_labels=yt[unlabeled_ids],
        target_labeled_ids=labeled_ids, target_unlabeled_ids=unlabeled_ids,
    )


@dataclass(frozen=True)
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray
    # True for rows drawn from the labeled target split
    is_target: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class UnlabeledBatch:
    x: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.index)


def _epoch_stream(n: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from rng.permutation(n).tolist()


def balanced_labeled_iterator(episode: SSDAEpisode, batch_size: int, seed: int) -> Iterator[LabeledBatch]:
    """Infinite stream of batches, half source and half labeled target.

    Each half cycles through its split in independently reshuffled epochs.
    Source rows come first in every batch.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be an even integer >= 2, got {batch_size}")
    if episode.n_source == 0 or episode.n_labeled == 0:
        raise ValueError("balanced iterator needs non-empty source and target_labeled splits")
    half = batch_size // 2
    rng = np.random.default_rng(seed)
    src = _epoch_stream(episode.n_source, rng)
    tgt = _epoch_stream(episode.n_labeled, rng)
    is_target = np.r_[np.zeros(half, bool), np.ones(half, bool)]
    is_target.setflags(write=False)
    while True:
        si = np.fromiter((next(src) for _ in range(half)), dtype=np.int64, count=half)
        ti = np.fromiter((next(tgt) for _ in range(half)), dtype=np.int64, count=half)
        x = np.concatenate([episode.source_x[si], episode.target_labeled_x[ti]])
        y = np.concatenate([episode.source_y[si], episode.target_labeled_y[ti]])
        yield LabeledBatch(x=x, y=y, is_target=is_target)


def unlabeled_iterator(episode: SSDAEpisode, batch_size: int, seed: int) -> Iterator[UnlabeledBatch]:
    """Infinite stream over the unlabeled split in shuffled epochs.

    Batches never straddle epochs; a short final batch is emitted when the
    split size is not a multiple of ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = episode.n_unlabeled
    if n == 0:
        raise ValueError("unlabeled split is empty")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            yield UnlabeledBatch(x=episode.target_unlabeled_x[idx], index=idx)


def dump_episode(episode: SSDAEpisode, path) -> None:
    """Write the episode as a flat text file.

    Format: comment lines start with ``#``. The header comment carries
    ``n_classes`` and ``shots``. Every other line is one sample::

        domain,split,label,x0,x1,...

    ``domain`` is ``source`` or ``target``; ``split`` is ``source``,
    ``labeled`` or ``unlabeled``; ``label`` is the class index, or for the
    unlabeled split ``hidden:<k>`` (``hidden:?`` when unknown). Floats are
    written with ``repr`` so a reload is exact.
    """
    path = Path(path)
    lines = [f"# dfa-episode v{DUMP_FORMAT_VERSION} n_classes={episode.n_classes} "
             f"shots={episode.shots} dim={episode.dim}"]

    def row(domain, split, label, x):
        return ",".join([domain, split, label] + [repr(float(v)) for v in x])

    for x, y in zip(episode.source_x, episode.source_y):
        lines.append(row(SOURCE, "source", str(int(y)), x))
    for x, y in zip(episode.target_labeled_x, episode.target_labeled_y):
        lines.append(row(TARGET, "labeled", str(int(y)), x))
    hidden = episode._hidden_labels
    for i, x in enumerate(episode.target_unlabeled_x):
        label = f"hidden:{int(hidden[i])}" if hidden is not None else "hidden:?"
        lines.append(row(TARGET, "unlabeled", label, x))
    path.write_text("\n".join(lines) + "\n")


def load_episode(path) -> SSDAEpisode:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# dfa-episode"):
        raise EpisodeError(f"{path}: missing episode header")
    meta = dict(tok.split("=") for tok in text[0].split()[3:])
    K, shots = int(meta["n_classes"]), int(meta["shots"])
    parts: dict[str, list] = {"source": [], "labeled": [], "unlabeled": []}
    for lineno, line in enumerate(text[1:], start=2):
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        domain, split, label = fields[:3]
        if split not in parts:
            raise EpisodeError(f"{path}:{lineno}: unknown split {split!r}")
        parts[split].append((label, [float(v) for v in fields[3:]]))

    def arrays(rows, hidden=False):
        x = np.array([r[1] for r in rows], dtype=float).reshape(len(rows), -1)
        if hidden:
            labels = [r[0].split(":", 1)[1] for r in rows]
            y = None if any(v == "?" for v in labels) else np.array([int(v) for v in labels])
        else:
            y = np.array([int(r[0]) for r in rows], dtype=np.int64)
        return x, y

    xs, ys = arrays(parts["source"])
    xl, yl = arrays(parts["labeled"])
    xu, yu = arrays(parts["unlabeled"], hidden=True)
    return SSDAEpisode(source_x=xs, source_y=ys, target_labeled_x=xl, target_labeled_y=yl,
                       target_unlabeled_x=xu, n_classes=K, shots=shots, _hidden_labels=yu)


def episode_from_arrays(X: np.ndarray, y: np.ndarray, domain: Sequence, n_classes: int,
                        unlabeled_marker: int = -1) -> SSDAEpisode:
    """Build an episode from flat arrays (rows with ``y == unlabeled_marker`` are unlabeled target).

    ``domain`` holds 0/``"source"`` for source rows and 1/``"target"`` for
    target rows. The number of shots is inferred and must be equal across
    classes.
    """
    domain = np.asarray(domain)
    is_target = (domain == 1) | (domain == TARGET)
    unl = y == unlabeled_marker
    if np.any(unl & ~is_target):
        raise EpisodeError("unlabeled rows must belong to the target domain")
    lab_t = is_target & ~unl
    counts = np.bincount(y[lab_t], minlength=n_classes)
    if counts.min() != counts.max() or counts.min() == 0:
        raise EpisodeError(f"labeled target rows must be balanced across classes, got {counts.tolist()}")
    return SSDAEpisode(source_x=X[~is_target], source_y=y[~is_target].astype(np.int64),
                       target_labeled_x=X[lab_t], target_labeled_y=y[lab_t].astype(np.int64),
                       target_unlabeled_x=X[unl], n_classes=n_classes, shots=int(counts[0]))
