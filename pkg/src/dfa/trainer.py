"""Training loop for DFA and the S+T / ENT baselines.

One iteration (``train_step``) runs, in order: labeled forward and
classification loss; intermediate-bank update from this batch's
predictions, then the EWMA bank update; prototype snapshot; unlabeled
forward and MMD to the snapshot; selection and pseudo-label loss;
perturbation loss on unlabeled plus labeled-target rows; one SGD step on
the weighted sum.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import KernelSpec, mmd
from .config import ExperimentConfig
from .datasets import (SSDAEpisode, LabeledBatch, UnlabeledBatch, balanced_labeled_iterator,
                       unlabeled_iterator)
from .membank import DynamicBank, IntermediateBank, UpdateLog, init_banks
from .model import CosineClassifier, FeatureExtractor
from .perturb import PerturbSpec, compute_perturbation, kl_from_logits
from .pseudolabel import build_pseudo_batch, entropy, pseudo_loss_from_logits, select

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_TERMS = ("cls", "mmd", "pseudo", "perturb", "ent")


class NonFiniteLossError(FloatingPointError):
    """A loss term became NaN or infinite; ``terms`` holds every term of the step."""

    def __init__(self, step: int, terms: dict):
        self.step, self.terms = step, terms
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        super().__init__(f"non-finite loss at step {step}: {bad}; terms={terms}")


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def inv_lr_factor(t: int, gamma: float = 1e-4, power: float = 0.75) -> float:
    return (1.0 + gamma * t) ** (-power)


def build_model(config: ExperimentConfig, in_dim: int, n_classes: int, seed: int):
    mc = config.model
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        extractor = FeatureExtractor.mlp(in_dim, mc.hidden, mc.feature_dim, mc.activation)
        classifier = CosineClassifier(mc.feature_dim, n_classes, mc.temperature, mc.normalize_weights)
    dtype = _DTYPES[mc.dtype]
    return extractor.to(dtype), classifier.to(dtype)


@dataclass
class TrainState:
    config: ExperimentConfig
    extractor: FeatureExtractor
    classifier: CosineClassifier
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    inter_bank: IntermediateBank
    bank: DynamicBank
    perturb_gen: torch.Generator
    update_log: UpdateLog = field(default_factory=UpdateLog)
    step: int = 0
    seed: int = 0

    @property
    def dtype(self):
        return _DTYPES[self.config.model.dtype]

    @property
    def mode(self) -> str:
        return self.config.mode

    def parameters(self):
        return list(self.extractor.parameters()) + list(self.classifier.parameters())

    def warmup_iters(self) -> int:
        return int(self.config.pseudo.warmup_fraction * self.config.optim.iterations)


def init_state(episode: SSDAEpisode, config: ExperimentConfig, seed: int) -> TrainState:
    extractor, classifier = build_model(config, episode.dim, episode.n_classes, seed)
    oc = config.optim
    params = list(extractor.parameters()) + list(classifier.parameters())
    optimizer = torch.optim.SGD(params, lr=oc.lr, momentum=oc.momentum, weight_decay=oc.weight_decay)
    if oc.schedule == "inv":
        scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, inv_lr_factor)
    else:
        scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda t: 1.0)
    inter, bank = init_banks(episode, extractor, gamma=config.bank.gamma, dtype=_DTYPES[config.model.dtype])
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, 3]).generate_state(1)[0]))
    return TrainState(config, extractor, classifier, optimizer, scheduler, inter, bank, gen, seed=seed)


def _iter_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence([seed, 1]).generate_state(2)
    return int(a), int(b)


def _as_tensor(a, dtype):
    return torch.tensor(np.asarray(a), dtype=dtype)


def train_step(state: TrainState, labeled: LabeledBatch, unlabeled: Optional[UnlabeledBatch]) -> dict:
    """One optimization step; returns the step's logged quantities."""
    cfg = state.config
    ext, clf = state.extractor, state.classifier
    xl = _as_tensor(labeled.x, state.dtype)
    yl = torch.as_tensor(np.asarray(labeled.y)).long()
    ext.train()
    clf.train()

    # (1) supervised term
    m_l = ext(xl)
    logits_l = clf(m_l)
    l_cls = F.cross_entropy(logits_l, yl)
    preds = logits_l.detach().argmax(1)

    # (2) banks
    events = state.inter_bank.update(m_l, yl, preds, state.step)
    events += state.bank.update(state.inter_bank)
    state.update_log.extend(events)

    # (3) snapshot
    protos = state.bank.prototypes()

    zero = torch.zeros((), dtype=state.dtype)
    terms = {"cls": l_cls, "mmd": zero, "pseudo": zero, "perturb": zero, "ent": zero}
    weights = {"cls": 1.0, "mmd": 0.0, "pseudo": 0.0, "perturb": 0.0, "ent": 0.0}
    info: dict = {"n_dist": 0, "n_ent": 0, "n_pse": 0, "pseudo_positions": [], "pseudo_labels": [],
                  "n_fallback": 0}

    if state.mode == "dfa":
        if unlabeled is None:
            raise ValueError("dfa mode needs an unlabeled batch")
        xu = _as_tensor(unlabeled.x, state.dtype)
        # (4) alignment
        m_u = ext(xu)
        logits_u = clf(m_u)
        if len(xu) >= 2:
            spec = KernelSpec(cfg.mmd.kernel.strategy, tuple(cfg.mmd.kernel.sigmas or ()) or None,
                              cfg.mmd.kernel.n_kernels)
            terms["mmd"] = mmd(protos, m_u, spec, cfg.mmd.detach_prototypes)
        # (5) selection + pseudo labels
        pc = cfg.pseudo
        mask = select(m_u, protos, pc.tau_p, pc.eps_dist, pc.eps_ent)
        pb = build_pseudo_batch(xu, m_u, logits_u, protos, mask, pc.tau_p)
        terms["pseudo"] = pseudo_loss_from_logits(logits_u, pb)
        info.update(mask.counts())
        info["pseudo_positions"] = pb.positions.tolist()
        info["pseudo_labels"] = pb.labels.tolist()
        # (6) perturbation consistency on unlabeled + labeled target
        tgt = torch.tensor(np.asarray(labeled.is_target))
        xp = torch.cat([xu, xl[tgt]])
        clean = torch.cat([logits_u, logits_l[tgt]]).detach()
        pspec = PerturbSpec(cfg.perturb.radius, cfg.perturb.xi, cfg.perturb.power_iters)
        r, fallback = compute_perturbation(xp, ext, clf, pspec, state.perturb_gen)
        info["n_fallback"] = int(fallback.sum())
        terms["perturb"] = kl_from_logits(clean, clf(ext(xp + r))).mean()

        lc = cfg.loss
        warm = state.step < state.warmup_iters()
        weights.update(mmd=lc.alpha1, pseudo=0.0 if warm else lc.alpha2, perturb=lc.alpha3)
    elif state.mode == "ent":
        if unlabeled is None:
            raise ValueError("ent mode needs an unlabeled batch")
        logits_u = clf(ext(_as_tensor(unlabeled.x, state.dtype)))
        terms["ent"] = entropy(F.softmax(logits_u, dim=1)).mean()
        weights["ent"] = cfg.loss.ent_weight
    elif state.mode != "s+t":
        raise ValueError(f"unknown mode {state.mode!r}")

    values = {k: float(v.detach()) for k, v in terms.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(state.step, values)

    # (7) weighted sum in float64; zero-weight terms stay out of the graph
    total = terms["cls"].double()
    for k in LOSS_TERMS[1:]:
        if weights[k] > 0:
            total = total + weights[k] * terms[k].double()
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.scheduler.step()

    out = {"step": state.step, "total": float(total.detach()), "lr": state.optimizer.param_groups[0]["lr"]}
    out.update({f"loss_{k}": values[k] for k in LOSS_TERMS})
    out.update({f"weight_{k}": weights[k] for k in LOSS_TERMS})
    out["labeled_labels"] = yl.tolist()
    out["labeled_predictions"] = preds.tolist()
    out["unlabeled_index"] = [] if unlabeled is None else np.asarray(unlabeled.index).tolist()
    out.update(info)
    state.step += 1
    return out


@torch.no_grad()
def predict_logits(extractor, classifier, x, dtype=None) -> torch.Tensor:
    extractor.eval()
    classifier.eval()
    dtype = dtype or next(extractor.parameters()).dtype
    return classifier(extractor(_as_tensor(x, dtype)))


def evaluate(extractor, classifier, episode: SSDAEpisode) -> dict:
    """Accuracy of argmax predictions on the unlabeled split's hidden labels."""
    y = episode.reveal_labels()
    pred = predict_logits(extractor, classifier, episode.target_unlabeled_x).argmax(1).numpy()
    per_class = {}
    for k in range(episode.n_classes):
        sel = y == k
        per_class[k] = float((pred[sel] == k).mean()) if sel.any() else float("nan")
    return {"accuracy": float((pred == y).mean()), "per_class": per_class}


def _mean_angle_deg(a: torch.Tensor, b: torch.Tensor) -> float:
    cos = (a * b).sum(1).clamp(-1.0, 1.0)
    return float(torch.rad2deg(torch.arccos(cos)).mean())


@dataclass
class TrainResult:
    state: TrainState
    history: list
    final_metrics: dict

    @property
    def extractor(self):
        return self.state.extractor

    @property
    def classifier(self):
        return self.state.classifier

    @property
    def bank(self):
        return self.state.bank


def _metrics_record(state, episode, window, last_protos) -> dict:
    last = window[-1]
    rec = {"iteration": state.step, "mode": state.mode}
    rec.update({f"loss_{k}": last[f"loss_{k}"] for k in LOSS_TERMS})
    rec.update({f"weight_{k}": last[f"weight_{k}"] for k in LOSS_TERMS})
    rec["loss_total"] = last["total"]
    rec["lr"] = last["lr"]
    for key in ("n_dist", "n_ent", "n_pse", "n_fallback"):
        rec[key] = int(sum(w[key] for w in window))
    if episode.has_hidden_labels:
        rec["target_accuracy"] = evaluate(state.extractor, state.classifier, episode)["accuracy"]
        hits = total = 0
        for w in window:
            if w["pseudo_positions"]:
                idx = np.asarray(w["unlabeled_index"])[w["pseudo_positions"]]
                hits += int((episode.reveal_labels(idx) == np.asarray(w["pseudo_labels"])).sum())
                total += len(idx)
        rec["pseudo_precision"] = hits / total if total else None
    else:
        rec["target_accuracy"] = None
        rec["pseudo_precision"] = None
    protos = state.bank.prototypes()
    rec["bank_drift_deg"] = _mean_angle_deg(protos, last_protos)
    return rec


def save_checkpoint(state: TrainState, path) -> None:
    """Versioned checkpoint: parameters, temperature, banks, resolved config and its hash."""
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "seed": state.seed,
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "temperature": state.classifier.temperature,
        "extractor": state.extractor.state_dict(),
        "classifier": state.classifier.state_dict(),
        "inter_bank": state.inter_bank.state_dict(),
        "bank": state.bank.state_dict(),
    }, path)


def load_checkpoint(path, in_dim: Optional[int] = None, n_classes: Optional[int] = None):
    """Returns ``(extractor, classifier, bank, config, seed)``."""
    from .config import from_dict

    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('format_version')}")
    config = from_dict(ckpt["config"])
    in_dim = in_dim or config.dataset.dim
    n_classes = n_classes or config.dataset.n_classes
    extractor, classifier = build_model(config, in_dim, n_classes, 0)
    extractor.load_state_dict(ckpt["extractor"])
    classifier.load_state_dict(ckpt["classifier"])
    classifier.temperature = ckpt["temperature"]
    bank = DynamicBank.from_state(ckpt["bank"])
    return extractor, classifier, bank, config, ckpt.get("seed", 0)


def train(episode: SSDAEpisode, config: ExperimentConfig, seed: int = 0, out_dir=None,
          step_callback: Optional[Callable[[TrainState, dict], None]] = None) -> TrainResult:
    """Full run. With ``out_dir`` writes ``metrics.jsonl`` and checkpoints there."""
    state = init_state(episode, config, seed)
    ls, us = _iter_seeds(seed)
    labeled = balanced_labeled_iterator(episode, config.optim.batch_size, ls)
    unlabeled = unlabeled_iterator(episode, config.optim.unlabeled_batch_size, us) \
        if config.mode != "s+t" else None
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "w")
    history, window = [], []
    last_protos = state.bank.prototypes()
    try:
        for _ in range(config.optim.iterations):
            info = train_step(state, next(labeled), next(unlabeled) if unlabeled else None)
            window.append(info)
            if step_callback is not None:
                step_callback(state, info)
            done = state.step == config.optim.iterations
            if state.step % config.eval.interval == 0 or done:
                rec = _metrics_record(state, episode, window, last_protos)
                last_protos = state.bank.prototypes()
                window = []
                history.append(rec)
                if metrics_file:
                    metrics_file.write(json.dumps(rec) + "\n")
                    metrics_file.flush()
            ci = config.eval.checkpoint_interval
            if out is not None and ci and state.step % ci == 0 and not done:
                save_checkpoint(state, out / f"checkpoint_{state.step:06d}.pt")
    finally:
        if metrics_file:
            metrics_file.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint.pt")
    return TrainResult(state, history, history[-1] if history else {})


@torch.no_grad()
def target_features(extractor, episode: SSDAEpisode) -> tuple[np.ndarray, list]:
    """Features of every target sample, one forward pass per row (batch-independent)."""
    extractor.eval()
    dtype = next(extractor.parameters()).dtype
    rows, meta = [], []
    splits = (("labeled", episode.target_labeled_x, episode.target_labeled_y),
              ("unlabeled", episode.target_unlabeled_x,
               episode.reveal_labels() if episode.has_hidden_labels else None))
    for split, X, Y in splits:
        for i, x in enumerate(X):
            f = extractor(_as_tensor(x[None, :], dtype))[0]
            rows.append(f.numpy())
            meta.append((split, i, None if Y is None else int(Y[i])))
    return np.array(rows), meta


def export_embeddings(extractor, episode: SSDAEpisode, path) -> int:
    """JSON-lines file of target features: ``{"split", "index", "label", "feature"}``.

    ``label`` is the hidden ground truth for unlabeled rows (null if unknown).
    Returns the number of records written.
    """
    path = Path(path)
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    feats, meta = target_features(extractor, episode)
    with fh:
        for f, (split, i, y) in zip(feats, meta):
            fh.write(json.dumps({"split": split, "index": i, "label": y,
                                 "feature": [float(v) for v in f]}) + "\n")
    return len(meta)


def load_embeddings(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
