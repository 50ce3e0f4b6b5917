"""Run orchestration behind the command line: single runs, gamma sweeps and reports."""
from __future__ import annotations

import csv
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, save_config
from .datasets import ShiftSpec, SSDAEpisode, dump_episode, make_synthetic_episode
from .trainer import export_embeddings, load_checkpoint, train

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = (0.0, 0.1, 0.25, 0.75)
SUMMARY_FIELDS = ("seed", "target_accuracy", "loss_total", "loss_cls", "loss_mmd", "loss_pseudo",
                  "loss_perturb", "loss_ent", "n_pse", "pseudo_precision")


def episode_for(config: ExperimentConfig, seed: int) -> SSDAEpisode:
    d = config.dataset
    shift = ShiftSpec(d.shift.kind, d.shift.magnitude, d.shift.noise_std,
                      tuple(d.shift.class_imbalance) if d.shift.class_imbalance else None)
    return make_synthetic_episode(seed, d.n_classes, d.dim, d.n_source, d.n_unlabeled, d.shots,
                                  shift, d.cluster_std, d.radius)


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return statistics.fmean(values), (statistics.pstdev(values) if len(values) > 1 else 0.0)


def _write_table(path: Path, rows: list[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _format_table(rows: list[dict], fields: Sequence[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "-" if v is None else str(v)
    cells = [[fmt(r.get(f)) for f in fields] for r in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) if cells else len(f) for i, f in enumerate(fields)]
    lines = ["  ".join(f.ljust(w) for f, w in zip(fields, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def run_single(config: ExperimentConfig, seed: int, out_dir: Optional[Path] = None,
               dataset_dump: Optional[Path] = None) -> dict:
    episode = episode_for(config, seed)
    if dataset_dump is not None:
        dump_episode(episode, dataset_dump)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(config.replace(seeds=[seed], output_dir=str(out_dir)), out_dir / "resolved_config.yaml")
    result = train(episode, config, seed, out_dir)
    return {"seed": seed, **result.final_metrics}


def run_experiment(config: ExperimentConfig, out_dir=None, dataset_dump=None) -> dict:
    """Train every seed of ``config``; write per-seed artifacts and a summary.

    Layout::

        <out>/resolved_config.yaml
        <out>/summary.json, summary.csv, summary.txt
        <out>/seed_<s>/{resolved_config.yaml, metrics.jsonl, checkpoint.pt}
    """
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = config.replace(output_dir=str(out))
    save_config(config, out / "resolved_config.yaml")
    finals = []
    for i, seed in enumerate(config.seeds):
        dump = None
        if dataset_dump is not None:
            dump = Path(dataset_dump) if len(config.seeds) == 1 else Path(f"{dataset_dump}.seed{seed}")
        finals.append(run_single(config, seed, out / f"seed_{seed}", dump))
    mean, std = _mean_std([f.get("target_accuracy") for f in finals])
    summary = {"mode": config.mode, "config_hash": config.config_hash(), "seeds": finals,
               "mean_accuracy": mean, "std_accuracy": std}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    _write_table(out / "summary.csv", finals, SUMMARY_FIELDS)
    table = _format_table(finals, SUMMARY_FIELDS)
    if mean is not None:
        table += f"\nmean target accuracy {mean:.4f} +/- {std:.4f} over {len(finals)} seed(s)\n"
    (out / "summary.txt").write_text(table)
    return summary


def _sweep_cell(args):
    config, gamma, seed = args
    try:
        final = run_single(config.replace(**{"bank.gamma": gamma}), seed)
        return {"gamma": gamma, "seed": seed, "accuracy": final.get("target_accuracy"), "error": None}
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
        log.error("sweep cell gamma=%s seed=%s failed: %s", gamma, seed, exc)
        return {"gamma": gamma, "seed": seed, "accuracy": None, "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class SweepResult:
    rows: list
    cells: list

    def table(self) -> str:
        return _format_table(self.rows, ("gamma", "mean", "std", "n", "n_failed"))


def sweep_gamma(config: ExperimentConfig, gammas: Sequence[float] = DEFAULT_GAMMAS,
                seeds: Optional[Sequence[int]] = None, out_dir=None, jobs: int = 1) -> SweepResult:
    """Mean and std of final target accuracy for every bank pace in ``gammas``.

    Cells are independent, so ``jobs > 1`` runs them in worker processes
    with identical results.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    cells_in = [(config, float(g), int(s)) for g in gammas for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_sweep_cell, cells_in))
    else:
        cells = [_sweep_cell(c) for c in cells_in]
    rows = []
    for g in gammas:
        accs = [c["accuracy"] for c in cells if c["gamma"] == float(g)]
        mean, std = _mean_std(accs)
        rows.append({"gamma": float(g), "mean": mean, "std": std,
                     "n": sum(a is not None for a in accs), "n_failed": sum(a is None for a in accs),
                     "accuracies": accs})
    result = SweepResult(rows, cells)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_config(config, out / "resolved_config.yaml")
        (out / "sweep.json").write_text(json.dumps({"rows": rows, "cells": cells}, indent=2))
        _write_table(out / "sweep.csv", rows, ("gamma", "mean", "std", "n", "n_failed"))
        (out / "sweep.txt").write_text(result.table())
    return result


class ReportError(RuntimeError):
    pass


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        raise ReportError(f"{path.parent}: missing metrics file {path.name}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _seed_dirs(run_dir: Path) -> list[Path]:
    if (run_dir / "metrics.jsonl").exists():
        return [run_dir]
    dirs = sorted(p for p in run_dir.glob("seed_*") if p.is_dir())
    if not dirs:
        raise ReportError(f"{run_dir}: missing metrics file metrics.jsonl")
    return dirs


def report(run_dirs: Sequence, out_dir, embeddings: bool = True) -> dict:
    """Aggregate finished runs into plain data files.

    Writes ``summary.json``/``summary.csv`` (final record per run and
    seed, per-run mean/std, and seed-paired accuracy differences against
    the first run), ``loss_curves.csv``, ``selection_curves.csv`` and,
    when checkpoints exist, ``embeddings/<run>_seed<s>.jsonl``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    finals, curves, runs = [], [], []
    for rd in map(Path, run_dirs):
        per_seed = {}
        for sd in _seed_dirs(rd):
            records = _read_metrics(sd / "metrics.jsonl")
            if not records:
                raise ReportError(f"{sd}: empty metrics file")
            seed = int(sd.name.split("_", 1)[1]) if sd.name.startswith("seed_") else 0
            final = records[-1]
            per_seed[seed] = final
            finals.append({"run": str(rd), "seed": seed, **final})
            curves += [{"run": str(rd), "seed": seed, **r} for r in records]
            ckpt = sd / "checkpoint.pt"
            if embeddings and ckpt.exists():
                extractor, _, _, cfg, ck_seed = load_checkpoint(ckpt)
                (out / "embeddings").mkdir(exist_ok=True)
                export_embeddings(extractor, episode_for(cfg, ck_seed),
                                  out / "embeddings" / f"{rd.name}_seed{seed}.jsonl")
        mean, std = _mean_std([f.get("target_accuracy") for f in per_seed.values()])
        runs.append({"run": str(rd), "final": per_seed, "mean_accuracy": mean, "std_accuracy": std})
    mean, std = _mean_std([f.get("target_accuracy") for f in finals])
    paired = []
    if len(runs) > 1:
        ref = runs[0]
        for other in runs[1:]:
            common = sorted(set(ref["final"]) & set(other["final"]))
            diffs = [other["final"][s]["target_accuracy"] - ref["final"][s]["target_accuracy"] for s in common]
            dmean, dstd = _mean_std(diffs)
            paired.append({"reference": ref["run"], "run": other["run"], "seeds": common,
                           "differences": diffs, "mean_difference": dmean, "std_difference": dstd})
    summary = {"runs": runs, "paired": paired, "mean_accuracy": mean, "std_accuracy": std,
               "n_cells": len(finals)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    _write_table(out / "summary.csv", finals, ("run",) + SUMMARY_FIELDS)
    loss_fields = ("run", "seed", "iteration", "loss_total", "loss_cls", "loss_mmd", "loss_pseudo",
                   "loss_perturb", "loss_ent", "target_accuracy")
    _write_table(out / "loss_curves.csv", curves, loss_fields)
    _write_table(out / "selection_curves.csv", curves,
                 ("run", "seed", "iteration", "n_dist", "n_ent", "n_pse", "pseudo_precision", "bank_drift_deg"))
    return summary
