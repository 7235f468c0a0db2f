"""AUC, seeded replication, and the two experiment protocols.

The delta sweep retrains at delta = 0.1 .. 1.0 and the length ablation
retrains the base model with and without the interest task at sequence
caps 10/20/50; both replicate over five seeds and report mean and sample
standard deviation of test AUC. Results go to a fixed-schema CSV plus a
JSON summary, written atomically; a failing cell persists what finished.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, NumericalError
from .fileio import write_json, write_text
from .models import forward_logit

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
SWEEP_DELTAS = tuple(round(0.1 * i, 1) for i in range(1, 11))
ABLATION_LENGTHS = (10, 20, 50)
CSV_HEADER = ("experiment", "model", "dataset", "seed", "delta", "lambda", "l", "auc")


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their rank range."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.shape[0])
    i = 0
    n = values.shape[0]
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + half credit for ties.

    Computed from average ranks in O(n log n); requires both classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise DimensionError(
            f"scores shape {scores.shape} and labels shape {labels.shape} must be equal 1-D")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("AUC scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be 0 or 1")
    pos = labels == 1
    n_pos = int(np.count_nonzero(pos))
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - 0.5 * n_pos * (n_pos + 1)) / (n_pos * n_neg))


def evaluate_auc(state, samples: list) -> float:
    """AUC of the frozen model over samples, scored by raw logits.

    The sigmoid is strictly monotone, so logits and probabilities give
    the same AUC.
    """
    if not samples:
        raise DomainError("cannot evaluate AUC on an empty sample list")
    scores = np.fromiter((forward_logit(state, s)[0] for s in samples), dtype=np.float64,
                         count=len(samples))
    labels = np.fromiter((s.label for s in samples), dtype=np.int64, count=len(samples))
    return auc(scores, labels)


@dataclass
class MetricRow:
    """One (experiment, model, seed) result with its hyperparameters echoed."""

    experiment: str
    model: str
    dataset: str
    seed: int
    auc: float
    auxiliary: bool
    delta: float
    lam: float
    l: int
    k_policy: str

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise DomainError(f"auc must be in [0, 1], got {self.auc}")

    def csv_values(self) -> tuple:
        return (self.experiment, self.model, self.dataset, self.seed, self.delta,
                self.lam, self.l, self.auc)

    def to_dict(self) -> dict:
        return vars(self).copy()


def write_metrics_csv(path: str, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.csv_values())
    write_text(path, buf.getvalue())


@dataclass
class ReplicateResult:
    mean: float
    sd: float
    rows: list


def replicate(run, seeds=DEFAULT_SEEDS) -> ReplicateResult:
    """Run per-seed, return mean and sample SD (n-1 denominator) of AUC."""
    seeds = tuple(seeds)
    if len(seeds) < 2:
        raise ConfigError(f"replication needs at least 2 seeds, got {len(seeds)}")
    rows = [run(seed) for seed in seeds]
    aucs = [row.auc if isinstance(row, MetricRow) else float(row) for row in rows]
    return ReplicateResult(mean=float(np.mean(aucs)), sd=float(np.std(aucs, ddof=1)),
                           rows=rows)


def run_experiment(experiment: str, config, dataset, seed: int,
                   model_name: "str | None" = None) -> MetricRow:
    """Train one configuration at one seed and score the test split."""
    from .training import train  # runtime import: training depends on evaluate_auc

    cfg = config.copy(seed=seed)
    state, _, _ = train(cfg, dataset)
    return MetricRow(
        experiment=experiment,
        model=model_name or cfg.base_model,
        dataset=dataset.source,
        seed=seed,
        auc=evaluate_auc(state, dataset.test),
        auxiliary=cfg.auxiliary,
        delta=cfg.delta if cfg.auxiliary else 1.0,
        lam=cfg.lam if cfg.auxiliary else 0.0,
        l=cfg.max_len,
        k_policy=f"floor_log2_clamped[{cfg.k_min},{cfg.k_max}]",
    )


@dataclass
class SweepResult:
    """(delta, mean auc, sample sd) per sweep point, plus the raw rows."""

    points: list
    rows: list = field(default_factory=list)

    def validate(self) -> None:
        deltas = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(deltas, deltas[1:])):
            raise DomainError(f"sweep deltas must be strictly increasing, got {deltas}")
        for delta, mean, sd in self.points:
            if not 0.0 <= mean <= 1.0 or sd < 0.0:
                raise DomainError(f"bad sweep point ({delta}, {mean}, {sd})")

    def to_dict(self) -> dict:
        return {"points": [{"delta": d, "mean_auc": m, "sd": s} for d, m, s in self.points]}


def _persist(out_dir: str, name: str, rows: list, summary: dict) -> None:
    write_metrics_csv(os.path.join(out_dir, f"{name}.csv"), rows)
    write_json(os.path.join(out_dir, f"{name}.json"), summary)


def delta_sweep(config, dataset, seeds=DEFAULT_SEEDS, out_dir: "str | None" = None,
                progress=None) -> SweepResult:
    """Retrain at each delta in 0.1 .. 1.0, replicated over seeds.

    If a cell fails mid-sweep, completed rows are persisted (summary
    marked partial) before the error propagates.
    """
    rows: list = []
    points: list = []
    try:
        for delta in SWEEP_DELTAS:
            cell = replicate(
                lambda seed: run_experiment("delta_sweep",
                                            config.copy(delta=delta, auxiliary=True),
                                            dataset, seed),
                seeds)
            rows.extend(cell.rows)
            points.append((delta, cell.mean, cell.sd))
            if progress is not None:
                progress(f"delta={delta}: mean auc {cell.mean:.4f} sd {cell.sd:.4f}")
    except BaseException:
        if out_dir is not None:
            summary = SweepResult(points).to_dict()
            summary["partial"] = True
            _persist(out_dir, "delta_sweep", rows, summary)
        raise
    result = SweepResult(points, rows)
    result.validate()
    if out_dir is not None:
        summary = result.to_dict()
        summary["partial"] = False
        _persist(out_dir, "delta_sweep", rows, summary)
    return result


@dataclass
class AblationResult:
    """Mean and SD of test AUC per (model variant, sequence cap) cell."""

    lengths: tuple
    models: tuple
    cells: dict
    rows: list = field(default_factory=list)

    def validate(self) -> None:
        expected = {(m, l) for m in self.models for l in self.lengths}
        if set(self.cells) != expected:
            raise DomainError(
                f"ablation grid must cover {len(expected)} cells, got {len(self.cells)}")
        for mean, sd in self.cells.values():
            if not 0.0 <= mean <= 1.0 or sd < 0.0:
                raise DomainError(f"bad ablation cell ({mean}, {sd})")

    def to_dict(self) -> dict:
        return {
            "lengths": list(self.lengths),
            "models": list(self.models),
            "cells": [
                {"model": m, "l": l, "mean_auc": self.cells[(m, l)][0],
                 "sd": self.cells[(m, l)][1]}
                for m in self.models for l in self.lengths if (m, l) in self.cells
            ],
        }


def length_ablation(config, dataset, seeds=DEFAULT_SEEDS, out_dir: "str | None" = None,
                    progress=None) -> AblationResult:
    """Base model with and without the interest task at each sequence cap.

    The dataset's behaviour windows must be at least as long as the
    largest cap for the cells to differ; each cell truncates to its own
    max_len at training and scoring time.
    """
    base = config.base_model
    models = (base, f"{base}_capsule")
    rows: list = []
    cells: dict = {}
    try:
        for length in ABLATION_LENGTHS:
            for model_name, auxiliary in ((models[0], False), (models[1], True)):
                cell = replicate(
                    lambda seed: run_experiment(
                        "length_ablation",
                        config.copy(max_len=length, auxiliary=auxiliary),
                        dataset, seed, model_name=model_name),
                    seeds)
                rows.extend(cell.rows)
                cells[(model_name, length)] = (cell.mean, cell.sd)
                if progress is not None:
                    progress(f"l={length} {model_name}: mean auc {cell.mean:.4f} "
                             f"sd {cell.sd:.4f}")
    except BaseException:
        if out_dir is not None:
            summary = AblationResult(ABLATION_LENGTHS, models, cells).to_dict()
            summary["partial"] = True
            _persist(out_dir, "length_ablation", rows, summary)
        raise
    result = AblationResult(ABLATION_LENGTHS, models, cells, rows)
    result.validate()
    if out_dir is not None:
        summary = result.to_dict()
        summary["partial"] = False
        _persist(out_dir, "length_ablation", rows, summary)
    return result
