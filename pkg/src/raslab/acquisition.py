"""Reasoning-acquisition phase: per-stage NLL training under the interleaved
recall -> analyze -> summarize cycle schedule.

One epoch is enough cycles to cover the summarize dataset at least once;
analyze gets proportionally more steps per cycle because the analyze dataset
is roughly |options| times larger. Stage iterators persist across cycles and
epochs and reshuffle per full pass, so examples are visited uniformly.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Stage, StageDatasets
from .model import AdamW, StudentModel, nll_loss_and_grad_batch, save_checkpoint


class AcquisitionError(Exception):
    pass


class EmptyStage(AcquisitionError):
    pass


class ConfigInvalid(AcquisitionError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    interval: int = 100
    epochs: int = 10
    batch_size: int = 64
    lr: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if min(self.interval, self.epochs, self.batch_size) < 1 or self.lr <= 0:
            raise ConfigInvalid("interval, epochs, batch_size must be >= 1 and lr > 0")


@dataclass(frozen=True)
class CyclePlan:
    recall_steps: int
    analyze_steps: int
    summarize_steps: int
    cycles_per_epoch: int

    def stage_steps(self) -> tuple[tuple[Stage, int], ...]:
        return (
            (Stage.RECALL, self.recall_steps),
            (Stage.ANALYZE, self.analyze_steps),
            (Stage.SUMMARIZE, self.summarize_steps),
        )

    @property
    def steps_per_epoch(self) -> int:
        return self.cycles_per_epoch * (
            self.recall_steps + self.analyze_steps + self.summarize_steps
        )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_from_counts(
    n_recall: int, n_analyze: int, n_summarize: int, cfg: ScheduleConfig
) -> CyclePlan:
    """Step counts per cycle from dataset sizes.

    Recall and summarize get ``interval`` steps; analyze gets interval scaled
    by its size ratio (at least interval). A stage with no data gets zero
    steps, which is how the ablation variants train. The epoch is anchored on
    the summarize dataset, which every variant has.
    """
    if n_summarize < 1:
        raise EmptyStage("summarize dataset is empty")
    recall_steps = cfg.interval if n_recall else 0
    if n_analyze:
        base = n_recall if n_recall else n_summarize
        analyze_steps = max(cfg.interval, _round_half_up(cfg.interval * n_analyze / base))
    else:
        analyze_steps = 0
    cycles = math.ceil(n_summarize / (cfg.interval * cfg.batch_size))
    return CyclePlan(recall_steps, analyze_steps, cfg.interval, cycles)


def plan_cycle(datasets: StageDatasets, cfg: ScheduleConfig) -> CyclePlan:
    return plan_from_counts(*datasets.counts(), cfg)


class StageIterator:
    """Persistent shuffled iterator; reshuffles per full pass."""

    def __init__(self, items: Sequence, seed):
        if not items:
            raise EmptyStage("cannot iterate an empty stage dataset")
        self.items = list(items)
        self.rng = np.random.default_rng(seed)
        self.order: Optional[np.ndarray] = None
        self.pos = 0
        self.visits = np.zeros(len(self.items), dtype=np.int64)

    def next_batch(self, size: int) -> list:
        out = []
        for _ in range(size):
            if self.order is None or self.pos >= len(self.items):
                self.order = self.rng.permutation(len(self.items))
                self.pos = 0
            index = int(self.order[self.pos])
            self.pos += 1
            self.visits[index] += 1
            out.append(self.items[index])
        return out


@dataclass
class AcquisitionResult:
    model: StudentModel              # best-validation checkpoint (final if no eval_fn)
    final_model: StudentModel
    metrics: list[dict] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)
    best_epoch: int = 0


METRICS_HEADER = ("epoch", "cycle", "stage", "step", "loss")


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row["epoch"], row["cycle"], row["stage"],
                             row["step"], f"{row['loss']:.10f}"])


def run_acquisition(
    model: StudentModel,
    datasets: StageDatasets,
    cfg: ScheduleConfig,
    eval_fn: Optional[Callable[[StudentModel], float]] = None,
    run_dir: Optional[str] = None,
) -> AcquisitionResult:
    """Train the student through the full interleaved schedule.

    ``eval_fn`` is called at each epoch end; the returned ``model`` is the
    checkpoint with the best validation accuracy (earliest epoch wins ties).
    Deterministic for a fixed (model seed, cfg.seed).
    """
    plan = plan_cycle(datasets, cfg)
    encoded = {}
    iterators = {}
    for index, stage in enumerate(Stage):
        examples = datasets.by_stage(stage)
        if not examples:
            continue
        encoded[stage] = [model.encode_pair(e.input, e.label) for e in examples]
        iterators[stage] = StageIterator(encoded[stage], seed=[cfg.seed, index])

    optimizer = AdamW(model, lr=cfg.lr)
    rows: list[dict] = []
    val_accuracies: list[float] = []
    best_epoch = 0
    best_accuracy = -1.0
    best_params: Optional[dict] = None

    for epoch in range(1, cfg.epochs + 1):
        for cycle in range(1, plan.cycles_per_epoch + 1):
            for stage, steps in plan.stage_steps():
                if steps == 0:
                    continue
                iterator = iterators[stage]
                for step in range(steps):
                    batch = model.make_batch(iterator.next_batch(cfg.batch_size))
                    loss, grads = nll_loss_and_grad_batch(model, batch)
                    optimizer.step(grads)
                    rows.append({"epoch": epoch, "cycle": cycle,
                                 "stage": stage.value, "step": step, "loss": loss})
        if eval_fn is not None:
            accuracy = eval_fn(model)
            val_accuracies.append(accuracy)
            if accuracy > best_accuracy:
                best_accuracy = accuracy
                best_epoch = epoch
                best_params = {n: p.data.copy() for n, p in model.params.items()}
        if run_dir is not None:
            save_checkpoint(model, os.path.join(run_dir, f"epoch_{epoch:03d}.ckpt"))

    if run_dir is not None:
        write_metrics_csv(os.path.join(run_dir, "acquisition_metrics.csv"), rows)

    if best_params is not None:
        best = StudentModel(model.config, model.vocab, params=best_params)
    else:
        best = model
        best_epoch = cfg.epochs
    return AcquisitionResult(model=best, final_model=model, metrics=rows,
                             val_accuracies=val_accuracies, best_epoch=best_epoch)
