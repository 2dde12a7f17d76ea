"""Self-reflection phase: two-pass preference collection and iterative
DPO+NLL refinement of the recall and analyze stages.

Pass 1 samples recall outputs at temperature and judges each by the verdict
of its greedy downstream chain; pass 2 fixes each question's preferred recall
and samples whole analyze sets, judged the same way. Winners and losers are
zipped into preference pairs. Training alternates recall-stage and
analyze-stage blocks with equal step counts; the summarize stage is never
refined. Collection always runs on the frozen start-of-iteration reference
model, so data generation and optimization stay separated.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import corpus
from .corpus import QuestionRecord, Stage, normalize_text
from .acquisition import StageIterator
from .model import (AdamW, Batch, DecodeConfig, SequenceTooLong, StudentModel,
                    decode)
from .model import autodiff as ad
from .model.autodiff import Tensor
from .pipeline import DecodeFn, PipelineVariant, analyze_input, run_chain

log = logging.getLogger(__name__)


class ReflectionError(Exception):
    pass


class NoPairsCollected(ReflectionError):
    """No preference pairs survived collection; the iteration is a no-op."""


@dataclass(frozen=True)
class ReflectionConfig:
    iterations: int = 5
    samples: int = 10
    temperature: float = 0.7
    beta: float = 0.5
    alpha: float = 0.5
    epochs: int = 10
    batch_size: int = 64
    lr: float = 5e-6
    max_pairs: int = 4
    max_new_tokens: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0 or self.alpha < 0:
            raise ValueError("beta must be positive and alpha non-negative")
        if self.samples < 2:
            raise ValueError("need at least 2 samples per question")
        if min(self.iterations, self.epochs, self.batch_size,
               self.max_pairs, self.max_new_tokens) < 0:
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class PreferencePair:
    stage: Stage
    question_id: str
    option_label: Optional[str]
    input: str
    preferred: str
    dispreferred: str
    iteration: int

    def __post_init__(self):
        if self.stage not in (Stage.RECALL, Stage.ANALYZE):
            raise ValueError("preference pairs exist only for recall and analyze")
        if (self.option_label is not None) != (self.stage is Stage.ANALYZE):
            raise ValueError("option_label is required exactly for analyze pairs")
        if normalize_text(self.preferred) == normalize_text(self.dispreferred):
            raise ValueError("preferred and dispreferred must differ")


@dataclass
class PreferenceDataset:
    pairs: list[PreferencePair]
    iteration: int
    collection_pass: int

    def __post_init__(self):
        seen = set()
        unique = []
        for pair in self.pairs:
            key = (normalize_text(pair.input), normalize_text(pair.preferred),
                   normalize_text(pair.dispreferred))
            if key in seen:
                continue
            seen.add(key)
            unique.append(pair)
        self.pairs = unique

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class IterationState:
    t: int
    policy: StudentModel
    reference: StudentModel


def derive_seed(*parts) -> int:
    """Stable per-question rng stream seed from hashed string parts."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _distinct(texts: Sequence[str]) -> list[str]:
    seen = set()
    out = []
    for text in texts:
        key = normalize_text(text)
        if key not in seen:
            seen.add(key)
            out.append(text)
    return out


def collect_recall_pairs(
    model: StudentModel,
    records: Sequence[QuestionRecord],
    cfg: ReflectionConfig,
    iteration: int = 1,
    decode_fn: DecodeFn = decode,
) -> tuple[PreferenceDataset, dict[str, str]]:
    """Pass 1: sample recalls, judge by the greedy chain, pair winners/losers.

    Returns the preference dataset and one preferred recall per question that
    had at least one correct chain (first correct sample wins).
    """
    pairs: list[PreferencePair] = []
    preferred: dict[str, str] = {}
    skipped = 0
    for record in records:
        try:
            chains = []
            for i in range(cfg.samples):
                recall_cfg = DecodeConfig(
                    mode="temperature", temperature=cfg.temperature,
                    max_new_tokens=cfg.max_new_tokens,
                    seed=derive_seed(cfg.seed, record.id, "recall", iteration, i))
                chains.append(run_chain(
                    model, record, PipelineVariant.FULL,
                    max_new_tokens=cfg.max_new_tokens, decode_fn=decode_fn,
                    recall_cfg=recall_cfg))
        except SequenceTooLong:
            skipped += 1
            continue
        winners = _distinct([c.general for c in chains if c.correct])
        losers = _distinct([c.general for c in chains if not c.correct])
        if winners:
            preferred[record.id] = winners[0]
        recall_input = corpus.format_stage_input(record, Stage.RECALL)
        emitted = 0
        for won, lost in zip(winners, losers):
            if normalize_text(won) == normalize_text(lost):
                continue
            pairs.append(PreferencePair(Stage.RECALL, record.id, None,
                                        recall_input, won, lost, iteration))
            emitted += 1
            if emitted >= cfg.max_pairs:
                break
    if skipped:
        log.warning("recall collection skipped %d questions (decode errors)", skipped)
    return PreferenceDataset(pairs, iteration, collection_pass=1), preferred


def collect_analyze_pairs(
    model: StudentModel,
    records: Sequence[QuestionRecord],
    preferred_recalls: dict[str, str],
    cfg: ReflectionConfig,
    iteration: int = 1,
    decode_fn: DecodeFn = decode,
) -> PreferenceDataset:
    """Pass 2: with the preferred recall fixed, sample whole analyze sets and
    split each winning/losing set into per-option pairs."""
    pairs: list[PreferencePair] = []
    skipped_no_recall = 0
    skipped_errors = 0
    for record in records:
        general = preferred_recalls.get(record.id)
        if general is None:
            skipped_no_recall += 1
            continue
        try:
            sets = []
            for i in range(cfg.samples):
                def analyze_cfg(label, _i=i):
                    return DecodeConfig(
                        mode="temperature", temperature=cfg.temperature,
                        max_new_tokens=cfg.max_new_tokens,
                        seed=derive_seed(cfg.seed, record.id, "analyze",
                                         iteration, _i, label))
                sets.append(run_chain(
                    model, record, PipelineVariant.FULL,
                    max_new_tokens=cfg.max_new_tokens, decode_fn=decode_fn,
                    general=general, analyze_cfg_for=analyze_cfg))
        except SequenceTooLong:
            skipped_errors += 1
            continue
        winners = [c for c in sets if c.correct]
        losers = [c for c in sets if not c.correct]
        for label in record.labels:
            input_text = analyze_input(record, general, label, PipelineVariant.FULL)
            emitted = 0
            for won, lost in zip(winners, losers):
                won_text = won.specifics[label]
                lost_text = lost.specifics[label]
                if normalize_text(won_text) == normalize_text(lost_text):
                    continue
                pairs.append(PreferencePair(Stage.ANALYZE, record.id, label,
                                            input_text, won_text, lost_text, iteration))
                emitted += 1
                if emitted >= cfg.max_pairs:
                    break
    if skipped_no_recall:
        log.info("analyze collection skipped %d questions without a preferred recall",
                 skipped_no_recall)
    if skipped_errors:
        log.warning("analyze collection skipped %d questions (decode errors)",
                    skipped_errors)
    return PreferenceDataset(pairs, iteration, collection_pass=2)


# --- DPO + NLL objective -----------------------------------------------------

def dpo_nll_loss(policy, reference, pair: PreferencePair, beta: float,
                 alpha: float) -> tuple[float, dict[str, np.ndarray]]:
    """Preference loss on one pair; gradients flow only through the policy.

    The preference term uses unnormalized sequence log probabilities; the
    stabilizing NLL term on the preferred output is length-normalized.
    Models just need ``label_log_prob_graph`` (policy) and ``label_log_prob``
    (reference), so a pinned-logit stand-in works for oracle tests.
    """
    policy.zero_grad()
    pol_w, len_w = policy.label_log_prob_graph(pair.input, pair.preferred)
    pol_l, _ = policy.label_log_prob_graph(pair.input, pair.dispreferred)
    ref_w, _ = reference.label_log_prob(pair.input, pair.preferred)
    ref_l, _ = reference.label_log_prob(pair.input, pair.dispreferred)
    margin = ad.add(ad.add(pol_w, ad.scale(pol_l, -1.0)), Tensor(-(ref_w - ref_l)))
    loss = ad.neg_log_sigmoid(ad.scale(margin, beta))
    if alpha:
        loss = ad.add(loss, ad.scale(pol_w, -alpha / len_w))
    loss.backward()
    return loss.item(), policy.grads()


def dpo_nll_batch_loss(policy: StudentModel, batch_w: Batch, batch_l: Batch,
                       ref_w: np.ndarray, ref_l: np.ndarray, beta: float,
                       alpha: float) -> Tensor:
    """Mean DPO+NLL loss over a batch of pairs (graph-tracked)."""
    pol_w = policy.sequence_log_prob_sums(batch_w)
    pol_l = policy.sequence_log_prob_sums(batch_l)
    margin = ad.add(ad.add(pol_w, ad.scale(pol_l, -1.0)), Tensor(-(ref_w - ref_l)))
    losses = ad.neg_log_sigmoid(ad.scale(margin, beta))
    if alpha:
        losses = ad.add(losses, ad.scale(
            ad.mul(pol_w, Tensor(1.0 / batch_w.label_lengths)), -alpha))
    return ad.mean_all(losses)


@dataclass
class _EncodedPair:
    ids_w: tuple[list[int], list[int]]
    ids_l: tuple[list[int], list[int]]
    ref_w: float
    ref_l: float


def _reference_scores(reference: StudentModel, pairs: Sequence[PreferencePair],
                      batch_size: int) -> list[_EncodedPair]:
    encoded = []
    texts = []
    for pair in pairs:
        ids_w = reference.encode_pair(pair.input, pair.preferred)
        ids_l = reference.encode_pair(pair.input, pair.dispreferred)
        encoded.append(_EncodedPair(ids_w, ids_l, 0.0, 0.0))
        texts.append((ids_w, ids_l))
    flat = [ids for pair in texts for ids in pair]
    scores = np.empty(len(flat))
    for start in range(0, len(flat), batch_size):
        chunk = flat[start:start + batch_size]
        batch = StudentModel.make_batch(chunk)
        scores[start:start + len(chunk)] = reference.sequence_log_prob_sums(batch).data
    for i, pair in enumerate(encoded):
        pair.ref_w = float(scores[2 * i])
        pair.ref_l = float(scores[2 * i + 1])
    return encoded


@dataclass
class IterationReport:
    iteration: int
    pair_counts: dict[str, int] = field(default_factory=dict)
    mean_losses: dict[str, float] = field(default_factory=dict)
    val_accuracy: Optional[float] = None
    aborted: bool = False
    datasets: dict[str, PreferenceDataset] = field(default_factory=dict)


def run_reflection_iteration(
    state: IterationState,
    records: Sequence[QuestionRecord],
    cfg: ReflectionConfig,
    *,
    recall_dpo: bool = True,
    analyze_dpo: bool = True,
    eval_fn: Optional[Callable[[StudentModel], float]] = None,
    decode_fn: DecodeFn = decode,
) -> tuple[IterationState, IterationReport]:
    """One collect-then-train iteration.

    Collection runs on the frozen reference; the policy starts from the
    reference and trains for cfg.epochs with alternating equal-length recall
    and analyze blocks. Raises NoPairsCollected (state unchanged) when
    neither enabled stage produced data.
    """
    iteration = state.t + 1
    report = IterationReport(iteration=iteration)
    recall_ds, preferred = collect_recall_pairs(
        state.reference, records, cfg, iteration, decode_fn)
    datasets: dict[Stage, PreferenceDataset] = {}
    if recall_dpo:
        datasets[Stage.RECALL] = recall_ds
        report.datasets["recall"] = recall_ds
        report.pair_counts["recall"] = len(recall_ds)
    if analyze_dpo:
        analyze_ds = collect_analyze_pairs(
            state.reference, records, preferred, cfg, iteration, decode_fn)
        datasets[Stage.ANALYZE] = analyze_ds
        report.datasets["analyze"] = analyze_ds
        report.pair_counts["analyze"] = len(analyze_ds)

    active = {stage: ds for stage, ds in datasets.items() if len(ds)}
    if not active:
        report.aborted = True
        raise NoPairsCollected(f"iteration {iteration} collected no pairs")

    policy = state.reference.clone()
    encoded = {stage: _reference_scores(state.reference, ds.pairs, cfg.batch_size)
               for stage, ds in active.items()}
    iterators = {stage: StageIterator(items, seed=[cfg.seed, iteration, idx])
                 for idx, (stage, items) in enumerate(sorted(
                     encoded.items(), key=lambda kv: kv[0].value))}
    steps_per_stage = max(math.ceil(len(items) / cfg.batch_size)
                          for items in encoded.values())
    optimizer = AdamW(policy, lr=cfg.lr)
    losses: dict[Stage, list[float]] = {stage: [] for stage in active}
    for _epoch in range(cfg.epochs):
        for stage in (Stage.RECALL, Stage.ANALYZE):
            if stage not in active:
                continue
            iterator = iterators[stage]
            for _step in range(steps_per_stage):
                chunk = iterator.next_batch(cfg.batch_size)
                batch_w = StudentModel.make_batch([c.ids_w for c in chunk])
                batch_l = StudentModel.make_batch([c.ids_l for c in chunk])
                ref_w = np.array([c.ref_w for c in chunk])
                ref_l = np.array([c.ref_l for c in chunk])
                policy.zero_grad()
                loss = dpo_nll_batch_loss(policy, batch_w, batch_l, ref_w, ref_l,
                                          cfg.beta, cfg.alpha)
                loss.backward()
                optimizer.step(policy.grads())
                losses[stage].append(loss.item())
    report.mean_losses = {stage.value: float(np.mean(vals))
                          for stage, vals in losses.items() if vals}
    if eval_fn is not None:
        report.val_accuracy = eval_fn(policy)
    return IterationState(t=iteration, policy=policy, reference=policy), report


@dataclass
class ReflectionResult:
    final_model: StudentModel
    best_model: StudentModel
    reports: list[IterationReport] = field(default_factory=list)


REFLECTION_METRICS_HEADER = ("iteration", "stage", "pairs", "mean_loss", "val_accuracy")


def run_self_reflection(
    model: StudentModel,
    records: Sequence[QuestionRecord],
    cfg: ReflectionConfig,
    *,
    recall_dpo: bool = True,
    analyze_dpo: bool = True,
    eval_fn: Optional[Callable[[StudentModel], float]] = None,
    decode_fn: DecodeFn = decode,
    run_dir: Optional[str] = None,
) -> ReflectionResult:
    """Run cfg.iterations reflection iterations from an acquisition-trained
    model; aborted iterations leave the state unchanged and are reported."""
    state = IterationState(t=0, policy=model, reference=model)
    reports: list[IterationReport] = []
    best_model = model
    best_accuracy = -1.0
    for _ in range(cfg.iterations):
        try:
            state, report = run_reflection_iteration(
                state, records, cfg, recall_dpo=recall_dpo,
                analyze_dpo=analyze_dpo, eval_fn=eval_fn, decode_fn=decode_fn)
        except NoPairsCollected:
            report = IterationReport(iteration=state.t + 1, aborted=True)
            state = IterationState(t=state.t + 1, policy=state.policy,
                                   reference=state.reference)
            log.info("iteration %d aborted: no pairs collected", report.iteration)
        reports.append(report)
        if run_dir is not None:
            for stage_name, dataset in report.datasets.items():
                path = os.path.join(run_dir, f"pairs_{stage_name}_iter{report.iteration}.jsonl")
                corpus.write_jsonl(path, (pair_to_json(p) for p in dataset.pairs))
        if report.val_accuracy is not None and report.val_accuracy > best_accuracy:
            best_accuracy = report.val_accuracy
            best_model = state.reference
    if run_dir is not None:
        write_reflection_metrics(os.path.join(run_dir, "reflection_metrics.csv"), reports)
    return ReflectionResult(final_model=state.reference, best_model=best_model,
                            reports=reports)


def write_reflection_metrics(path, reports: Sequence[IterationReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(REFLECTION_METRICS_HEADER)
        for report in reports:
            stages = sorted(report.pair_counts) or ["-"]
            for stage in stages:
                writer.writerow([
                    report.iteration, stage,
                    report.pair_counts.get(stage, 0),
                    f"{report.mean_losses.get(stage, float('nan')):.10f}",
                    "" if report.val_accuracy is None else f"{report.val_accuracy:.6f}",
                ])


def pair_to_json(pair: PreferencePair) -> dict:
    return {
        "stage": pair.stage.value,
        "question_id": pair.question_id,
        "option_label": pair.option_label,
        "input": pair.input,
        "preferred": pair.preferred,
        "dispreferred": pair.dispreferred,
        "iteration": pair.iteration,
    }


def pair_from_json(obj: dict) -> PreferencePair:
    allowed = {"stage", "question_id", "option_label", "input", "preferred",
               "dispreferred", "iteration"}
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown fields: {sorted(unknown)}")
    return PreferencePair(
        stage=Stage(obj["stage"]), question_id=obj["question_id"],
        option_label=obj.get("option_label"), input=obj["input"],
        preferred=obj["preferred"], dispreferred=obj["dispreferred"],
        iteration=obj["iteration"])
