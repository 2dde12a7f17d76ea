"""Pipeline variants: training-data formats and inference chaining.

The four variants mirror the staged ablations: summarize-only answers
directly from the question; recall-summarize adds general knowledge;
analyze-summarize adds per-option knowledge without the recall section;
full chains all three stages. A variant fixes both how stage datasets are
built and how inference walks the stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

from . import corpus
from .corpus import (QuestionRecord, ReasoningTrace, Stage, StageDatasets,
                     StageExample, ensure_period, format_question_header,
                     format_stage_input)
from .model import DecodeConfig, StudentModel, decode


class PipelineVariant(str, Enum):
    SUMMARIZE_ONLY = "summarize_only"
    RECALL_SUMMARIZE = "recall_summarize"
    ANALYZE_SUMMARIZE = "analyze_summarize"
    FULL = "full"

    @property
    def has_recall(self) -> bool:
        return self in (PipelineVariant.RECALL_SUMMARIZE, PipelineVariant.FULL)

    @property
    def has_analyze(self) -> bool:
        return self in (PipelineVariant.ANALYZE_SUMMARIZE, PipelineVariant.FULL)


def analyze_input(record: QuestionRecord, general: Optional[str], option_label: str,
                  variant: PipelineVariant = PipelineVariant.FULL) -> str:
    if variant.has_recall:
        return format_stage_input(record, Stage.ANALYZE, general=general,
                                  option_label=option_label)
    if option_label not in record.labels:
        raise corpus.UnknownLabel(f"question {record.id} has no option {option_label!r}")
    header = format_question_header(record)
    return f"{header}\n Analyze: For option {option_label},"


def summarize_input(record: QuestionRecord, general: Optional[str],
                    specifics: Optional[Mapping[str, str]],
                    variant: PipelineVariant = PipelineVariant.FULL) -> str:
    if variant is PipelineVariant.FULL:
        return format_stage_input(record, Stage.SUMMARIZE, general=general,
                                  specifics=specifics)
    header = format_question_header(record)
    if variant is PipelineVariant.SUMMARIZE_ONLY:
        return f"{header}\n Summarize:"
    if variant is PipelineVariant.RECALL_SUMMARIZE:
        if general is None:
            raise corpus.MissingKnowledge("recall_summarize needs general knowledge")
        return f"{header}\n Recall: {ensure_period(general)}\n Summarize:"
    # analyze_summarize: per-option knowledge without the recall section
    if specifics is None:
        raise corpus.MissingKnowledge("analyze_summarize needs per-option specifics")
    parts = []
    for label in record.labels:
        text = specifics.get(label)
        if text is None:
            raise corpus.MissingKnowledge(f"missing specifics for option {label}")
        parts.append(f"For option {label}, {ensure_period(text)}")
    return f"{header}\n Analyze: {' '.join(parts)}\n Summarize:"


def build_variant_datasets(
    records: Sequence[QuestionRecord],
    traces: Sequence[ReasoningTrace],
    variant: PipelineVariant,
) -> StageDatasets:
    """Stage datasets restricted and reformatted for a pipeline variant."""
    if variant is PipelineVariant.FULL:
        return corpus.build_stage_datasets(records, traces)
    by_id = {record.id: record for record in records}
    out = StageDatasets()
    for trace in traces:
        record = by_id.get(trace.question_id)
        if record is None:
            raise corpus.DanglingTrace(f"trace references unknown question {trace.question_id!r}")
        trace.validate_against(record)
        if variant.has_recall:
            out.recall.append(StageExample(
                Stage.RECALL, record.id, None,
                format_stage_input(record, Stage.RECALL), trace.general))
        if variant.has_analyze:
            for label in record.labels:
                out.analyze.append(StageExample(
                    Stage.ANALYZE, record.id, label,
                    analyze_input(record, trace.general, label, variant),
                    trace.specifics[label]))
        out.summarize.append(StageExample(
            Stage.SUMMARIZE, record.id, None,
            summarize_input(record, trace.general, trace.specifics, variant),
            trace.summary))
    return out


@dataclass
class ChainResult:
    """Everything one inference walk produced, plus the verdict."""

    question_id: str
    general: Optional[str]
    specifics: dict[str, str] = field(default_factory=dict)
    summary: str = ""
    answer: Optional[str] = None
    correct: bool = False


DecodeFn = Callable[[StudentModel, str, DecodeConfig], str]


def greedy_config(max_new_tokens: int) -> DecodeConfig:
    return DecodeConfig(mode="greedy", max_new_tokens=max_new_tokens)


def run_chain(
    model: StudentModel,
    record: QuestionRecord,
    variant: PipelineVariant = PipelineVariant.FULL,
    *,
    max_new_tokens: int = 48,
    decode_fn: DecodeFn = decode,
    general: Optional[str] = None,
    recall_cfg: Optional[DecodeConfig] = None,
    analyze_cfg_for: Optional[Callable[[str], DecodeConfig]] = None,
) -> ChainResult:
    """Walk the variant's stages with greedy decoding by default.

    ``general`` short-circuits the recall stage (used by pass-2 preference
    collection); ``recall_cfg`` / ``analyze_cfg_for`` switch individual
    stages to temperature sampling during collection.
    """
    greedy = greedy_config(max_new_tokens)
    result = ChainResult(question_id=record.id, general=general)
    if variant.has_recall and result.general is None:
        recall_text = decode_fn(model, format_stage_input(record, Stage.RECALL),
                                recall_cfg or greedy)
        result.general = recall_text
    if variant.has_analyze:
        for label in record.labels:
            cfg = analyze_cfg_for(label) if analyze_cfg_for else greedy
            result.specifics[label] = decode_fn(
                model, analyze_input(record, result.general, label, variant), cfg)
    result.summary = decode_fn(
        model,
        summarize_input(record, result.general,
                        result.specifics if variant.has_analyze else None, variant),
        greedy)
    result.answer = corpus.extract_answer(result.summary, record)
    result.correct = result.answer == record.gold
    return result
