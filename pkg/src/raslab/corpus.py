"""MCQ data model, stage input/label formats, answer extraction, and JSONL I/O.

The stage input strings produced here are the contract between dataset
construction, training, and inference chaining: every other module treats
them as opaque bytes. Do not change the templates without regenerating
all downstream fixtures.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence


class Stage(str, Enum):
    RECALL = "recall"
    ANALYZE = "analyze"
    SUMMARIZE = "summarize"


class CorpusError(Exception):
    """Base class for corpus-level failures."""


class MissingKnowledge(CorpusError):
    """A stage input required knowledge text that was not supplied."""


class UnknownLabel(CorpusError):
    """An option label does not exist on the referenced question."""


class DanglingTrace(CorpusError):
    """A reasoning trace references a question id that is not in the corpus."""


class InvalidTrace(CorpusError):
    """A reasoning trace is inconsistent with its question (wrong option set)."""


class MalformedLine(CorpusError):
    """A JSONL line could not be decoded. Carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


_ANSWER_RE = re.compile(r"answer is \(([A-Za-z])\)", re.IGNORECASE)


def _require_nonempty(name: str, value: str) -> None:
    if not value.strip():
        raise ValueError(f"{name} must be non-empty after trimming")


@dataclass(frozen=True)
class QuestionRecord:
    """One multiple-choice question: stem, ordered lettered options, gold label."""

    id: str
    stem: str
    options: tuple[tuple[str, str], ...]
    gold: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("id must be non-empty")
        _require_nonempty("stem", self.stem)
        n = len(self.options)
        if not 2 <= n <= 26:
            raise ValueError(f"need between 2 and 26 options, got {n}")
        expected = tuple(string.ascii_uppercase[:n])
        labels = tuple(label for label, _ in self.options)
        if labels != expected:
            raise ValueError(f"labels must be consecutive letters from A, got {labels}")
        for label, text in self.options:
            _require_nonempty(f"option {label} text", text)
        if self.gold not in labels:
            raise ValueError(f"gold {self.gold!r} is not an option label")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)

    def option_text(self, label: str) -> str:
        for cand, text in self.options:
            if cand == label:
                return text
        raise UnknownLabel(f"question {self.id} has no option {label!r}")


@dataclass(frozen=True)
class ReasoningTrace:
    """One teacher-generated reasoning triple for a question.

    ``specifics`` maps every option label of the referenced question to its
    option-specific knowledge text (the per-option verdict sentence included).
    """

    question_id: str
    general: str
    specifics: Mapping[str, str]
    summary: str
    source: str = "synthetic-oracle"

    SOURCES = ("remote-teacher", "synthetic-oracle", "student-generated")

    def __post_init__(self) -> None:
        _require_nonempty("general", self.general)
        _require_nonempty("summary", self.summary)
        for label, text in self.specifics.items():
            _require_nonempty(f"specifics[{label}]", text)
        if self.source not in self.SOURCES:
            raise ValueError(f"unknown trace source {self.source!r}")

    def validate_against(self, record: QuestionRecord) -> None:
        if self.question_id != record.id:
            raise InvalidTrace(f"trace is for {self.question_id}, not {record.id}")
        if tuple(self.specifics.keys()) != record.labels:
            raise InvalidTrace(
                f"trace for {record.id} covers options {tuple(self.specifics)} "
                f"but the question has {record.labels}"
            )


@dataclass(frozen=True)
class StageExample:
    """One supervised (input, label) pair for a single stage."""

    stage: Stage
    question_id: str
    option_label: Optional[str]
    input: str
    label: str

    def __post_init__(self) -> None:
        if (self.option_label is not None) != (self.stage is Stage.ANALYZE):
            raise ValueError("option_label is required exactly for analyze examples")


@dataclass
class StageDatasets:
    recall: list[StageExample] = field(default_factory=list)
    analyze: list[StageExample] = field(default_factory=list)
    summarize: list[StageExample] = field(default_factory=list)

    def by_stage(self, stage: Stage) -> list[StageExample]:
        return getattr(self, stage.value)

    def counts(self) -> tuple[int, int, int]:
        return (len(self.recall), len(self.analyze), len(self.summarize))


def ensure_period(text: str) -> str:
    """Append a single terminal period when the text lacks one."""
    return text if text.endswith(".") else text + "."


def format_question_header(record: QuestionRecord) -> str:
    opts = " ".join(f"({label}) {text}" for label, text in record.options)
    return f"{record.stem} Options: {opts}"


def format_stage_input(
    record: QuestionRecord,
    stage: Stage,
    general: Optional[str] = None,
    specifics: Optional[Mapping[str, str]] = None,
    option_label: Optional[str] = None,
) -> str:
    """Render the exact stage input string.

    Knowledge texts are inserted verbatim except that a terminal period is
    appended when missing. Separators are "\\n " (newline + one space)
    before each stage cue.
    """
    header = format_question_header(record)
    if stage is Stage.RECALL:
        return f"{header}\n Recall:"
    if general is None:
        raise MissingKnowledge(f"{stage.value} input requires general knowledge")
    recall_part = f"{header}\n Recall: {ensure_period(general)}"
    if stage is Stage.ANALYZE:
        if option_label is None:
            raise MissingKnowledge("analyze input requires an option label")
        if option_label not in record.labels:
            raise UnknownLabel(f"question {record.id} has no option {option_label!r}")
        return f"{recall_part}\n Analyze: For option {option_label},"
    # Summarize: every option's specific knowledge, in label order.
    if specifics is None:
        raise MissingKnowledge("summarize input requires per-option specifics")
    parts = []
    for label in record.labels:
        text = specifics.get(label)
        if text is None:
            raise MissingKnowledge(f"summarize input is missing specifics for option {label}")
        parts.append(f"For option {label}, {ensure_period(text)}")
    return f"{recall_part}\n Analyze: {' '.join(parts)}\n Summarize:"


def build_stage_datasets(
    records: Sequence[QuestionRecord], traces: Sequence[ReasoningTrace]
) -> StageDatasets:
    """Reorganize reasoning traces into per-stage supervised examples.

    Each trace yields one recall example, one analyze example per option,
    and one summarize example, in trace order.
    """
    by_id = {record.id: record for record in records}
    out = StageDatasets()
    for trace in traces:
        record = by_id.get(trace.question_id)
        if record is None:
            raise DanglingTrace(f"trace references unknown question {trace.question_id!r}")
        trace.validate_against(record)
        out.recall.append(
            StageExample(Stage.RECALL, record.id, None,
                         format_stage_input(record, Stage.RECALL), trace.general)
        )
        for label in record.labels:
            out.analyze.append(
                StageExample(
                    Stage.ANALYZE, record.id, label,
                    format_stage_input(record, Stage.ANALYZE, general=trace.general,
                                       option_label=label),
                    trace.specifics[label],
                )
            )
        out.summarize.append(
            StageExample(
                Stage.SUMMARIZE, record.id, None,
                format_stage_input(record, Stage.SUMMARIZE, general=trace.general,
                                   specifics=trace.specifics),
                trace.summary,
            )
        )
    return out


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace runs; used as the dedup canon."""
    return " ".join(text.lower().split())


def dedup(datasets: StageDatasets) -> StageDatasets:
    """Drop examples whose (stage, input, label) repeat after normalization.

    First occurrence wins; relative order is otherwise preserved.
    """
    seen: set[tuple[str, str, str]] = set()
    out = StageDatasets()
    for stage in Stage:
        for example in datasets.by_stage(stage):
            key = (stage.value, normalize_text(example.input), normalize_text(example.label))
            if key in seen:
                continue
            seen.add(key)
            out.by_stage(stage).append(example)
    return out


def extract_answer(summary: str, record: QuestionRecord) -> Optional[str]:
    """Read the verdict out of a summary text.

    Scans for "answer is (X)" case-insensitively and returns the label from
    the last occurrence whose letter is a valid option label; None when no
    such occurrence exists. This is the binary judge used by evaluation and
    preference collection.
    """
    answer = None
    for match in _ANSWER_RE.finditer(summary):
        letter = match.group(1).upper()
        if letter in record.labels:
            answer = letter
    return answer


# --- JSONL serialization ---------------------------------------------------
#
# questions.jsonl uses the generic public MCQ shape:
#   {"id", "question", "choices": [{"label", "text"}, ...], "answerKey"}
# traces.jsonl and stage_*.jsonl mirror the dataclasses field-for-field.

_QUESTION_KEYS = {"id", "question", "choices", "answerKey"}
_TRACE_KEYS = {"question_id", "general", "specifics", "summary", "source"}
_EXAMPLE_KEYS = {"stage", "question_id", "option_label", "input", "label"}


def question_to_json(record: QuestionRecord) -> dict:
    return {
        "id": record.id,
        "question": record.stem,
        "choices": [{"label": label, "text": text} for label, text in record.options],
        "answerKey": record.gold,
    }


def question_from_json(obj: dict) -> QuestionRecord:
    _check_keys(obj, _QUESTION_KEYS)
    options = tuple((c["label"], c["text"]) for c in obj["choices"])
    return QuestionRecord(id=obj["id"], stem=obj["question"], options=options,
                          gold=obj["answerKey"])


def trace_to_json(trace: ReasoningTrace) -> dict:
    return {
        "question_id": trace.question_id,
        "general": trace.general,
        "specifics": dict(trace.specifics),
        "summary": trace.summary,
        "source": trace.source,
    }


def trace_from_json(obj: dict) -> ReasoningTrace:
    _check_keys(obj, _TRACE_KEYS)
    return ReasoningTrace(
        question_id=obj["question_id"],
        general=obj["general"],
        specifics=dict(obj["specifics"]),
        summary=obj["summary"],
        source=obj["source"],
    )


def example_to_json(example: StageExample) -> dict:
    return {
        "stage": example.stage.value,
        "question_id": example.question_id,
        "option_label": example.option_label,
        "input": example.input,
        "label": example.label,
    }


def example_from_json(obj: dict) -> StageExample:
    _check_keys(obj, _EXAMPLE_KEYS)
    return StageExample(
        stage=Stage(obj["stage"]),
        question_id=obj["question_id"],
        option_label=obj.get("option_label"),
        input=obj["input"],
        label=obj["label"],
    )


def _check_keys(obj: dict, allowed: set[str]) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown fields: {sorted(unknown)}")


def write_jsonl(path, objects: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for obj in objects:
            handle.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_jsonl(path, from_json):
    """Read one object per line, applying ``from_json`` to each.

    Raises MalformedLine (with the 1-based line number) on JSON errors,
    unknown fields, or records that fail validation.
    """
    items = []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                items.append(from_json(obj))
            except MalformedLine:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedLine(number, str(exc)) from exc
    return items


def write_questions(path, records: Sequence[QuestionRecord]) -> None:
    write_jsonl(path, (question_to_json(r) for r in records))


def read_questions(path) -> list[QuestionRecord]:
    return read_jsonl(path, question_from_json)


def write_traces(path, traces: Sequence[ReasoningTrace]) -> None:
    write_jsonl(path, (trace_to_json(t) for t in traces))


def read_traces(path) -> list[ReasoningTrace]:
    return read_jsonl(path, trace_from_json)


def write_examples(path, examples: Sequence[StageExample]) -> None:
    write_jsonl(path, (example_to_json(e) for e in examples))


def read_examples(path) -> list[StageExample]:
    return read_jsonl(path, example_from_json)
