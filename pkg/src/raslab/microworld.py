"""Synthetic attribute-membership MCQ universe.

A micro-world is a set of made-up entities, a set of made-up attributes with
one-sentence definitions, and a boolean fact table (entity has attribute).
Questions ask "Which one is <attribute>?" over an option set containing
exactly one entity that satisfies the attribute, so every question has a
unique gold answer and the three-stage reasoning chain is fully derivable:
general knowledge is the attribute definition, option-specific knowledge is
the per-entity membership verdict, and the summary names the gold label.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .corpus import QuestionRecord, ReasoningTrace


class WorldError(Exception):
    pass


class InfeasibleWorld(WorldError):
    """The requested world sizes cannot satisfy the unique-gold constraint."""


class ForeignRecord(WorldError):
    """A question record was not generated from this world."""


QUESTION_TEMPLATE = "Which one is {attribute}?"
_STEM_RE = re.compile(r"^Which one is ([a-z]+)\?$")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_ADJ_SUFFIXES = ("y", "ish", "ous", "ic", "al", "ine")
_DEF_VERBS = ("keeps", "carries", "shows", "holds", "hides", "shares", "seeks", "guards")

# Words that appear in question/stage templates; generated names must avoid
# them so the student's token-level task stays unambiguous.
_RESERVED = {
    "which", "one", "is", "options", "recall", "analyze", "summarize", "for",
    "option", "correct", "incorrect", "because", "not", "therefore", "the",
    "answer", "something", "if", "it",
} | set(_DEF_VERBS)


@dataclass(frozen=True)
class Attribute:
    name: str
    definition: str


@dataclass(frozen=True)
class Entity:
    name: str
    attributes: frozenset[str]


@dataclass(frozen=True)
class MicroWorld:
    seed: int
    entities: tuple[Entity, ...]
    attributes: tuple[Attribute, ...]
    templates: tuple[str, ...]

    def entity(self, name: str) -> Optional[Entity]:
        for entity in self.entities:
            if entity.name == name:
                return entity
        return None

    def attribute(self, name: str) -> Optional[Attribute]:
        for attribute in self.attributes:
            if attribute.name == name:
                return attribute
        return None


def _make_word(rng: random.Random, n_syllables: int, used: set[str], suffix: str = "") -> str:
    for _ in range(1000):
        word = "".join(
            rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(n_syllables)
        )
        if rng.random() < 0.5:
            word += rng.choice(_CONSONANTS)
        word += suffix
        if word not in used and word not in _RESERVED:
            used.add(word)
            return word
    raise InfeasibleWorld("name pool exhausted")


def gen_microworld(
    seed: int,
    n_questions: int,
    n_options: int,
    n_attributes: int,
    n_entities: Optional[int] = None,
) -> tuple[MicroWorld, list[QuestionRecord]]:
    """Generate a world and its question set, deterministically from the seed.

    Every question has exactly one option whose entity satisfies the queried
    attribute. Raises InfeasibleWorld when the sizes cannot support that.
    """
    if n_options < 2:
        raise InfeasibleWorld("need at least 2 options")
    if n_attributes < n_options:
        raise InfeasibleWorld("need at least as many attributes as options")
    if n_questions < 1:
        raise InfeasibleWorld("need at least 1 question")
    if n_entities is None:
        n_entities = max(3 * n_options, 12)
    if n_entities < n_options:
        raise InfeasibleWorld("need at least as many entities as options")

    rng = random.Random(seed)
    used: set[str] = set()
    entity_names = [_make_word(rng, 2, used) for _ in range(n_entities)]
    attributes = []
    for _ in range(n_attributes):
        name = _make_word(rng, rng.choice((1, 2)), used, suffix=rng.choice(_ADJ_SUFFIXES))
        noun = _make_word(rng, 2, used)
        verb = rng.choice(_DEF_VERBS)
        attributes.append(Attribute(name, f"Something is {name} if it {verb} the {noun}."))

    # Fact table: each attribute holds for a mid-sized subset so that every
    # question can draw one holder and n_options-1 non-holders.
    holder_count = max(1, min(n_entities - (n_options - 1), (2 * n_entities) // 5))
    holders: dict[str, list[str]] = {}
    memberships: dict[str, set[str]] = {name: set() for name in entity_names}
    for attribute in attributes:
        chosen = rng.sample(entity_names, holder_count)
        holders[attribute.name] = chosen
        for name in chosen:
            memberships[name].add(attribute.name)

    entities = tuple(Entity(name, frozenset(memberships[name])) for name in entity_names)
    world = MicroWorld(seed, entities, tuple(attributes), (QUESTION_TEMPLATE,))

    records = []
    for i in range(n_questions):
        attribute = rng.choice(attributes)
        gold_entity = rng.choice(holders[attribute.name])
        non_holders = [n for n in entity_names if attribute.name not in memberships[n]]
        distractors = rng.sample(non_holders, n_options - 1)
        option_names = [gold_entity] + distractors
        rng.shuffle(option_names)
        labels = [chr(ord("A") + k) for k in range(n_options)]
        gold_label = labels[option_names.index(gold_entity)]
        records.append(
            QuestionRecord(
                id=f"mw{seed}-q{i:05d}",
                stem=QUESTION_TEMPLATE.format(attribute=attribute.name),
                options=tuple(zip(labels, option_names)),
                gold=gold_label,
            )
        )
    return world, records


def split_bucket(question_id: str) -> int:
    """Stable 0-9 bucket from the id; 0-7 train, 8 validation, 9 test."""
    digest = hashlib.md5(question_id.encode("utf-8")).hexdigest()
    return int(digest, 16) % 10


def split_records(
    records: Sequence[QuestionRecord],
) -> tuple[list[QuestionRecord], list[QuestionRecord], list[QuestionRecord]]:
    train, val, test = [], [], []
    for record in records:
        bucket = split_bucket(record.id)
        (train if bucket < 8 else val if bucket == 8 else test).append(record)
    return train, val, test


def make_summary_label(record: QuestionRecord) -> str:
    return f"Therefore, the answer is ({record.gold})."


def synth_trace(world: MicroWorld, record: QuestionRecord) -> ReasoningTrace:
    """Derive the exact reasoning trace for a world-generated question.

    Deterministic; raises ForeignRecord when the record's stem, options, or
    gold are inconsistent with the world's fact table.
    """
    match = _STEM_RE.match(record.stem)
    if not match:
        raise ForeignRecord(f"unrecognized stem: {record.stem!r}")
    attribute = world.attribute(match.group(1))
    if attribute is None:
        raise ForeignRecord(f"unknown attribute {match.group(1)!r}")
    specifics = {}
    correct_labels = []
    for label, entity_name in record.options:
        entity = world.entity(entity_name)
        if entity is None:
            raise ForeignRecord(f"unknown entity {entity_name!r}")
        if attribute.name in entity.attributes:
            correct_labels.append(label)
            specifics[label] = f"{label} is correct. Because {entity.name} is {attribute.name}."
        else:
            specifics[label] = f"{label} is incorrect. Because {entity.name} is not {attribute.name}."
    if correct_labels != [record.gold]:
        raise ForeignRecord(
            f"question {record.id}: facts mark {correct_labels} correct, gold is {record.gold}"
        )
    return ReasoningTrace(
        question_id=record.id,
        general=attribute.definition,
        specifics=specifics,
        summary=make_summary_label(record),
        source="synthetic-oracle",
    )


# --- world serialization (world.json, used by the CLI) ----------------------

def world_to_json(world: MicroWorld) -> dict:
    return {
        "seed": world.seed,
        "entities": [
            {"name": e.name, "attributes": sorted(e.attributes)} for e in world.entities
        ],
        "attributes": [
            {"name": a.name, "definition": a.definition} for a in world.attributes
        ],
        "templates": list(world.templates),
    }


def world_from_json(obj: dict) -> MicroWorld:
    return MicroWorld(
        seed=obj["seed"],
        entities=tuple(
            Entity(e["name"], frozenset(e["attributes"])) for e in obj["entities"]
        ),
        attributes=tuple(
            Attribute(a["name"], a["definition"]) for a in obj["attributes"]
        ),
        templates=tuple(obj["templates"]),
    )
