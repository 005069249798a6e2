"""NER corpus data model, JSONL persistence, and a synthetic corpus generator.

The on-disk format is JSONL, one record per line:

    {"text": "...", "entities": [{"start": 0, "end": 8, "type": "disease",
     "surface": "COVID-19"}], "source_id": "..."}

Offsets are character based (Unicode scalar values) and end-exclusive, so the
surface of a mention always equals ``text[start:end]``.

The synthetic generator stands in for a large distantly-supervised corpus: it
emits instances whose entity type is recoverable from a type-specific context
template, which gives small models a learnable in-context signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, CorpusParseError, ValidationError

__all__ = [
    "EntityMention",
    "NerInstance",
    "SyntheticCorpusSpec",
    "ValidationReport",
    "load_corpus",
    "save_corpus",
    "validate_instance",
    "generate_synthetic_corpus",
    "corpus_types",
    "split_by_types",
]


@dataclass(frozen=True)
class EntityMention:
    """One typed mention, located by character offsets into the owning text."""

    start: int
    end: int
    type_name: str
    surface: str


@dataclass(frozen=True)
class NerInstance:
    """A (text, entities) pair. An empty entity tuple denotes a NIL instance."""

    text: str
    entities: tuple[EntityMention, ...]
    source_id: str = ""

    def types(self) -> set[str]:
        return {m.type_name for m in self.entities}


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_instance(inst: NerInstance) -> ValidationReport:
    """Check all mention invariants; returns a report instead of raising."""
    issues: list[str] = []
    seen: set[tuple[int, int, str]] = set()
    for i, m in enumerate(inst.entities):
        where = f"mention {i} ({m.type_name!r})"
        if not m.type_name:
            issues.append(f"{where}: empty type name")
        if not (0 <= m.start < m.end):
            issues.append(f"{where}: invalid offsets ({m.start}, {m.end})")
        elif m.end > len(inst.text):
            issues.append(f"{where}: span out of bounds ({m.start}, {m.end})")
        elif inst.text[m.start : m.end] != m.surface:
            issues.append(
                f"{where}: surface mismatch, "
                f"{inst.text[m.start:m.end]!r} != {m.surface!r}"
            )
        key = (m.start, m.end, m.type_name)
        if key in seen:
            issues.append(f"{where}: duplicate (start, end, type) {key}")
        seen.add(key)
    return ValidationReport(tuple(issues))


def _mention_to_dict(m: EntityMention) -> dict:
    return {"start": m.start, "end": m.end, "type": m.type_name, "surface": m.surface}


def _instance_to_dict(inst: NerInstance) -> dict:
    return {
        "text": inst.text,
        "entities": [_mention_to_dict(m) for m in inst.entities],
        "source_id": inst.source_id,
    }


def _instance_from_dict(rec: dict) -> NerInstance:
    entities = tuple(
        EntityMention(
            start=int(e["start"]),
            end=int(e["end"]),
            type_name=str(e["type"]),
            surface=str(e["surface"]),
        )
        for e in rec.get("entities", [])
    )
    return NerInstance(
        text=str(rec["text"]),
        entities=entities,
        source_id=str(rec.get("source_id", "")),
    )


def load_corpus(path: str | Path) -> list[NerInstance]:
    """Load and validate a JSONL corpus; instances come back in file order."""
    path = Path(path)
    instances: list[NerInstance] = []
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                raise CorpusParseError(path, line_no, "blank line in corpus file")
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(path, line_no, f"malformed JSON: {exc}") from exc
            try:
                inst = _instance_from_dict(rec)
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusParseError(path, line_no, f"bad record: {exc}") from exc
            report = validate_instance(inst)
            if not report.ok:
                raise ValidationError(
                    f"{path}:{line_no}: record {inst.source_id or line_no}: "
                    + "; ".join(report.issues)
                )
            instances.append(inst)
    return instances


def save_corpus(instances: Iterable[NerInstance], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(_instance_to_dict(inst), ensure_ascii=False) + "\n")


def corpus_types(instances: Iterable[NerInstance]) -> dict[str, int]:
    """Instance count per type (an instance counts once per type it contains)."""
    counts: dict[str, int] = {}
    for inst in instances:
        for t in sorted(inst.types()):
            counts[t] = counts.get(t, 0) + 1
    return counts


def split_by_types(
    instances: Sequence[NerInstance], holdout_types: Iterable[str]
) -> tuple[list[NerInstance], list[NerInstance]]:
    """Split a corpus into (rest, holdout) by entity type.

    An instance goes to the holdout side iff it mentions at least one holdout
    type. NIL instances stay on the rest side.
    """
    holdout = set(holdout_types)
    rest_side: list[NerInstance] = []
    holdout_side: list[NerInstance] = []
    for inst in instances:
        (holdout_side if inst.types() & holdout else rest_side).append(inst)
    return rest_side, holdout_side


# --- synthetic corpus -------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _word_stream():
    """Deterministic stream of distinct pronounceable fake words."""
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    for a in syllables:
        for b in syllables:
            yield a + b
    for a in syllables:
        for b in syllables:
            for c in syllables:
                yield a + b + c


def _ordered_pairs(n_tokens: int):
    """Ordered token-index pairs in a diagonal order, so that a prefix of the
    pair list reuses a small prefix of the token inventory."""
    pairs = []
    for hi in range(1, n_tokens):
        for lo in range(hi):
            pairs.append((lo, hi))
            pairs.append((hi, lo))
    return pairs


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Recipe for a deterministic template-based corpus.

    Each type owns a distinct two-token entity surface and a distinct
    left/right context-marker pair; surfaces and markers are combinations
    drawn from small shared token pools, so every individual token occurs
    across many types. ``instances_per_type`` counts typed instances; on top
    of those, NIL instances (empty entity list) are added so that they make
    up ``nil_fraction`` of the final corpus (rounded down).
    """

    num_types: int
    instances_per_type: int
    vocabulary_size: int = 120
    nil_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_types < 1:
            raise ConfigurationError("num_types must be >= 1")
        if self.instances_per_type < 1:
            raise ConfigurationError("instances_per_type must be >= 1")
        if not 0.0 <= self.nil_fraction <= 1.0:
            raise ConfigurationError("nil_fraction must be in [0, 1]")


def _pool_size_for_pairs(n: int) -> int:
    """Smallest token pool whose ordered pairs cover n combinations."""
    size = 2
    while size * (size - 1) < n:
        size += 1
    return size


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> list[NerInstance]:
    """Generate a corpus; a pure function of the spec (seed included)."""
    words = _word_stream()
    pool = _pool_size_for_pairs(spec.num_types)
    n_fillers = spec.vocabulary_size - (spec.num_types + 2 * pool)
    if n_fillers < 8:
        raise ConfigurationError(
            f"vocabulary_size={spec.vocabulary_size} too small: need "
            f"{spec.num_types} type names, {2 * pool} template tokens and "
            "at least 8 filler words"
        )

    type_names = [next(words) for _ in range(spec.num_types)]
    surface_parts = [next(words) for _ in range(pool)]
    marker_parts = [next(words) for _ in range(pool)]
    fillers = [next(words) for _ in range(n_fillers)]

    pairs = _ordered_pairs(pool)
    surfaces = {
        t: f"{surface_parts[a]} {surface_parts[b]}"
        for t, (a, b) in zip(type_names, pairs)
    }
    markers = {
        t: (marker_parts[a], marker_parts[b]) for t, (a, b) in zip(type_names, pairs)
    }

    rng = np.random.default_rng(spec.seed)

    def filler_run(lo: int, hi: int) -> list[str]:
        return [fillers[i] for i in rng.integers(0, n_fillers, rng.integers(lo, hi + 1))]

    instances: list[NerInstance] = []
    for t in type_names:
        left, right = markers[t]
        for _ in range(spec.instances_per_type):
            head = filler_run(0, 2)
            tail = filler_run(1, 3)
            tokens = head + [left] + surfaces[t].split() + [right] + tail
            text = " ".join(tokens)
            start = len(" ".join(head)) + (1 if head else 0) + len(left) + 1
            end = start + len(surfaces[t])
            instances.append(
                NerInstance(
                    text=text,
                    entities=(EntityMention(start, end, t, surfaces[t]),),
                )
            )

    typed = len(instances)
    if spec.nil_fraction < 1.0:
        n_nil = int(spec.nil_fraction / (1.0 - spec.nil_fraction) * typed)
    else:
        raise ConfigurationError("nil_fraction must be < 1 for a non-empty corpus")
    for _ in range(n_nil):
        instances.append(NerInstance(text=" ".join(filler_run(3, 8)), entities=()))

    order = rng.permutation(len(instances))
    out = []
    for new_id, idx in enumerate(order):
        inst = instances[idx]
        out.append(
            NerInstance(
                text=inst.text,
                entities=inst.entities,
                source_id=f"syn-{new_id:05d}",
            )
        )
    return out
