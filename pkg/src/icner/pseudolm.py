"""Pseudo extraction language-modeling tasks from unlabeled text.

Spans that are informative within a small set of documents (frequent enough to
matter, rare enough to discriminate) are promoted to pseudo entities, assigned
random type indicators, and masked out of demonstration sentences. The model
then has to treat extraction as pattern completion over placeholders rather
than memorized surface/label pairs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import IN_CONTEXT, TRADITIONAL, canonical_whitespace
from .corpus import EntityMention, NerInstance
from .errors import SamplingError, ValidationError
from .sampler import InContextTask, SamplerConfig

__all__ = [
    "DocumentSet",
    "PseudoSpan",
    "MaskedText",
    "InsufficientSpansError",
    "select_informative_spans",
    "build_pseudo_task",
    "load_documents",
]

_WORD = re.compile(r"\w+")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


class InsufficientSpansError(SamplingError):
    """Document set yields too few informative spans; caller should draw
    another set."""


@dataclass(frozen=True)
class DocumentSet:
    docs: tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.docs) < 2:
            raise ValidationError("document set needs at least 2 documents")
        if any(not d.strip() for d in self.docs):
            raise ValidationError("document set contains an empty document")


@dataclass(frozen=True)
class PseudoSpan:
    surface: str
    doc_frequency: int
    max_in_doc_count: int


@dataclass(frozen=True)
class MaskedText:
    """Text with [MASKi] placeholders, numbered consecutively from 1 in order
    of appearance."""

    text_with_masks: str
    mask_map: dict[str, str]
    pseudo_type_map: dict[str, str]


def _word_runs(text: str) -> list[list[str]]:
    """Maximal runs of word tokens; punctuation acts as a span boundary."""
    runs: list[list[str]] = []
    current: list[str] = []
    for tok in re.findall(r"\w+|[^\w\s]", text):
        if _WORD.fullmatch(tok):
            current.append(tok)
        elif current:
            runs.append(current)
            current = []
    if current:
        runs.append(current)
    return runs


def _ngram_counts(text: str, max_n: int) -> dict[str, int]:
    counts: dict[str, int] = {}
    for run in _word_runs(text):
        for n in range(1, max_n + 1):
            for i in range(len(run) - n + 1):
                g = " ".join(run[i : i + n])
                counts[g] = counts.get(g, 0) + 1
    return counts


def select_informative_spans(
    docset: DocumentSet,
    max_n: int = 4,
    min_docs: int = 2,
    max_docs: int = 5,
    min_single_doc_count: int = 3,
) -> list[PseudoSpan]:
    """Spans worth treating as pseudo entities.

    A span qualifies if it occurs in [min_docs, max_docs] documents, or in
    exactly one document at least min_single_doc_count times. Spans are 1- to
    max_n-grams of word tokens that do not cross punctuation. Output is
    deduplicated and sorted by surface.
    """
    per_doc = [_ngram_counts(doc, max_n) for doc in docset.docs]
    doc_freq: dict[str, int] = {}
    max_count: dict[str, int] = {}
    for counts in per_doc:
        for g, c in counts.items():
            doc_freq[g] = doc_freq.get(g, 0) + 1
            if c > max_count.get(g, 0):
                max_count[g] = c
    out = []
    for g in sorted(doc_freq):
        df = doc_freq[g]
        if min_docs <= df <= max_docs or (
            df == 1 and max_count[g] >= min_single_doc_count
        ):
            out.append(PseudoSpan(g, df, max_count[g]))
    return out


def _occurrence_pattern(surface: str) -> re.Pattern:
    return re.compile(r"(?<!\w)" + re.escape(surface) + r"(?!\w)")


def _contains(surface: str, text: str) -> bool:
    return _occurrence_pattern(surface).search(text) is not None


def mask_text(
    text: str,
    entity_surfaces: dict[str, str],
    random_surfaces: Sequence[str] = (),
) -> MaskedText:
    """Replace surfaces with [MASKi] placeholders, left to right.

    Overlapping candidate occurrences are resolved greedily: earlier start
    wins, and at equal starts the longer surface wins. entity_surfaces maps
    surface -> type indicator; random_surfaces are masked without a type.
    """
    candidates = []
    for surface in set(entity_surfaces) | set(random_surfaces):
        for m in _occurrence_pattern(surface).finditer(text):
            candidates.append((m.start(), -(m.end() - m.start()), m.end(), surface))
    candidates.sort()
    picked = []
    cursor = 0
    for start, _, end, surface in candidates:
        if start >= cursor:
            picked.append((start, end, surface))
            cursor = end
    parts = []
    mask_map: dict[str, str] = {}
    type_map: dict[str, str] = {}
    prev = 0
    for i, (start, end, surface) in enumerate(picked, start=1):
        placeholder = f"[MASK{i}]"
        parts.append(text[prev:start])
        parts.append(placeholder)
        prev = end
        mask_map[placeholder] = surface
        if surface in entity_surfaces:
            type_map[placeholder] = entity_surfaces[surface]
    parts.append(text[prev:])
    return MaskedText("".join(parts), mask_map, type_map)


def _sentences(docset: DocumentSet) -> list[str]:
    seen = set()
    out = []
    for doc in docset.docs:
        for raw in _SENTENCE_SPLIT.split(doc):
            s = canonical_whitespace(raw)
            if s and s not in seen:
                seen.add(s)
                out.append(s)
    return out


def _masked_instance(masked: MaskedText) -> NerInstance:
    """Demonstration instance whose mentions are the typed placeholders."""
    mentions = []
    for placeholder, indicator in masked.pseudo_type_map.items():
        at = masked.text_with_masks.index(placeholder)
        mentions.append(
            EntityMention(at, at + len(placeholder), indicator, placeholder)
        )
    mentions.sort(key=lambda m: m.start)
    return NerInstance(masked.text_with_masks, tuple(mentions))


def build_pseudo_task(
    docset: DocumentSet,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    variant: str = IN_CONTEXT,
    max_random_spans: int = 2,
) -> InContextTask:
    """One pseudo extraction task over a document set.

    In the in-context variant, demonstrations are sentences with pseudo
    entities (plus up to max_random_spans untyped spans each) masked, the
    query sentence stays unmasked, and the gold output pairs each query
    surface with the indicator its demonstrations established. The
    traditional variant instead masks the query, lists the pseudo-entity
    surfaces as the target labels, and asks which placeholder realizes each
    label. Both variants draw from the same random stream so the choice of
    variant does not perturb later sampling.
    """
    if variant not in (IN_CONTEXT, TRADITIONAL):
        raise ValueError(f"unknown variant: {variant!r}")
    spans = select_informative_spans(docset)
    sentences = _sentences(docset)
    if len(sentences) < 2:
        raise InsufficientSpansError("document set has fewer than 2 sentences")
    query_text = sentences[int(rng.integers(len(sentences)))]
    demo_pool = [s for s in sentences if s != query_text]

    containing: dict[str, list[str]] = {}
    for sp in spans:
        hits = [s for s in demo_pool if _contains(sp.surface, s)]
        if hits:
            containing[sp.surface] = hits
    eligible = sorted(containing)
    if len(eligible) < cfg.N:
        raise InsufficientSpansError(
            f"{len(eligible)} establishable informative spans, need N={cfg.N}"
        )

    chosen_idx = rng.choice(len(eligible), cfg.N, replace=False)
    chosen = [eligible[int(i)] for i in chosen_idx]
    indicator_ids = rng.choice(cfg.num_indicators, cfg.N, replace=False)
    indicators = {
        surface: f"<type{int(j) + 1}>" for surface, j in zip(chosen, indicator_ids)
    }
    non_entity = [sp.surface for sp in spans if sp.surface not in indicators]

    demo_texts: list[str] = []
    for surface in chosen:
        pool = containing[surface]
        picks = rng.choice(len(pool), min(cfg.K, len(pool)), replace=False)
        for i in picks:
            if pool[int(i)] not in demo_texts:
                demo_texts.append(pool[int(i)])

    demos = []
    for text in demo_texts:
        present = [s for s in non_entity if _contains(s, text)]
        r = int(rng.integers(max_random_spans + 1)) if max_random_spans else 0
        extra: list[str] = []
        if r and present:
            picks = rng.choice(len(present), min(r, len(present)), replace=False)
            extra = [present[int(i)] for i in picks]
        demos.append(_masked_instance(mask_text(text, indicators, extra)))

    # Untyped spans for the traditional query mask, drawn before branching so
    # both variants consume the same amount of randomness.
    query_present = [s for s in non_entity if _contains(s, query_text)]
    r = int(rng.integers(max_random_spans + 1)) if max_random_spans else 0
    query_extra: list[str] = []
    if r and query_present:
        picks = rng.choice(len(query_present), min(r, len(query_present)), replace=False)
        query_extra = [query_present[int(i)] for i in picks]

    # In-context gold: query surfaces matching an established pseudo type.
    matches = []
    for surface, indicator in indicators.items():
        m = _occurrence_pattern(surface).search(query_text)
        if m:
            matches.append((m.start(), surface, indicator))
    matches.sort()
    gold_ic = tuple((surface, indicator) for _, surface, indicator in matches)

    if variant == IN_CONTEXT:
        return InContextTask(
            target_types=tuple(indicators[s] for s in chosen),
            demonstrations=tuple(demos),
            query=NerInstance(query_text, ()),
            gold_extractions=gold_ic,
            anonymization_map={},
            is_nil_query=not gold_ic,
        )

    # Traditional variant: mask the query, name the placeholder per label.
    surface_labels = {s: s for s in chosen}
    masked_query = mask_text(query_text, surface_labels, query_extra)
    mentions = []
    for placeholder, label in masked_query.pseudo_type_map.items():
        at = masked_query.text_with_masks.index(placeholder)
        mentions.append(EntityMention(at, at + len(placeholder), label, placeholder))
    mentions.sort(key=lambda m: m.start)
    gold_tr = tuple((m.surface, m.type_name) for m in mentions)
    return InContextTask(
        target_types=tuple(chosen),
        demonstrations=(),
        query=NerInstance(masked_query.text_with_masks, tuple(mentions)),
        gold_extractions=gold_tr,
        anonymization_map={},
        is_nil_query=not gold_tr,
    )


def load_documents(paths: Iterable[str | Path]) -> list[DocumentSet]:
    """Read plain-text files into document sets.

    Each file becomes one set; blank-line-separated blocks within a file are
    its documents. A file without blank lines contributes a single document
    and is merged with the next such file until a set has at least 2 docs.
    """
    sets: list[DocumentSet] = []
    pending: list[str] = []
    for p in paths:
        text = Path(p).read_text(encoding="utf-8")
        blocks = [b.strip() for b in re.split(r"\n\s*\n", text) if b.strip()]
        if len(blocks) >= 2:
            sets.append(DocumentSet(tuple(blocks)))
        elif blocks:
            pending.extend(blocks)
            if len(pending) >= 2:
                sets.append(DocumentSet(tuple(pending)))
                pending = []
    if pending:
        raise ValidationError("leftover single document cannot form a set")
    return sets
