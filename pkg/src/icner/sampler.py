"""In-context task construction: type/demonstration sampling, NIL queries,
and entity-type anonymization.

A task bundles N target types, K demonstrations per type, one query instance,
and the gold extractions for the query. Anonymization swaps type names for
opaque indicators consistently across the whole task, which forces a model to
read type semantics from the demonstrations instead of the names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import NerInstance, EntityMention
from .errors import ConfigurationError, SamplingError

__all__ = [
    "SamplerConfig",
    "InContextTask",
    "CorpusIndex",
    "sample_task",
    "anonymize_types",
    "dump_tasks",
    "load_tasks",
]


@dataclass(frozen=True)
class SamplerConfig:
    """Shape of sampled tasks.

    gamma is the NIL-query proportion; anonymize_prob is the per-type-name
    probability of substitution by a type indicator.
    """

    N: int = 10
    K: int = 10
    gamma: float = 0.2
    anonymize_prob: float = 0.8
    num_indicators: int = 99
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("N must be >= 1")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must be in [0, 1]")
        if not 0.0 <= self.anonymize_prob <= 1.0:
            raise ConfigurationError("anonymize_prob must be in [0, 1]")
        if self.num_indicators < self.N:
            raise ConfigurationError("num_indicators must be >= N")


@dataclass(frozen=True)
class InContextTask:
    """One pre-training task: (instruction, demonstrations, text, entities).

    ``target_types`` holds display labels (original names, or indicators once
    anonymized); ``anonymization_map`` maps original name -> indicator and is
    applied at rendering time to demonstration mentions. ``gold_extractions``
    is already rendered under that map.
    """

    target_types: tuple[str, ...]
    demonstrations: tuple[NerInstance, ...]
    query: NerInstance
    gold_extractions: tuple[tuple[str, str], ...]
    anonymization_map: dict[str, str]
    is_nil_query: bool


class CorpusIndex:
    """Instance lists per entity type, in corpus order."""

    def __init__(self, corpus: Sequence[NerInstance]):
        self.corpus = list(corpus)
        self.by_type: dict[str, list[int]] = {}
        for i, inst in enumerate(self.corpus):
            for t in sorted(inst.types()):
                self.by_type.setdefault(t, []).append(i)

    def eligible_types(self, min_instances: int) -> list[str]:
        return [t for t, idxs in self.by_type.items() if len(idxs) >= min_instances]


def _restrict(inst: NerInstance, types: set[str]) -> NerInstance:
    kept = tuple(m for m in inst.entities if m.type_name in types)
    return replace(inst, entities=kept)


def sample_task(
    corpus: Sequence[NerInstance] | CorpusIndex,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> InContextTask:
    """Draw one un-anonymized task; deterministic given the rng state.

    With probability gamma the query comes from instances containing none of
    the target types and the gold extraction list is empty.
    """
    index = corpus if isinstance(corpus, CorpusIndex) else CorpusIndex(corpus)
    eligible = index.eligible_types(cfg.K + 1)
    if len(eligible) < cfg.N:
        deficient = sorted(
            t for t, idxs in index.by_type.items() if len(idxs) < cfg.K + 1
        )
        raise SamplingError(
            f"corpus supports {len(eligible)} types with >= K+1={cfg.K + 1} "
            f"instances but N={cfg.N} were requested; deficient types: "
            f"{deficient[:5]}"
        )
    targets = [eligible[i] for i in rng.choice(len(eligible), cfg.N, replace=False)]
    target_set = set(targets)

    demo_ids: list[int] = []
    for t in targets:
        pool = index.by_type[t]
        picks = rng.choice(len(pool), cfg.K, replace=False)
        demo_ids.extend(pool[i] for i in picks)
    demos = tuple(_restrict(index.corpus[i], target_set) for i in demo_ids)

    is_nil = bool(rng.random() < cfg.gamma)
    if is_nil:
        candidates = [
            i
            for i, inst in enumerate(index.corpus)
            if not (inst.types() & target_set)
        ]
        if not candidates:
            raise SamplingError(
                "no NIL query candidates: every instance mentions a target type"
            )
        query = index.corpus[candidates[rng.integers(len(candidates))]]
        gold: tuple[tuple[str, str], ...] = ()
    else:
        t = targets[rng.integers(cfg.N)]
        used = set(demo_ids)
        candidates = [i for i in index.by_type[t] if i not in used]
        if not candidates:
            raise SamplingError(
                f"type {t!r} has no instance left for the query after "
                "demonstration sampling"
            )
        query = index.corpus[candidates[rng.integers(len(candidates))]]
        mentions = sorted(
            (m for m in query.entities if m.type_name in target_set),
            key=lambda m: (m.start, m.end),
        )
        gold = tuple((m.surface, m.type_name) for m in mentions)

    return InContextTask(
        target_types=tuple(targets),
        demonstrations=demos,
        query=query,
        gold_extractions=gold,
        anonymization_map={},
        is_nil_query=is_nil,
    )


def anonymize_types(
    task: InContextTask, anonymize_prob: float, rng: np.random.Generator,
    num_indicators: int = 99,
) -> InContextTask:
    """Independently replace each type name with a distinct indicator.

    Indicators are drawn uniformly without replacement per task; the same
    substitution applies to the instruction, the demonstration extraction
    strings, and the gold extractions. The input task is not mutated.
    """
    if task.anonymization_map:
        raise ConfigurationError("task is already anonymized")
    n = len(task.target_types)
    flags = rng.random(n) < anonymize_prob
    n_replace = int(flags.sum())
    if n_replace > num_indicators:
        raise ConfigurationError(
            f"{n_replace} types to replace but only {num_indicators} indicators"
        )
    drawn = rng.choice(num_indicators, n_replace, replace=False)
    indicators = [f"<type{int(i) + 1}>" for i in drawn]

    mapping: dict[str, str] = {}
    it = iter(indicators)
    for name, flag in zip(task.target_types, flags):
        if flag:
            mapping[name] = next(it)

    display = tuple(mapping.get(t, t) for t in task.target_types)
    gold = tuple((s, mapping.get(l, l)) for s, l in task.gold_extractions)
    return replace(
        task, target_types=display, gold_extractions=gold, anonymization_map=mapping
    )


# --- task dump format -------------------------------------------------------


def _instance_to_dict(inst: NerInstance) -> dict:
    return {
        "text": inst.text,
        "entities": [
            {"start": m.start, "end": m.end, "type": m.type_name, "surface": m.surface}
            for m in inst.entities
        ],
        "source_id": inst.source_id,
    }


def _instance_from_dict(d: dict) -> NerInstance:
    return NerInstance(
        text=d["text"],
        entities=tuple(
            EntityMention(e["start"], e["end"], e["type"], e["surface"])
            for e in d["entities"]
        ),
        source_id=d.get("source_id", ""),
    )


def task_to_dict(task: InContextTask) -> dict:
    return {
        "target_types": list(task.target_types),
        "demonstrations": [_instance_to_dict(d) for d in task.demonstrations],
        "query": _instance_to_dict(task.query),
        "gold_extractions": [list(pair) for pair in task.gold_extractions],
        "anonymization_map": dict(task.anonymization_map),
        "is_nil_query": task.is_nil_query,
    }


def task_from_dict(d: dict) -> InContextTask:
    return InContextTask(
        target_types=tuple(d["target_types"]),
        demonstrations=tuple(_instance_from_dict(x) for x in d["demonstrations"]),
        query=_instance_from_dict(d["query"]),
        gold_extractions=tuple((s, l) for s, l in d["gold_extractions"]),
        anonymization_map=dict(d["anonymization_map"]),
        is_nil_query=bool(d["is_nil_query"]),
    )


def dump_tasks(tasks: Iterable[InContextTask], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for task in tasks:
            f.write(json.dumps(task_to_dict(task), ensure_ascii=False) + "\n")


def load_tasks(path: str | Path) -> list[InContextTask]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(task_from_dict(json.loads(line)))
    return out
