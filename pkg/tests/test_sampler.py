import numpy as np
import pytest

from icner.codec import type_indicator
from icner.corpus import SyntheticCorpusSpec, generate_synthetic_corpus
from icner.errors import ConfigurationError, SamplingError
from icner.sampler import (
    CorpusIndex,
    SamplerConfig,
    anonymize_types,
    dump_tasks,
    load_tasks,
    sample_task,
    task_from_dict,
    task_to_dict,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(
        SyntheticCorpusSpec(num_types=8, instances_per_type=10,
                            vocabulary_size=70, nil_fraction=0.2, seed=5)
    )


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SamplerConfig(N=0)
    with pytest.raises(ConfigurationError):
        SamplerConfig(gamma=1.5)
    with pytest.raises(ConfigurationError):
        SamplerConfig(anonymize_prob=-0.1)
    with pytest.raises(ConfigurationError):
        SamplerConfig(N=10, num_indicators=9)


def test_task_shapes(corpus):
    cfg = SamplerConfig(N=3, K=2, gamma=0.0, seed=0)
    rng = np.random.default_rng(0)
    task = sample_task(corpus, cfg, rng)
    assert len(task.target_types) == 3
    assert len(set(task.target_types)) == 3
    assert len(task.demonstrations) == 6  # K per type
    # demonstrations carry only target-type mentions
    tset = set(task.target_types)
    for d in task.demonstrations:
        assert d.entities and d.types() <= tset


def test_demo_counts_per_type(corpus):
    cfg = SamplerConfig(N=4, K=2, gamma=0.0, seed=0)
    rng = np.random.default_rng(3)
    task = sample_task(corpus, cfg, rng)
    for i, t in enumerate(task.target_types):
        chunk = task.demonstrations[2 * i : 2 * i + 2]
        assert all(t in d.types() for d in chunk)


def test_gold_extractions_sorted_and_restricted(corpus):
    cfg = SamplerConfig(N=3, K=1, gamma=0.0, seed=0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        task = sample_task(corpus, cfg, rng)
        if task.is_nil_query:
            assert task.gold_extractions == ()
            continue
        mentions = [m for m in task.query.entities
                    if m.type_name in set(task.target_types)]
        mentions.sort(key=lambda m: (m.start, m.end))
        assert task.gold_extractions == tuple(
            (m.surface, m.type_name) for m in mentions
        )


def test_nil_queries_have_no_target_mentions(corpus):
    cfg = SamplerConfig(N=3, K=1, gamma=1.0, seed=0)
    rng = np.random.default_rng(2)
    for _ in range(10):
        task = sample_task(corpus, cfg, rng)
        assert task.is_nil_query
        assert not (task.query.types() & set(task.target_types))
        assert task.gold_extractions == ()


def test_nil_rate_tracks_gamma(corpus):
    cfg = SamplerConfig(N=3, K=1, gamma=0.3, seed=0)
    rng = np.random.default_rng(4)
    hits = sum(sample_task(corpus, cfg, rng).is_nil_query for _ in range(800))
    assert abs(hits / 800 - 0.3) < 0.05


def test_sampling_determinism(corpus):
    cfg = SamplerConfig(N=3, K=2, seed=0)
    a = [sample_task(corpus, cfg, np.random.default_rng(9)) for _ in range(5)]
    b = [sample_task(corpus, cfg, np.random.default_rng(9)) for _ in range(5)]
    assert a == b


def test_sampling_error_names_deficient_type():
    corpus = generate_synthetic_corpus(
        SyntheticCorpusSpec(num_types=3, instances_per_type=2,
                            vocabulary_size=40, seed=0)
    )
    cfg = SamplerConfig(N=3, K=5, seed=0)
    with pytest.raises(SamplingError) as exc:
        sample_task(corpus, cfg, np.random.default_rng(0))
    # at least one concrete type name appears in the message
    types = {m.type_name for i in corpus for m in i.entities}
    assert any(t in str(exc.value) for t in types)


def test_query_not_among_demonstrations(corpus):
    cfg = SamplerConfig(N=3, K=2, gamma=0.0, seed=0)
    rng = np.random.default_rng(6)
    for _ in range(20):
        task = sample_task(corpus, cfg, rng)
        demo_ids = {d.source_id for d in task.demonstrations}
        assert task.query.source_id not in demo_ids


def test_corpus_index_eligibility(corpus):
    index = CorpusIndex(corpus)
    assert set(index.eligible_types(1)) == {
        m.type_name for i in corpus for m in i.entities
    }
    assert index.eligible_types(10**6) == []


# --- anonymization ----------------------------------------------------------


def test_anonymization_substitutes_and_maps(corpus):
    cfg = SamplerConfig(N=4, K=1, gamma=0.0, seed=0)
    rng = np.random.default_rng(7)
    task = sample_task(corpus, cfg, rng)
    anon = anonymize_types(task, 1.0, rng)
    assert len(anon.anonymization_map) == 4
    indicators = set(anon.anonymization_map.values())
    assert len(indicators) == 4  # injective
    assert all(v.startswith("<type") for v in indicators)
    assert set(anon.target_types) == indicators
    for (s, l), (s0, l0) in zip(anon.gold_extractions, task.gold_extractions):
        assert s == s0
        assert l == anon.anonymization_map[l0]
    # demonstration instances keep original labels; the map is applied later
    assert anon.demonstrations == task.demonstrations


def test_anonymization_zero_prob_is_identity_map(corpus):
    cfg = SamplerConfig(N=3, K=1, seed=0)
    rng = np.random.default_rng(8)
    task = sample_task(corpus, cfg, rng)
    anon = anonymize_types(task, 0.0, rng)
    assert anon.anonymization_map == {}
    assert anon.target_types == task.target_types
    assert anon.gold_extractions == task.gold_extractions


def test_anonymization_rate_close_to_p(corpus):
    cfg = SamplerConfig(N=5, K=1, seed=0)
    rng = np.random.default_rng(10)
    total = subbed = 0
    for _ in range(400):
        task = sample_task(corpus, cfg, rng)
        anon = anonymize_types(task, 0.8, rng)
        total += len(task.target_types)
        subbed += len(anon.anonymization_map)
    assert abs(subbed / total - 0.8) < 0.03


def test_anonymization_rejects_already_anonymized(corpus):
    cfg = SamplerConfig(N=2, K=1, seed=0)
    rng = np.random.default_rng(11)
    task = sample_task(corpus, cfg, rng)
    anon = anonymize_types(task, 1.0, rng)
    with pytest.raises(ConfigurationError):
        anonymize_types(anon, 1.0, rng)


def test_indicator_pool_respected(corpus):
    cfg = SamplerConfig(N=4, K=1, seed=0, num_indicators=6)
    rng = np.random.default_rng(12)
    allowed = {type_indicator(i) for i in range(1, 7)}
    for _ in range(30):
        task = sample_task(corpus, cfg, rng)
        anon = anonymize_types(task, 1.0, rng, num_indicators=6)
        assert set(anon.anonymization_map.values()) <= allowed


# --- serialization ----------------------------------------------------------


def test_task_dict_round_trip(corpus):
    cfg = SamplerConfig(N=3, K=2, seed=0)
    rng = np.random.default_rng(13)
    task = anonymize_types(sample_task(corpus, cfg, rng), 0.8, rng)
    assert task_from_dict(task_to_dict(task)) == task


def test_task_jsonl_round_trip(tmp_path, corpus):
    cfg = SamplerConfig(N=2, K=1, seed=0)
    rng = np.random.default_rng(14)
    tasks = [
        anonymize_types(sample_task(corpus, cfg, rng), 0.5, rng)
        for _ in range(8)
    ]
    path = tmp_path / "tasks.jsonl"
    dump_tasks(tasks, path)
    assert load_tasks(path) == tasks
