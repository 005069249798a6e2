import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icner.corpus import (
    EntityMention,
    NerInstance,
    SyntheticCorpusSpec,
    corpus_types,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_by_types,
    validate_instance,
)
from icner.errors import ConfigurationError, CorpusParseError, ValidationError


def test_validate_accepts_consistent_instance():
    inst = NerInstance("John works", (EntityMention(0, 4, "person", "John"),))
    assert validate_instance(inst).ok


def test_validate_flags_surface_mismatch():
    inst = NerInstance("John works", (EntityMention(0, 4, "person", "Jane"),))
    report = validate_instance(inst)
    assert not report.ok
    assert "surface mismatch" in report.issues[0]


def test_validate_flags_bad_offsets_and_duplicates():
    inst = NerInstance(
        "abcdef",
        (
            EntityMention(3, 2, "t", "x"),
            EntityMention(0, 99, "t", "y"),
            EntityMention(0, 2, "t", "ab"),
            EntityMention(0, 2, "t", "ab"),
        ),
    )
    issues = validate_instance(inst).issues
    assert any("invalid offsets" in s for s in issues)
    assert any("out of bounds" in s for s in issues)
    assert any("duplicate" in s for s in issues)


def test_jsonl_round_trip(tmp_path, small_corpus):
    path = tmp_path / "corpus.jsonl"
    save_corpus(small_corpus, path)
    back = load_corpus(path)
    assert back == list(small_corpus)


def test_load_rejects_malformed_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"text": "ok", "entities": []}\nnot json\n')
    with pytest.raises(CorpusParseError) as exc:
        load_corpus(path)
    assert exc.value.line_no == 2


def test_load_rejects_inconsistent_mention(tmp_path):
    rec = {
        "text": "abc",
        "entities": [{"start": 0, "end": 2, "type": "t", "surface": "zz"}],
    }
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValidationError):
        load_corpus(path)


def test_synthetic_corpus_is_deterministic():
    spec = SyntheticCorpusSpec(num_types=5, instances_per_type=4, seed=3)
    assert generate_synthetic_corpus(spec) == generate_synthetic_corpus(spec)


def test_synthetic_corpus_instances_validate(small_corpus):
    for inst in small_corpus:
        assert validate_instance(inst).ok


def test_synthetic_corpus_counts_and_nil_fraction():
    spec = SyntheticCorpusSpec(
        num_types=10, instances_per_type=20, nil_fraction=0.25, seed=0
    )
    corpus = generate_synthetic_corpus(spec)
    typed = [i for i in corpus if i.entities]
    nil = [i for i in corpus if not i.entities]
    assert len(typed) == 200
    # rounded-down share of the final corpus
    assert len(nil) == int(0.25 / 0.75 * 200)
    assert abs(len(nil) / len(corpus) - 0.25) < 0.005


def test_synthetic_types_have_distinct_surfaces_and_contexts():
    spec = SyntheticCorpusSpec(num_types=12, instances_per_type=3, seed=1)
    corpus = generate_synthetic_corpus(spec)
    surfaces = {}
    for inst in corpus:
        for m in inst.entities:
            surfaces.setdefault(m.type_name, set()).add(m.surface)
    assert len(surfaces) == 12
    # one fixed surface per type, all types distinct
    assert all(len(v) == 1 for v in surfaces.values())
    flat = [next(iter(v)) for v in surfaces.values()]
    assert len(set(flat)) == 12


def test_split_by_types_partitions_and_keeps_nil_on_train_side(small_corpus):
    types = sorted(corpus_types(small_corpus))
    rest, held = split_by_types(small_corpus, types[-2:])
    assert len(rest) + len(held) == len(small_corpus)
    assert all(i.types() <= set(types[:-2]) for i in rest)
    assert all(i.types() & set(types[-2:]) for i in held)
    assert all(i.entities for i in held)


def test_spec_rejects_bad_arguments():
    with pytest.raises(ConfigurationError):
        SyntheticCorpusSpec(num_types=0, instances_per_type=1)
    with pytest.raises(ConfigurationError):
        SyntheticCorpusSpec(num_types=1, instances_per_type=1, nil_fraction=1.5)
    with pytest.raises(ConfigurationError):
        generate_synthetic_corpus(
            SyntheticCorpusSpec(num_types=30, instances_per_type=1,
                                vocabulary_size=40)
        )


@settings(max_examples=50, deadline=None)
@given(
    text=st.text(
        alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=40
    ),
    source_id=st.text(max_size=10),
)
def test_jsonl_round_trip_arbitrary_text(tmp_path_factory, text, source_id):
    inst = NerInstance(text=text, entities=(), source_id=source_id)
    path = tmp_path_factory.mktemp("rt") / "one.jsonl"
    save_corpus([inst], path)
    assert load_corpus(path) == [inst]
