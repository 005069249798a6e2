import numpy as np
import pytest

from icner.codec import IN_CONTEXT, linearize, tokenize_example
from icner.errors import ConfigurationError, DataError, TruncationError
from icner.model import (
    ModelConfig,
    ModelParams,
    encode,
    extract_meta_features,
    generate,
    grads_flatten,
    load_checkpoint,
    save_checkpoint,
    sequence_nll,
    sequence_nll_grad,
)
from icner.sampler import SamplerConfig, sample_task


def make_example(small_corpus, small_vocab, seed=0, mode=IN_CONTEXT):
    rng = np.random.default_rng(seed)
    task = sample_task(list(small_corpus), SamplerConfig(N=2, K=1, seed=0), rng)
    return tokenize_example(linearize(task, mode), small_vocab)


# --- configuration and parameters -------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(hidden_dim=30, num_heads=4, vocab_size=10)  # not divisible
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=10, dropout=1.5)


def test_config_round_trip(tiny_config):
    assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


def test_init_deterministic(tiny_config):
    a = ModelParams.init(tiny_config)
    b = ModelParams.init(tiny_config)
    assert a.checksum() == b.checksum()


def test_init_different_seed_differs(tiny_config):
    other = ModelConfig(**{**tiny_config.to_dict(), "seed": 1})
    assert ModelParams.init(tiny_config).checksum() != \
        ModelParams.init(other).checksum()


def test_param_count_matches_tensor_sizes(tiny_params):
    total = sum(t.size for t in tiny_params.tensors.values())
    assert tiny_params.num_params() == total


def test_copy_is_isolated(tiny_params):
    c = tiny_params.copy()
    before = tiny_params.checksum()
    c.tensors["embed"] += 1.0
    assert tiny_params.checksum() == before
    assert c.checksum() != before


def test_astype_round_trip_preserves_values(tiny_params):
    d = tiny_params.astype(np.float64)
    assert d.dtype == np.float64
    back = d.astype(np.float32)
    for n, t in tiny_params.tensors.items():
        assert np.array_equal(back.tensors[n], t)


def test_flatten_assign_round_trip(tiny_params):
    names = sorted(tiny_params.tensors)
    flat = tiny_params.flatten(names)
    assert flat.size == tiny_params.num_params()
    c = tiny_params.copy()
    c.assign_flat(flat * 0 + 1.5, names)
    assert all(np.all(t == 1.5) for t in c.tensors.values())
    c.assign_flat(flat, names)
    assert c.checksum() == tiny_params.checksum()


def test_grads_flatten_fills_missing_with_zeros(tiny_params):
    names = sorted(tiny_params.tensors)
    grads = {"embed": np.ones_like(tiny_params.tensors["embed"])}
    flat = grads_flatten(grads, tiny_params, names)
    assert flat.size == tiny_params.num_params()
    at = 0
    for n in names:
        size = tiny_params.tensors[n].size
        seg = flat[at : at + size]
        if n == "embed":
            assert np.all(seg == 1.0)
        else:
            assert np.all(seg == 0.0)
        at += size


def test_encoder_names_cover_embedding_and_encoder_side(tiny_params):
    names = set(tiny_params.encoder_names())
    assert "embed" in names
    assert any(n.startswith("enc0.") for n in names)
    assert not any(n.startswith("dec") for n in names)


# --- forward passes ---------------------------------------------------------


def test_nll_at_init_close_to_uniform(small_corpus, small_vocab, tiny_params):
    ex = make_example(small_corpus, small_vocab)
    loss = sequence_nll(tiny_params, ex, small_vocab.bos_id)
    assert abs(loss - np.log(len(small_vocab))) < 0.5


def test_encoder_features_shapes_and_views(small_corpus, small_vocab, tiny_params):
    ex = make_example(small_corpus, small_vocab)
    feats = encode(tiny_params, ex)
    d = tiny_params.config.hidden_dim
    assert feats.features.shape == (len(ex.input_ids), d)
    assert feats.instruction.shape == (ex.n, d)
    assert feats.text.shape == (ex.k, d)
    mf = extract_meta_features(feats)
    assert mf.shape == (ex.n + ex.k, d)
    assert np.array_equal(mf[: ex.n], feats.instruction)
    assert np.array_equal(mf[ex.n :], feats.text)


def test_feature_layer_selects_intermediate_block(small_corpus, small_vocab,
                                                  tiny_config):
    ex = make_example(small_corpus, small_vocab)
    last = encode(ModelParams.init(tiny_config), ex).features
    cfg0 = ModelConfig(**{**tiny_config.to_dict(), "feature_layer": 0})
    first = encode(ModelParams.init(cfg0), ex).features
    assert last.shape == first.shape
    assert not np.allclose(last, first)


def test_overlong_input_raises(small_vocab, tiny_config):
    params = ModelParams.init(tiny_config)

    class Fake:
        input_ids = tuple([5] * (tiny_config.max_len + 1))
        target_ids = (5, 2)

    with pytest.raises(TruncationError):
        sequence_nll(params, Fake(), small_vocab.bos_id)


def test_dropout_only_active_in_train_mode(small_corpus, small_vocab, tiny_config):
    cfg = ModelConfig(**{**tiny_config.to_dict(), "dropout": 0.3})
    params = ModelParams.init(cfg)
    ex = make_example(small_corpus, small_vocab)
    base = sequence_nll(params, ex, small_vocab.bos_id)
    again = sequence_nll(params, ex, small_vocab.bos_id)
    assert base == again  # eval mode is deterministic
    rng = np.random.default_rng(0)
    noisy, _ = sequence_nll_grad(
        params, ex, small_vocab.bos_id, train=True, rng=rng, want_grads=False
    )
    assert noisy != base


# --- gradients --------------------------------------------------------------


def test_gradients_match_finite_differences(small_corpus, small_vocab, tiny_config):
    params = ModelParams.init(tiny_config).astype(np.float64)
    ex = make_example(small_corpus, small_vocab)
    names = sorted(params.tensors)
    loss0, grads = sequence_nll_grad(params, ex, small_vocab.bos_id)
    flat_g = grads_flatten(grads, params, names)
    flat_p = params.flatten(names)

    rng = np.random.default_rng(42)
    idx = rng.choice(flat_p.size, 60, replace=False)
    eps = 1e-5
    worst = 0.0
    for i in idx:
        p = flat_p.copy()
        p[i] += eps
        params.assign_flat(p, names)
        lp = sequence_nll(params, ex, small_vocab.bos_id)
        p[i] -= 2 * eps
        params.assign_flat(p, names)
        lm = sequence_nll(params, ex, small_vocab.bos_id)
        fd = (lp - lm) / (2 * eps)
        worst = max(worst, abs(fd - flat_g[i]) / max(abs(fd), abs(flat_g[i]), 1e-5))
    params.assign_flat(flat_p, names)
    assert worst <= 1e-4


def test_gradient_computation_leaves_params_unchanged(small_corpus, small_vocab,
                                                      tiny_params):
    ex = make_example(small_corpus, small_vocab)
    before = tiny_params.checksum()
    sequence_nll_grad(tiny_params, ex, small_vocab.bos_id)
    assert tiny_params.checksum() == before


def test_gradients_cover_encoder_and_decoder(small_corpus, small_vocab, tiny_params):
    ex = make_example(small_corpus, small_vocab)
    _, grads = sequence_nll_grad(tiny_params, ex, small_vocab.bos_id)
    assert any(n.startswith("enc0.") for n in grads)
    assert any(n.startswith("dec0.") for n in grads)
    assert "embed" in grads


# --- generation -------------------------------------------------------------


def test_generate_deterministic_and_bounded(small_corpus, small_vocab, tiny_params):
    ex = make_example(small_corpus, small_vocab)
    a = generate(tiny_params, ex.input_ids, 12, small_vocab.bos_id, small_vocab.eos_id)
    b = generate(tiny_params, ex.input_ids, 12, small_vocab.bos_id, small_vocab.eos_id)
    assert a == b
    assert 0 < len(a) <= 12
    if small_vocab.eos_id in a:
        assert a[-1] == small_vocab.eos_id


def test_generate_zero_budget(small_corpus, small_vocab, tiny_params):
    ex = make_example(small_corpus, small_vocab)
    assert generate(tiny_params, ex.input_ids, 0, small_vocab.bos_id,
                    small_vocab.eos_id) == []


# --- checkpointing ----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = tmp_path / "model.npz"
    extra = {"m:embed": np.ones(3, dtype=np.float32)}
    meta = {"step": 17, "note": "x"}
    checksum = save_checkpoint(path, tiny_params, extra, meta)
    params2, extra2, meta2 = load_checkpoint(path)
    assert params2.checksum() == tiny_params.checksum() == checksum
    assert params2.config == tiny_params.config
    assert np.array_equal(extra2["m:embed"], extra["m:embed"])
    assert meta2["step"] == 17 and meta2["note"] == "x"


def test_checkpoint_detects_corruption(tmp_path, tiny_params):
    path = tmp_path / "model.npz"
    save_checkpoint(path, tiny_params, {}, {})
    import zipfile

    with zipfile.ZipFile(path) as z:
        names = z.namelist()
        blobs = {n: z.read(n) for n in names}
    victim = next(n for n in names if n.startswith("t:"))
    raw = bytearray(blobs[victim])
    raw[len(raw) // 2] ^= 0xFF
    blobs[victim] = bytes(raw)
    with zipfile.ZipFile(path, "w") as z:
        for n in names:
            z.writestr(n, blobs[n])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checksum_tracks_content_not_file(tmp_path, tiny_params):
    a = tmp_path / "a.npz"
    b = tmp_path / "b.npz"
    save_checkpoint(a, tiny_params, {}, {"step": 1})
    save_checkpoint(b, tiny_params, {}, {"step": 2})
    pa, _, _ = load_checkpoint(a)
    pb, _, _ = load_checkpoint(b)
    assert pa.checksum() == pb.checksum()
