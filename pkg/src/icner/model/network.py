"""Encoder-decoder transformer with explicit manual backpropagation.

Pre-norm blocks, learned absolute positions, GELU feed-forwards, and a token
embedding tied across encoder input, decoder input, and the output
projection. Forward passes build caches that the paired backward functions
consume; gradients accumulate into plain name->array dicts, so a loss that
never touches a parameter simply leaves it absent (exactly zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..codec import TokenizedExample
from ..errors import AlignmentError, TruncationError
from .params import ModelParams

__all__ = [
    "EncoderFeatures",
    "encode",
    "encoder_fwd",
    "encoder_bwd",
    "extract_meta_features",
    "sequence_nll",
    "sequence_nll_grad",
    "generate",
]


@dataclass
class EncoderFeatures:
    """Per-token encoder states plus the segment bookkeeping needed to slice
    them into instruction / demonstrations / text views."""

    features: np.ndarray
    instruction_range: tuple[int, int]
    demonstrations_range: tuple[int, int]
    text_range: tuple[int, int]

    @property
    def instruction(self) -> np.ndarray:
        a, b = self.instruction_range
        return self.features[a:b]

    @property
    def demonstrations(self) -> np.ndarray:
        a, b = self.demonstrations_range
        return self.features[a:b]

    @property
    def text(self) -> np.ndarray:
        a, b = self.text_range
        return self.features[a:b]


def _add(grads: dict, name: str, value: np.ndarray):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy() if isinstance(value, np.ndarray) else value


def _dropout_fwd(x, p: float, rng):
    if p <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * keep, keep


def _dropout_bwd(dy, mask):
    return dy if mask is None else dy * mask


def _ln_fwd(x, p, pre):
    y, mean, rstd = kernels.ln_fwd(x, p[pre + ".g"], p[pre + ".b"])
    return y, (x, mean, rstd)


def _ln_bwd(dy, p, pre, cache, grads):
    x, mean, rstd = cache
    dx, dg, db = kernels.ln_bwd(dy, x, p[pre + ".g"], mean, rstd)
    _add(grads, pre + ".g", dg)
    _add(grads, pre + ".b", db)
    return dx


def _attn_fwd(xq, xkv, p, pre, num_heads, mask):
    tq, d = xq.shape
    tk = xkv.shape[0]
    dh = d // num_heads
    q = (xq @ p[pre + "wq"]).reshape(tq, num_heads, dh).transpose(1, 0, 2)
    k = (xkv @ p[pre + "wk"]).reshape(tk, num_heads, dh).transpose(1, 0, 2)
    v = (xkv @ p[pre + "wv"]).reshape(tk, num_heads, dh).transpose(1, 0, 2)
    scale = xq.dtype.type(1.0 / np.sqrt(dh))
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    if mask is not None:
        scores = scores + mask
    probs = kernels.softmax_fwd(
        np.ascontiguousarray(scores).reshape(num_heads * tq, tk)
    ).reshape(num_heads, tq, tk)
    ctx = np.matmul(probs, v)
    merged = np.ascontiguousarray(ctx.transpose(1, 0, 2)).reshape(tq, d)
    out = merged @ p[pre + "wo"]
    cache = (xq, xkv, q, k, v, probs, merged, scale)
    return out, cache


def _attn_bwd(dout, p, pre, num_heads, cache, grads):
    xq, xkv, q, k, v, probs, merged, scale = cache
    tq, d = xq.shape
    tk = xkv.shape[0]
    dh = d // num_heads
    _add(grads, pre + "wo", merged.T @ dout)
    dmerged = dout @ p[pre + "wo"].T
    dctx = np.ascontiguousarray(dmerged.reshape(tq, num_heads, dh).transpose(1, 0, 2))
    dprobs = np.matmul(dctx, v.transpose(0, 2, 1))
    dv = np.matmul(probs.transpose(0, 2, 1), dctx)
    flat = num_heads * tq
    dscores = kernels.softmax_bwd(
        np.ascontiguousarray(dprobs).reshape(flat, tk),
        np.ascontiguousarray(probs).reshape(flat, tk),
    ).reshape(num_heads, tq, tk)
    dq = np.matmul(dscores, k) * scale
    dk = np.matmul(dscores.transpose(0, 2, 1), q) * scale
    dq2 = np.ascontiguousarray(dq.transpose(1, 0, 2)).reshape(tq, d)
    dk2 = np.ascontiguousarray(dk.transpose(1, 0, 2)).reshape(tk, d)
    dv2 = np.ascontiguousarray(dv.transpose(1, 0, 2)).reshape(tk, d)
    _add(grads, pre + "wq", xq.T @ dq2)
    _add(grads, pre + "wk", xkv.T @ dk2)
    _add(grads, pre + "wv", xkv.T @ dv2)
    dxq = dq2 @ p[pre + "wq"].T
    dxkv = dk2 @ p[pre + "wk"].T + dv2 @ p[pre + "wv"].T
    return dxq, dxkv


def _ffn_fwd(x, p, pre):
    h_pre = x @ p[pre + "w1"] + p[pre + "b1"]
    h = kernels.gelu_fwd(h_pre)
    out = h @ p[pre + "w2"] + p[pre + "b2"]
    return out, (x, h_pre, h)


def _ffn_bwd(dout, p, pre, cache, grads):
    x, h_pre, h = cache
    _add(grads, pre + "w2", h.T @ dout)
    _add(grads, pre + "b2", dout.sum(axis=0))
    dh = dout @ p[pre + "w2"].T
    dh_pre = kernels.gelu_bwd(dh, h_pre)
    _add(grads, pre + "w1", x.T @ dh_pre)
    _add(grads, pre + "b1", dh_pre.sum(axis=0))
    return dh_pre @ p[pre + "w1"].T


def _check_len(n: int, max_len: int, what: str):
    if n > max_len:
        raise TruncationError(
            f"{what} has {n} tokens but max_len is {max_len}; refusing to truncate"
        )


def encoder_fwd(params: ModelParams, input_ids, train=False, rng=None):
    """Returns (final states (T, D), cache). cache['layer_out'] keeps each
    block's residual-stream output for feature-layer selection."""
    cfg, p = params.config, params.tensors
    ids = np.asarray(input_ids, dtype=np.int64)
    t = ids.shape[0]
    _check_len(t, cfg.max_len, "encoder input")
    dp = cfg.dropout if train else 0.0
    x0 = p["embed"][ids] + p["enc_pos"][:t]
    x, m_emb = _dropout_fwd(np.ascontiguousarray(x0), dp, rng)
    layers = []
    layer_out = []
    for i in range(cfg.num_layers):
        pre = f"enc{i}."
        a_in, c_ln1 = _ln_fwd(x, p, pre + "ln1")
        a_out, c_attn = _attn_fwd(a_in, a_in, p, pre + "attn.", cfg.num_heads, None)
        a_dp, m_a = _dropout_fwd(a_out, dp, rng)
        x1 = x + a_dp
        f_in, c_ln2 = _ln_fwd(x1, p, pre + "ln2")
        f_out, c_ffn = _ffn_fwd(f_in, p, pre + "ffn.")
        f_dp, m_f = _dropout_fwd(f_out, dp, rng)
        x = x1 + f_dp
        layers.append((c_ln1, c_attn, m_a, c_ln2, c_ffn, m_f))
        layer_out.append(x)
    y, c_lnf = _ln_fwd(x, p, "enc_ln")
    cache = {
        "ids": ids,
        "m_emb": m_emb,
        "layers": layers,
        "layer_out": layer_out,
        "c_lnf": c_lnf,
    }
    return y, cache


def encoder_bwd(params: ModelParams, cache, dy, grads=None):
    """Backward through the encoder stack; dy is the gradient at the final
    (post-norm) states. Returns grads touching encoder-side tensors only."""
    p = params.tensors
    if grads is None:
        grads = {}
    dx = _ln_bwd(dy, p, "enc_ln", cache["c_lnf"], grads)
    for i in reversed(range(params.config.num_layers)):
        pre = f"enc{i}."
        c_ln1, c_attn, m_a, c_ln2, c_ffn, m_f = cache["layers"][i]
        df = _dropout_bwd(dx, m_f)
        d_f_in = _ffn_bwd(df, p, pre + "ffn.", c_ffn, grads)
        dx1 = dx + _ln_bwd(d_f_in, p, pre + "ln2", c_ln2, grads)
        da = _dropout_bwd(dx1, m_a)
        dxq, dxkv = _attn_bwd(
            da, p, pre + "attn.", params.config.num_heads, c_attn, grads
        )
        dx = dx1 + _ln_bwd(dxq + dxkv, p, pre + "ln1", c_ln1, grads)
    dx0 = _dropout_bwd(dx, cache["m_emb"])
    ids = cache["ids"]
    demb = np.zeros_like(p["embed"])
    np.add.at(demb, ids, dx0)
    _add(grads, "embed", demb)
    dpos = np.zeros_like(p["enc_pos"])
    dpos[: ids.shape[0]] = dx0
    _add(grads, "enc_pos", dpos)
    return grads


def _causal_mask(t: int, dtype):
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def decoder_fwd(params: ModelParams, dec_ids, memory, train=False, rng=None):
    cfg, p = params.config, params.tensors
    ids = np.asarray(dec_ids, dtype=np.int64)
    t = ids.shape[0]
    _check_len(t, cfg.max_len, "decoder input")
    dp = cfg.dropout if train else 0.0
    x0 = p["embed"][ids] + p["dec_pos"][:t]
    x, m_emb = _dropout_fwd(np.ascontiguousarray(x0), dp, rng)
    mask = _causal_mask(t, x.dtype)
    layers = []
    for i in range(cfg.num_layers):
        pre = f"dec{i}."
        s_in, c_ln1 = _ln_fwd(x, p, pre + "ln1")
        s_out, c_self = _attn_fwd(s_in, s_in, p, pre + "self.", cfg.num_heads, mask)
        s_dp, m_s = _dropout_fwd(s_out, dp, rng)
        x1 = x + s_dp
        q_in, c_ln2 = _ln_fwd(x1, p, pre + "ln2")
        c_out, c_cross = _attn_fwd(
            q_in, memory, p, pre + "cross.", cfg.num_heads, None
        )
        c_dp, m_c = _dropout_fwd(c_out, dp, rng)
        x2 = x1 + c_dp
        f_in, c_ln3 = _ln_fwd(x2, p, pre + "ln3")
        f_out, c_ffn = _ffn_fwd(f_in, p, pre + "ffn.")
        f_dp, m_f = _dropout_fwd(f_out, dp, rng)
        x = x2 + f_dp
        layers.append((c_ln1, c_self, m_s, c_ln2, c_cross, m_c, c_ln3, c_ffn, m_f))
    y, c_lnf = _ln_fwd(x, p, "dec_ln")
    cache = {"ids": ids, "m_emb": m_emb, "layers": layers, "c_lnf": c_lnf}
    return y, cache


def decoder_bwd(params: ModelParams, cache, dy, grads):
    """Backward through the decoder; returns the gradient w.r.t. the encoder
    memory (from the cross-attention key/value paths)."""
    p = params.tensors
    dx = _ln_bwd(dy, p, "dec_ln", cache["c_lnf"], grads)
    dmemory = None
    for i in reversed(range(params.config.num_layers)):
        pre = f"dec{i}."
        c_ln1, c_self, m_s, c_ln2, c_cross, m_c, c_ln3, c_ffn, m_f = cache[
            "layers"
        ][i]
        df = _dropout_bwd(dx, m_f)
        d_f_in = _ffn_bwd(df, p, pre + "ffn.", c_ffn, grads)
        dx2 = dx + _ln_bwd(d_f_in, p, pre + "ln3", c_ln3, grads)
        dc = _dropout_bwd(dx2, m_c)
        d_q_in, d_mem = _attn_bwd(
            dc, p, pre + "cross.", params.config.num_heads, c_cross, grads
        )
        dmemory = d_mem if dmemory is None else dmemory + d_mem
        dx1 = dx2 + _ln_bwd(d_q_in, p, pre + "ln2", c_ln2, grads)
        ds = _dropout_bwd(dx1, m_s)
        dxq, dxkv = _attn_bwd(
            ds, p, pre + "self.", params.config.num_heads, c_self, grads
        )
        dx = dx1 + _ln_bwd(dxq + dxkv, p, pre + "ln1", c_ln1, grads)
    dx0 = _dropout_bwd(dx, cache["m_emb"])
    ids = cache["ids"]
    demb = np.zeros_like(p["embed"])
    np.add.at(demb, ids, dx0)
    _add(grads, "embed", demb)
    dpos = np.zeros_like(p["dec_pos"])
    dpos[: ids.shape[0]] = dx0
    _add(grads, "dec_pos", dpos)
    return dmemory


# --- public operations ------------------------------------------------------


def encode(
    params: ModelParams, ex: TokenizedExample, train=False, rng=None
) -> EncoderFeatures:
    """Per-token encoder features for a tokenized example, sliced to the
    configured feature layer."""
    y, cache = encoder_fwd(params, ex.input_ids, train=train, rng=rng)
    fl = params.config.feature_layer
    feats = y if fl == -1 else cache["layer_out"][fl]
    return EncoderFeatures(
        feats, ex.instruction_range, ex.demonstrations_range, ex.text_range
    )


def extract_meta_features(features: EncoderFeatures) -> np.ndarray:
    """Instruction and text rows in position order; demonstration positions
    (and the trailing end marker) are dropped."""
    return np.concatenate([features.instruction, features.text], axis=0)


def meta_feature_rows(ex: TokenizedExample) -> int:
    a, b = ex.instruction_range
    c, d = ex.text_range
    return (b - a) + (d - c)


def _decoder_inputs(target_ids, bos_id: int) -> np.ndarray:
    t = np.asarray(target_ids, dtype=np.int64)
    return np.concatenate([[bos_id], t[:-1]])


def sequence_nll(params: ModelParams, ex: TokenizedExample, bos_id: int) -> float:
    """Teacher-forced negative log-likelihood of the target, averaged per
    token; evaluation mode (no dropout)."""
    loss, _ = sequence_nll_grad(params, ex, bos_id, want_grads=False)
    return loss


def sequence_nll_grad(
    params: ModelParams,
    ex: TokenizedExample,
    bos_id: int,
    train=False,
    rng=None,
    want_grads=True,
):
    """(loss, grads) for the extraction objective on one example."""
    if not ex.target_ids:
        raise ValueError("target is empty")
    p = params.tensors
    memory, enc_cache = encoder_fwd(params, ex.input_ids, train=train, rng=rng)
    dec_in = _decoder_inputs(ex.target_ids, bos_id)
    dec_y, dec_cache = decoder_fwd(params, dec_in, memory, train=train, rng=rng)
    logits = np.ascontiguousarray(dec_y @ p["embed"].T)
    targets = np.asarray(ex.target_ids, dtype=np.int64)
    losses, dlogits = kernels.xent_fwd_bwd(logits, targets)
    n = targets.shape[0]
    loss = float(losses.sum()) / n
    if not want_grads:
        return loss, None
    dlogits /= n
    grads: dict[str, np.ndarray] = {}
    _add(grads, "embed", dlogits.T @ dec_y)
    d_dec_y = dlogits @ p["embed"]
    dmemory = decoder_bwd(params, dec_cache, d_dec_y, grads)
    encoder_bwd(params, enc_cache, dmemory, grads)
    return loss, grads


def generate(
    params: ModelParams,
    input_ids,
    max_new_tokens: int,
    bos_id: int,
    eos_id: int,
) -> list[int]:
    """Greedy decoding; stops after emitting eos_id or at max_new_tokens."""
    if max_new_tokens <= 0:
        return []
    memory, _ = encoder_fwd(params, input_ids, train=False)
    p = params.tensors
    out: list[int] = []
    dec_ids = [bos_id]
    for _ in range(max_new_tokens):
        if len(dec_ids) >= params.config.max_len:
            break
        dec_y, _ = decoder_fwd(params, dec_ids, memory, train=False)
        logits = dec_y[-1] @ p["embed"].T
        nxt = int(np.argmax(logits))
        out.append(nxt)
        if nxt == eos_id:
            break
        dec_ids.append(nxt)
    return out


def check_feature_alignment(f: np.ndarray, f_prime: np.ndarray):
    if f.shape != f_prime.shape:
        raise AlignmentError(
            f"meta feature shapes differ: {f.shape} vs {f_prime.shape}"
        )
