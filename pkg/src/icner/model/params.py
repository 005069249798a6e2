"""Parameter container: named tensors partitioned into encoder and decoder
sides, with deep copies, flattening for gradient checks, and a content
checksum.

The token embedding is shared between the encoder input, the decoder input,
and the output projection (weights tied), and is classified as an encoder
parameter.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .config import ModelConfig


def _layer_names(side: str, i: int, cross: bool) -> list[tuple[str, str]]:
    """(name, kind) pairs for one transformer block."""
    p = f"{side}{i}."
    first = "self" if cross else "attn"
    names = [
        (p + "ln1.g", "ln_g"), (p + "ln1.b", "ln_b"),
        (p + f"{first}.wq", "proj"), (p + f"{first}.wk", "proj"),
        (p + f"{first}.wv", "proj"), (p + f"{first}.wo", "out"),
    ]
    if cross:
        names += [
            (p + "ln2.g", "ln_g"), (p + "ln2.b", "ln_b"),
            (p + "cross.wq", "proj"), (p + "cross.wk", "proj"),
            (p + "cross.wv", "proj"), (p + "cross.wo", "out"),
            (p + "ln3.g", "ln_g"), (p + "ln3.b", "ln_b"),
        ]
    else:
        names += [(p + "ln2.g", "ln_g"), (p + "ln2.b", "ln_b")]
    names += [
        (p + "ffn.w1", "ffn_in"), (p + "ffn.b1", "ffn_b1"),
        (p + "ffn.w2", "ffn_out"), (p + "ffn.b2", "ffn_b2"),
    ]
    return names


class ModelParams:
    """All weights, addressable by name."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
        std = 0.02
        out_std = std / np.sqrt(2.0 * config.num_layers)
        shapes = {
            "embed": (v, d),
            "enc_pos": (config.max_len, d),
            "dec_pos": (config.max_len, d),
        }
        kinds = {"embed": "proj", "enc_pos": "proj", "dec_pos": "proj"}
        for i in range(config.num_layers):
            for name, kind in _layer_names("enc", i, cross=False):
                kinds[name] = kind
            for name, kind in _layer_names("dec", i, cross=True):
                kinds[name] = kind
        kinds["enc_ln.g"] = "ln_g"
        kinds["enc_ln.b"] = "ln_b"
        kinds["dec_ln.g"] = "ln_g"
        kinds["dec_ln.b"] = "ln_b"

        tensors = {}
        for name, kind in kinds.items():
            if name in shapes:
                shape = shapes[name]
            elif kind in ("proj", "out"):
                shape = (d, d)
            elif kind == "ffn_in":
                shape = (d, f)
            elif kind == "ffn_out":
                shape = (f, d)
            elif kind == "ffn_b1":
                shape = (f,)
            else:
                shape = (d,)
            if kind == "ln_g":
                t = np.ones(shape, dtype=dtype)
            elif kind in ("ln_b", "ffn_b1", "ffn_b2"):
                t = np.zeros(shape, dtype=dtype)
            else:
                s = out_std if kind in ("out", "ffn_out") else std
                t = rng.normal(0.0, s, size=shape).astype(dtype)
            tensors[name] = t
        return cls(config, tensors)

    # -- partition -----------------------------------------------------------

    def encoder_names(self) -> list[str]:
        return [
            n
            for n in self.tensors
            if n == "embed" or n.startswith(("enc", "enc_"))
        ]

    def decoder_names(self) -> list[str]:
        enc = set(self.encoder_names())
        return [n for n in self.tensors if n not in enc]

    # -- lifecycle -----------------------------------------------------------

    def copy(self) -> "ModelParams":
        """Deep, mutation-independent copy."""
        return ModelParams(
            self.config, {n: t.copy() for n, t in self.tensors.items()}
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {n: t.astype(dtype) for n, t in self.tensors.items()}
        )

    @property
    def dtype(self):
        return self.tensors["embed"].dtype

    def num_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def checksum(self) -> str:
        """Digest of tensor names, shapes, dtypes, and bytes; independent of
        file metadata such as timestamps."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            t = np.ascontiguousarray(self.tensors[name])
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(str(t.shape).encode())
            h.update(t.tobytes())
        return h.hexdigest()

    # -- flat views for optimizers and finite differences --------------------

    def flatten(self, names: list[str] | None = None) -> np.ndarray:
        names = sorted(self.tensors) if names is None else names
        return np.concatenate([self.tensors[n].ravel() for n in names])

    def assign_flat(self, flat: np.ndarray, names: list[str] | None = None):
        names = sorted(self.tensors) if names is None else names
        at = 0
        for n in names:
            t = self.tensors[n]
            t[...] = flat[at : at + t.size].reshape(t.shape).astype(t.dtype)
            at += t.size
        if at != flat.size:
            raise ValueError(f"flat vector has {flat.size} values, expected {at}")

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(t) for n, t in self.tensors.items()}


def grads_flatten(
    grads: dict[str, np.ndarray], params: ModelParams, names: list[str]
) -> np.ndarray:
    """Flatten gradients in the given name order; names absent from grads
    contribute zeros (parameters the loss does not touch)."""
    parts = []
    for n in names:
        if n in grads:
            parts.append(np.asarray(grads[n]).ravel())
        else:
            parts.append(np.zeros(params.tensors[n].size, dtype=params.dtype))
    return np.concatenate(parts)
