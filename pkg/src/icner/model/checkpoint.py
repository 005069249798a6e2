"""Checkpoint files: config plus all tensors behind a versioned header.

The header and tensor bytes fully determine the checkpoint; loading verifies
the recorded content checksum, so copies of a run are comparable by digest
regardless of file timestamps.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from ..errors import DataError
from .config import ModelConfig
from .params import ModelParams

FORMAT_VERSION = 1


def save_checkpoint(
    path, params: ModelParams, extra_arrays=None, extra_meta=None
) -> str:
    """Write params (and optional extra arrays/metadata) to path; returns the
    content checksum."""
    checksum = params.checksum()
    meta = {
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "dtype": str(params.dtype),
        "checksum": checksum,
        "extra": extra_meta or {},
    }
    arrays = {f"t:{n}": t for n, t in params.tensors.items()}
    for n, a in (extra_arrays or {}).items():
        arrays[f"x:{n}"] = a
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)
    Path(path).write_bytes(buf.getvalue())
    return checksum


def load_checkpoint(path):
    """Returns (params, extra_arrays, extra_meta); verifies header version and
    content checksum."""
    with np.load(Path(path), allow_pickle=False) as z:
        if "__meta__" not in z:
            raise DataError(f"{path}: not a checkpoint (missing header)")
        meta = json.loads(bytes(z["__meta__"]).decode())
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise DataError(
                f"{path}: unsupported checkpoint format {version!r} "
                f"(expected {FORMAT_VERSION})"
            )
        tensors = {}
        extra = {}
        for key in z.files:
            if key.startswith("t:"):
                tensors[key[2:]] = z[key]
            elif key.startswith("x:"):
                extra[key[2:]] = z[key]
    params = ModelParams(ModelConfig.from_dict(meta["config"]), tensors)
    if params.checksum() != meta["checksum"]:
        raise DataError(f"{path}: checksum mismatch, checkpoint is corrupt")
    return params, extra, meta.get("extra", {})
