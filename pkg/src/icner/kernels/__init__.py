"""Numeric kernels with a compiled fast path and a numpy fallback.

The compiled extension is preferred when importable; set ICNER_KERNELS to
"reference" (or "compiled") to force a backend. Matrix multiplies stay on
numpy's BLAS in both backends; these kernels cover the elementwise and
row-reduction work around them.
"""

from __future__ import annotations

import os
import warnings

from . import reference

_backends = {"reference": reference}
try:
    from . import _core

    _backends["compiled"] = _core
except ImportError:
    _core = None

_active = None


def available_backends() -> list[str]:
    return sorted(_backends)


def backend_name() -> str:
    return _active.NAME


def set_backend(name: str):
    """Switch kernel backend; returns the backend module."""
    global _active
    if name not in _backends:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    _active = _backends[name]
    return _active


def _initial_backend() -> str:
    req = os.environ.get("ICNER_KERNELS", "").strip().lower()
    if req in ("", "auto"):
        return "compiled" if "compiled" in _backends else "reference"
    alias = {"cython": "compiled", "c": "compiled", "python": "reference",
             "numpy": "reference"}
    req = alias.get(req, req)
    if req not in _backends:
        warnings.warn(
            f"ICNER_KERNELS={req!r} unavailable, using reference backend",
            RuntimeWarning,
            stacklevel=2,
        )
        return "reference"
    return req


set_backend(_initial_backend())


def ln_fwd(x, gamma, beta, eps=1e-5):
    return _active.ln_fwd(x, gamma, beta, eps)


def ln_bwd(dy, x, gamma, mean, rstd):
    return _active.ln_bwd(dy, x, gamma, mean, rstd)


def softmax_fwd(scores):
    return _active.softmax_fwd(scores)


def softmax_bwd(dprobs, probs):
    return _active.softmax_bwd(dprobs, probs)


def gelu_fwd(x):
    return _active.gelu_fwd(x)


def gelu_bwd(dy, x):
    return _active.gelu_bwd(dy, x)


def xent_fwd_bwd(logits, targets):
    return _active.xent_fwd_bwd(logits, targets)


def adamw_step(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    return _active.adamw_step(
        param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay
    )
