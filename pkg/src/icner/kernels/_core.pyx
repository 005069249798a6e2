# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled versions of the training hot-path kernels.

Semantics match kernels.reference exactly; only the execution strategy
differs (fused C loops instead of numpy temporaries). float32 and float64
are both supported via fused types.
"""

import numpy as np

cimport cython
from libc.math cimport exp, log, sqrt, tanh

NAME = "compiled"

ctypedef fused real:
    float
    double

cdef double _GELU_C = 0.7978845608028654
cdef double _GELU_A = 0.044715
cdef double _NEG_INF = -float("inf")


def ln_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps=1e-5):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((r, d), dtype=dtype)
    mean_arr = np.empty(r, dtype=dtype)
    rstd_arr = np.empty(r, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] rstd = rstd_arr
    cdef double acc, var, mu, rs, xh
    with nogil:
        for i in range(r):
            acc = 0.0
            for j in range(d):
                acc += x[i, j]
            mu = acc / d
            var = 0.0
            for j in range(d):
                acc = x[i, j] - mu
                var += acc * acc
            var /= d
            rs = 1.0 / sqrt(var + eps)
            mean[i] = <real> mu
            rstd[i] = <real> rs
            for j in range(d):
                xh = (x[i, j] - mu) * rs
                y[i, j] = <real> (xh * gamma[j] + beta[j])
    return y_arr, mean_arr, rstd_arr


def ln_bwd(real[:, ::1] dy, real[:, ::1] x, real[::1] gamma,
           real[::1] mean, real[::1] rstd):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((r, d), dtype=dtype)
    dgamma_arr = np.zeros(d, dtype=dtype)
    dbeta_arr = np.zeros(d, dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real[::1] dgamma = dgamma_arr
    cdef real[::1] dbeta = dbeta_arr
    cdef double mu, rs, xh, dxh, s1, s2
    with nogil:
        for i in range(r):
            mu = mean[i]
            rs = rstd[i]
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                xh = (x[i, j] - mu) * rs
                dxh = dy[i, j] * gamma[j]
                dgamma[j] += <real> (dy[i, j] * xh)
                dbeta[j] += dy[i, j]
                s1 += dxh
                s2 += dxh * xh
            s1 /= d
            s2 /= d
            for j in range(d):
                xh = (x[i, j] - mu) * rs
                dxh = dy[i, j] * gamma[j]
                dx[i, j] = <real> (rs * (dxh - s1 - xh * s2))
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_fwd(real[:, ::1] scores):
    cdef Py_ssize_t r = scores.shape[0], c = scores.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((r, c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef double m, z, e
    with nogil:
        for i in range(r):
            m = scores[i, 0]
            for j in range(1, c):
                if scores[i, j] > m:
                    m = scores[i, j]
            if m == _NEG_INF:
                for j in range(c):
                    out[i, j] = 0.0
                continue
            z = 0.0
            for j in range(c):
                e = exp(scores[i, j] - m)
                out[i, j] = <real> e
                z += e
            if z == 0.0:
                z = 1.0
            for j in range(c):
                out[i, j] = <real> (out[i, j] / z)
    return out_arr


def softmax_bwd(real[:, ::1] dprobs, real[:, ::1] probs):
    cdef Py_ssize_t r = probs.shape[0], c = probs.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((r, c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef double inner
    with nogil:
        for i in range(r):
            inner = 0.0
            for j in range(c):
                inner += dprobs[i, j] * probs[i, j]
            for j in range(c):
                out[i, j] = <real> (probs[i, j] * (dprobs[i, j] - inner))
    return out_arr


def gelu_fwd(real[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((r, c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef double v, u
    with nogil:
        for i in range(r):
            for j in range(c):
                v = x[i, j]
                u = _GELU_C * (v + _GELU_A * v * v * v)
                out[i, j] = <real> (0.5 * v * (1.0 + tanh(u)))
    return out_arr


def gelu_bwd(real[:, ::1] dy, real[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((r, c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef double v, v2, u, t, du
    with nogil:
        for i in range(r):
            for j in range(c):
                v = x[i, j]
                v2 = v * v
                u = _GELU_C * (v + _GELU_A * v * v2)
                t = tanh(u)
                du = _GELU_C * (1.0 + 3.0 * _GELU_A * v2)
                out[i, j] = <real> (dy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
    return out_arr


def xent_fwd_bwd(real[:, ::1] logits, long[::1] targets):
    cdef Py_ssize_t r = logits.shape[0], v = logits.shape[1], i, j
    cdef Py_ssize_t tgt
    dtype = np.float32 if real is float else np.float64
    losses_arr = np.empty(r, dtype=dtype)
    dlogits_arr = np.empty((r, v), dtype=dtype)
    cdef real[::1] losses = losses_arr
    cdef real[:, ::1] dlogits = dlogits_arr
    cdef double m, z, e
    with nogil:
        for i in range(r):
            tgt = targets[i]
            m = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > m:
                    m = logits[i, j]
            z = 0.0
            for j in range(v):
                e = exp(logits[i, j] - m)
                dlogits[i, j] = <real> e
                z += e
            losses[i] = <real> (log(z) - (logits[i, tgt] - m))
            for j in range(v):
                dlogits[i, j] = <real> (dlogits[i, j] / z)
            dlogits[i, tgt] -= <real> 1.0
    return losses_arr, dlogits_arr


def adamw_step(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
               long t, double lr, double beta1, double beta2, double eps,
               double weight_decay):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double g, mi, vi
    with nogil:
        for i in range(n):
            g = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * g * g
            m[i] = <real> mi
            v[i] = <real> vi
            if weight_decay != 0.0:
                param[i] -= <real> (lr * weight_decay * param[i])
            param[i] -= <real> (lr * (mi / bc1) / (sqrt(vi / bc2) + eps))
