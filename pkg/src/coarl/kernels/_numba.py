"""numba-compiled kernels, numerically equivalent to ``_numpy`` (not bit-equal).

Inputs must be C-contiguous float64 (int64 for ids); the dispatcher in
``coarl.kernels`` takes care of that.
"""

import math

import numpy as np
from numba import njit

from ._numpy import GELU_A, GELU_C


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):
    rows, n = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows)
    for i in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


@njit(cache=True)
def layer_norm_bwd(g, xhat, rstd, gain):
    rows, n = g.shape
    dx = np.empty_like(g)
    dgain = np.zeros(n)
    dbias = np.zeros(n)
    for i in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            gx = g[i, j] * gain[j]
            s1 += gx
            s2 += gx * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        c = rstd[i] / n
        for j in range(n):
            dx[i, j] = c * (n * g[i, j] * gain[j] - s1 - xhat[i, j] * s2)
    return dx, dgain, dbias


@njit(cache=True)
def softmax_fwd(x):
    rows, n = x.shape
    y = np.empty_like(x)
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        for j in range(n):
            y[i, j] /= s
    return y


@njit(cache=True)
def softmax_bwd(g, y):
    rows, n = g.shape
    dx = np.empty_like(g)
    for i in range(rows):
        s = 0.0
        for j in range(n):
            s += g[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return dx


@njit(cache=True)
def log_softmax_fwd(x):
    rows, n = x.shape
    y = np.empty_like(x)
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            s += math.exp(x[i, j] - m)
        ls = math.log(s)
        for j in range(n):
            y[i, j] = x[i, j] - m - ls
    return y


@njit(cache=True)
def log_softmax_bwd(g, y):
    rows, n = g.shape
    dx = np.empty_like(g)
    for i in range(rows):
        s = 0.0
        for j in range(n):
            s += g[i, j]
        for j in range(n):
            dx[i, j] = g[i, j] - math.exp(y[i, j]) * s
    return dx


@njit(cache=True)
def gelu_fwd(x):
    y = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        y[i] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + GELU_A * v * v * v)))
    return y


@njit(cache=True)
def gelu_bwd(g, x):
    dx = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        t = math.tanh(GELU_C * (v + GELU_A * v * v * v))
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        dx[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return dx


@njit(cache=True)
def _ce_fwd(logits, targets, ignore_id):
    logp = log_softmax_fwd(logits)
    total = 0.0
    count = 0
    for i in range(logits.shape[0]):
        t = targets[i]
        if t != ignore_id:
            total -= logp[i, t]
            count += 1
    return total, count, logp


def cross_entropy_fwd(logits, targets, ignore_id):
    total, count, logp = _ce_fwd(logits, targets, ignore_id)
    return total, int(count), logp


@njit(cache=True)
def cross_entropy_bwd(logp, targets, ignore_id, scale):
    rows, n = logp.shape
    grad = np.zeros_like(logp)
    for i in range(rows):
        t = targets[i]
        if t == ignore_id:
            continue
        for j in range(n):
            grad[i, j] = math.exp(logp[i, j]) * scale
        grad[i, t] -= scale
    return grad


@njit(cache=True)
def _lcs(a, b):
    n, m = a.size, b.size
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        cur[0] = 0
        for j in range(m):
            if a[i] == b[j]:
                cur[j + 1] = prev[j] + 1
            elif prev[j + 1] >= cur[j]:
                cur[j + 1] = prev[j + 1]
            else:
                cur[j + 1] = cur[j]
        prev, cur = cur, prev
    return prev[m]


def lcs_length(a, b):
    if a.size == 0 or b.size == 0:
        return 0
    return int(_lcs(a, b))
