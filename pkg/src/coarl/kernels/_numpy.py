"""Pure-numpy reference kernels.

Every kernel works on 2-D ``(rows, n)`` float64 arrays (row-wise reductions over
the last axis) or flat arrays. Shapes are restored by the caller.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd(g, xhat, rstd, gain):
    n = xhat.shape[1]
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    gx = g * gain
    dx = (rstd[:, None] / n) * (
        n * gx
        - gx.sum(axis=1, keepdims=True)
        - xhat * (gx * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def log_softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_bwd(g, y):
    return g - np.exp(y) * g.sum(axis=1, keepdims=True)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_bwd(g, x):
    u = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def cross_entropy_fwd(logits, targets, ignore_id):
    """Summed NLL over kept rows, kept-row count, and per-row log-softmax."""
    logp = log_softmax_fwd(logits)
    keep = targets != ignore_id
    rows = np.nonzero(keep)[0]
    total = -logp[rows, targets[rows]].sum()
    return total, int(rows.size), logp


def cross_entropy_bwd(logp, targets, ignore_id, scale):
    grad = np.exp(logp)
    keep = targets != ignore_id
    rows = np.nonzero(keep)[0]
    grad[rows, targets[rows]] -= 1.0
    grad[~keep] = 0.0
    return grad * scale


def lcs_length(a, b):
    n, m = a.size, b.size
    if n == 0 or m == 0:
        return 0
    prev = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        cur = np.zeros(m + 1, dtype=np.int64)
        match = b == a[i]
        for j in range(m):
            if match[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = max(prev[j + 1], cur[j])
        prev = cur
    return int(prev[m])
