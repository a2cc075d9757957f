"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is fixed at import time. Set ``COARL_NUMBA=0`` to force the numpy
path; the numba path is used by default whenever numba imports cleanly. Both
backends agree to ~1e-12 but are not bit-identical, so a run is only
reproducible bit-for-bit under the same backend.
"""

import os

import numpy as np

from . import _numpy

numpy_backend = _numpy

try:
    from . import _numba

    numba_backend = _numba
except ImportError:  # pragma: no cover - numba is optional
    numba_backend = None

_want_numba = os.environ.get("COARL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
BACKEND = "numba" if (_want_numba and numba_backend is not None) else "numpy"
_impl = numba_backend if BACKEND == "numba" else numpy_backend


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]), dtype=np.float64)


def layer_norm_fwd(x, gain, bias, eps):
    y, xhat, rstd = _impl.layer_norm_fwd(_rows(x), np.ascontiguousarray(gain), np.ascontiguousarray(bias), eps)
    return y.reshape(x.shape), xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gain):
    dx, dgain, dbias = _impl.layer_norm_bwd(_rows(g), xhat, rstd, np.ascontiguousarray(gain))
    return dx.reshape(g.shape), dgain, dbias


def softmax_fwd(x):
    return _impl.softmax_fwd(_rows(x)).reshape(x.shape)


def softmax_bwd(g, y):
    return _impl.softmax_bwd(_rows(g), _rows(y)).reshape(g.shape)


def log_softmax_fwd(x):
    return _impl.log_softmax_fwd(_rows(x)).reshape(x.shape)


def log_softmax_bwd(g, y):
    return _impl.log_softmax_bwd(_rows(g), _rows(y)).reshape(g.shape)


def gelu_fwd(x):
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    return _impl.gelu_fwd(flat).reshape(x.shape)


def gelu_bwd(g, x):
    gf = np.ascontiguousarray(g, dtype=np.float64).ravel()
    xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    return _impl.gelu_bwd(gf, xf).reshape(x.shape)


def cross_entropy_fwd(logits2d, targets, ignore_id):
    return _impl.cross_entropy_fwd(
        _rows(logits2d), np.ascontiguousarray(targets, dtype=np.int64), int(ignore_id)
    )


def cross_entropy_bwd(logp, targets, ignore_id, scale):
    return _impl.cross_entropy_bwd(
        logp, np.ascontiguousarray(targets, dtype=np.int64), int(ignore_id), float(scale)
    )


def lcs_length(a, b):
    return _impl.lcs_length(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))


__all__ = [
    "BACKEND",
    "numpy_backend",
    "numba_backend",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "log_softmax_fwd",
    "log_softmax_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "cross_entropy_fwd",
    "cross_entropy_bwd",
    "lcs_length",
]
