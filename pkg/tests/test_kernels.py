import os
import subprocess
import sys

import numpy as np
import pytest

from coarl import kernels
from coarl.kernels import _numpy

BACKENDS = [kernels.numpy_backend] + ([kernels.numba_backend] if kernels.numba_backend is not None else [])
IDS = [b.__name__.rsplit(".", 1)[-1] for b in BACKENDS]


@pytest.fixture(params=BACKENDS, ids=IDS)
def backend(request):
    return request.param


def _x(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestAgreement:
    def test_layer_norm(self, backend):
        x, g, b = _x((5, 7)), _x(7, 1), _x(7, 2)
        y, xhat, rstd = backend.layer_norm_fwd(x, g, b, 1e-5)
        y0, xhat0, rstd0 = _numpy.layer_norm_fwd(x, g, b, 1e-5)
        np.testing.assert_allclose(y, y0, rtol=1e-12, atol=1e-12)
        up = _x((5, 7), 3)
        for a, b0 in zip(backend.layer_norm_bwd(up, xhat, rstd, g), _numpy.layer_norm_bwd(up, xhat0, rstd0, g)):
            np.testing.assert_allclose(a, b0, rtol=1e-12, atol=1e-12)

    def test_softmax_rows_sum_to_one(self, backend):
        y = backend.softmax_fwd(_x((4, 9)) * 30)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y >= 0)

    def test_log_softmax_matches_log_of_softmax(self, backend):
        x = _x((3, 6))
        np.testing.assert_allclose(backend.log_softmax_fwd(x), np.log(_numpy.softmax_fwd(x)), atol=1e-12)

    def test_log_softmax_is_stable_for_huge_logits(self, backend):
        x = np.array([[1e4, 0.0, -1e4]])
        out = backend.log_softmax_fwd(x)
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_gelu(self, backend):
        x = np.linspace(-6, 6, 101)
        np.testing.assert_allclose(backend.gelu_fwd(x), _numpy.gelu_fwd(x), atol=1e-14)
        g = _x(101, 4)
        np.testing.assert_allclose(backend.gelu_bwd(g, x), _numpy.gelu_bwd(g, x), atol=1e-13)

    def test_cross_entropy_skips_ignored(self, backend):
        logits = _x((4, 5))
        targets = np.array([1, -100, 4, 0])
        total, count, logp = backend.cross_entropy_fwd(logits, targets, -100)
        assert count == 3
        lp = _numpy.log_softmax_fwd(logits)
        assert total == pytest.approx(-(lp[0, 1] + lp[2, 4] + lp[3, 0]), rel=1e-12)
        grad = backend.cross_entropy_bwd(logp, targets, -100, 1.0)
        np.testing.assert_array_equal(grad[1], 0.0)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    @pytest.mark.parametrize(
        "a,b,expected",
        [([1, 2, 3], [1, 2, 3], 3), ([1, 2, 3], [3, 2, 1], 1), ([], [1], 0), ([1, 3, 5, 7], [0, 1, 5, 6, 7], 3)],
    )
    def test_lcs(self, backend, a, b, expected):
        assert backend.lcs_length(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)) == expected


class TestDispatcher:
    def test_backend_name(self):
        assert kernels.BACKEND in ("numba", "numpy")

    def test_wrappers_restore_shape(self):
        x = _x((2, 3, 4))
        assert kernels.softmax_fwd(x).shape == (2, 3, 4)
        y, _, _ = kernels.layer_norm_fwd(x, np.ones(4), np.zeros(4), 1e-5)
        assert y.shape == x.shape

    def test_env_flag_selects_numpy(self):
        env = {**os.environ, "COARL_NUMBA": "0"}
        out = subprocess.run(
            [sys.executable, "-c", "import coarl.kernels as k; print(k.BACKEND)"],
            capture_output=True, text=True, env=env, check=True,
        )
        assert out.stdout.strip() == "numpy"


def test_benchmark_script_runs():
    import pathlib
    import subprocess
    import sys

    script = pathlib.Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"
    proc = subprocess.run([sys.executable, str(script), "--repeat", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "lcs_length" in proc.stdout
