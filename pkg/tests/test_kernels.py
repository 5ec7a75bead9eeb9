import os
import subprocess
import sys

import numpy as np
import pytest

from moca_lab.kernels import numpy_impl
from moca_lab.randkit import _wood_constants

numba_impl = pytest.importorskip("moca_lab.kernels.numba_impl")


@pytest.mark.parametrize("seed", range(4))
def test_jacobi_backends_agree(seed):
    a = np.random.default_rng(seed).standard_normal((30, 12))
    gram = a.T @ a
    x, _ = numpy_impl.jacobi_eigvals(gram, 1e-12)
    y, _ = numba_impl.jacobi_eigvals(gram, 1e-12)
    np.testing.assert_allclose(np.sort(x), np.sort(y), rtol=1e-12, atol=1e-10)
    np.testing.assert_allclose(np.sort(x), np.linalg.eigvalsh(gram), rtol=1e-10, atol=1e-10)


def test_jacobi_diagonal_input_needs_no_sweeps():
    vals, sweeps = numpy_impl.jacobi_eigvals(np.diag([3.0, 1.0, 2.0]), 1e-12)
    assert sorted(vals.tolist()) == [1.0, 2.0, 3.0] and sweeps == 0


@pytest.mark.parametrize("kappa,d", [(0.0, 3), (1.0, 8), (100.0, 64), (1e6, 5)])
def test_wood_backends_agree(kappa, d):
    rng = np.random.default_rng(int(kappa) + d)
    b, a, dconst, m1 = _wood_constants(kappa, d)
    z = rng.beta(m1 / 2, m1 / 2, 10_000)
    u = rng.random(10_000)
    w1, acc1 = numpy_impl.wood_accept(z, u, b, a, dconst, m1)
    w2, acc2 = numba_impl.wood_accept(z, u, b, a, dconst, m1)
    np.testing.assert_allclose(w1, w2, rtol=0, atol=1e-15)
    assert np.array_equal(acc1, acc2)


@pytest.mark.parametrize("capacity,size", [(5, 0), (50, 50), (50, 12), (0, 0)])
def test_reservoir_backends_agree(capacity, size):
    rng = np.random.default_rng(capacity + size)
    seen = max(size, 7)
    draws = rng.integers(0, seen + np.arange(1, 201))
    a, sa = numpy_impl.reservoir_assign(capacity, size, draws)
    b, sb = numba_impl.reservoir_assign(capacity, size, draws)
    assert np.array_equal(a, b) and sa == sb


def test_numpy_backend_selected_by_flag():
    env = dict(os.environ, MOCA_LAB_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from moca_lab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
