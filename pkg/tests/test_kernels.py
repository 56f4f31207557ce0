import importlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from memloc.kernels import _pykernels as py

try:
    from memloc.kernels import _ckernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@given(n=st.integers(1, 3), c=st.integers(1, 3), h=st.integers(3, 8), k=st.sampled_from([1, 3]),
       stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 99))
def test_im2col_col2im_backends_bitwise(dtype, n, c, h, k, stride, pad, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, h, h)).astype(dtype)
    a, b = py.im2col(x, k, k, stride, pad), cy.im2col(x, k, k, stride, pad)
    assert a.dtype == b.dtype and np.array_equal(a, b)
    cols = np.random.default_rng(seed + 1).standard_normal(a.shape).astype(dtype)
    assert np.array_equal(py.col2im(cols, x.shape, k, k, stride, pad), cy.col2im(cols, x.shape, k, k, stride, pad))


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@given(seed=st.integers(0, 99), ties=st.booleans())
def test_maxpool_backends_bitwise(dtype, seed, ties):
    rng = np.random.default_rng(seed)
    x = (rng.integers(0, 3, (2, 3, 6, 6)) if ties else rng.standard_normal((2, 3, 6, 6))).astype(dtype)
    (oa, ia), (ob, ib) = py.maxpool2x2(x), cy.maxpool2x2(x)
    assert np.array_equal(oa, ob) and np.array_equal(ia, ib)
    g = rng.standard_normal(oa.shape).astype(dtype)
    assert np.array_equal(py.maxpool2x2_backward(g, ia, x.shape), cy.maxpool2x2_backward(g, ib, x.shape))


def test_im2col_matches_direct_convolution():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))
    cols = py.im2col(x, 3, 3, 1, 1)
    out = (w.reshape(4, -1) @ cols).reshape(4, 2, 5, 5).transpose(1, 0, 2, 3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    direct = np.zeros_like(out)
    for i in range(5):
        for j in range(5):
            direct[:, :, i, j] = np.einsum("nchw,ochw->no", xp[:, :, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, direct, rtol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 6, 6))
    cols = rng.standard_normal(py.im2col(x, 3, 3, 2, 1).shape)
    lhs = np.sum(py.im2col(x, 3, 3, 2, 1) * cols)
    rhs = np.sum(x * py.col2im(cols, x.shape, 3, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_pool_first_max_wins_on_ties():
    x = np.ones((1, 1, 2, 2))
    out, idx = py.maxpool2x2(x)
    assert idx.ravel()[0] == 0


def test_env_var_selects_python_backend():
    code = "import memloc.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, MEMLOC_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
