import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvggnet import _kernels as K

pytestmark = pytest.mark.skipif(not K.NUMBA_AVAILABLE, reason="numba not importable")

MODES = [K.AMPLITUDE, K.AREA, K.REAL_SPLIT]


@st.composite
def pool_inputs(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    window = draw(st.integers(1, 3))
    stride = draw(st.integers(1, 3))
    h = draw(st.integers(window, 9))
    w = draw(st.integers(window, 9))
    dtype = draw(st.sampled_from([np.float32, np.float64]))
    shape = (draw(st.integers(1, 2)), draw(st.integers(1, 3)), h, w)
    if draw(st.booleans()):  # coarse grid -> many ties
        re = rng.integers(-2, 3, shape).astype(dtype)
        im = rng.integers(-2, 3, shape).astype(dtype)
    else:
        re = rng.normal(size=shape).astype(dtype)
        im = rng.normal(size=shape).astype(dtype)
    return re, im, window, stride, draw(st.sampled_from(MODES))


@given(pool_inputs())
def test_forward_paths_identical(args):
    re, im, window, stride, mode = args
    a = K.pool_forward_numpy(re, im, window, stride, mode)
    b = K.pool_forward_numba(re, im, window, stride, mode)
    for x, y in zip(a, b):
        assert x.dtype == y.dtype
        np.testing.assert_array_equal(x, y)


@given(pool_inputs())
def test_backward_paths_agree(args):
    re, im, window, stride, mode = args
    _, _, idx_re, idx_im = K.pool_forward_numpy(re, im, window, stride, mode)
    rng = np.random.default_rng(0)
    g_re = rng.normal(size=idx_re.shape).astype(re.dtype)
    g_im = rng.normal(size=idx_re.shape).astype(re.dtype)
    a = K.pool_backward_numpy(g_re, g_im, idx_re, idx_im, re.shape, window, stride)
    b = K.pool_backward_numba(g_re, g_im, idx_re, idx_im, re.shape, window, stride)
    for x, y, g in zip(a, b, (g_re, g_im)):
        if stride >= window:  # disjoint windows: each cell gets at most one term
            np.testing.assert_array_equal(x, y)
        else:
            np.testing.assert_allclose(x, y, rtol=1e-5, atol=1e-6)
        assert x.sum(dtype=np.float64) == pytest.approx(g.sum(dtype=np.float64), abs=1e-4)


def test_env_flag_selects_path(monkeypatch):
    calls = []
    monkeypatch.setattr(K, "pool_forward_numba", lambda *a: calls.append("numba") or K.pool_forward_numpy(*a))
    re = np.ones((1, 1, 2, 2))
    monkeypatch.setenv("CVGGNET_NUMBA", "0")
    assert not K.use_numba()
    K.pool_forward(re, re, 2, 2, K.AREA)
    assert calls == []
    monkeypatch.setenv("CVGGNET_NUMBA", "1")
    assert K.use_numba()
    K.pool_forward(re, re, 2, 2, K.AREA)
    assert calls == ["numba"]
