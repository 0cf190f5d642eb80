import os
import subprocess
import sys

import numpy as np
import pytest

from segnl import kernels

backends = kernels.available_backends()
needs_both = pytest.mark.skipif(len(backends) < 2, reason="compiled extension not built")


def test_python_backend_always_available():
    assert "python" in backends


@pytest.mark.parametrize("env,expected", [({"SEGNL_PURE_PYTHON": "1"}, "python")])
def test_env_forces_fallback(env, expected):
    out = subprocess.run([sys.executable, "-c", "from segnl import kernels; print(kernels.BACKEND)"],
                         env={**os.environ, **env}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_default_backend_is_compiled_when_built():
    if "cython" in backends and not os.environ.get("SEGNL_PURE_PYTHON"):
        assert kernels.BACKEND == "cython"


@needs_both
def test_flood_backends_identical():
    cy, py = kernels.load_backend("cython"), kernels.load_backend("python")
    rng = np.random.default_rng(11)
    for i in range(60):
        shape = tuple(rng.integers(2, 8, 3))
        mask = (rng.random(shape) < 0.85).astype(np.uint8)
        mask.flat[:2] = 1
        pts = np.argwhere(mask)
        seeds = np.ascontiguousarray(pts[rng.choice(len(pts), 2, replace=False)], dtype=np.intp)
        surface = rng.normal(size=shape)
        if i % 2:
            surface = np.round(surface)
        labs = np.array([1, 2], np.uint8)
        level = float(rng.uniform(-1, 3))
        la, ta = cy.flood(surface, mask, seeds, labs, level, True)
        lb, tb = py.flood(surface, mask, seeds, labs, level, True)
        np.testing.assert_array_equal(la, lb)
        np.testing.assert_array_equal(ta, tb)


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_dense_kernels_identical(dtype):
    cy, py = kernels.load_backend("cython"), kernels.load_backend("python")
    rng = np.random.default_rng(5)
    for n, h, w, c in [(1, 2, 2, 1), (2, 4, 6, 3), (3, 8, 8, 5)]:
        x = rng.normal(size=(n, h, w, c)).astype(dtype)
        x[0, 0, 0] = x[0, 0, 1]  # a tie inside a pooling block
        np.testing.assert_array_equal(cy.im2col3x3(x), py.im2col3x3(x))
        cols = rng.normal(size=(n * h * w, 9 * c)).astype(dtype)
        np.testing.assert_array_equal(cy.col2im3x3(cols, n, h, w), py.col2im3x3(cols, n, h, w))
        oa, aa = cy.maxpool2_forward(x)
        ob, ab = py.maxpool2_forward(x)
        np.testing.assert_array_equal(oa, ob)
        np.testing.assert_array_equal(aa, ab)
        d = rng.normal(size=oa.shape).astype(dtype)
        np.testing.assert_array_equal(cy.maxpool2_backward(d, aa), py.maxpool2_backward(d, ab))


@pytest.mark.parametrize("name", backends)
def test_im2col_col2im_adjoint(name):
    k = kernels.load_backend(name)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 4, 3))
    y = rng.normal(size=(2 * 5 * 4, 27))
    assert np.isclose(np.sum(k.im2col3x3(x) * y), np.sum(x * k.col2im3x3(y, 2, 5, 4)))


@pytest.mark.parametrize("name", backends)
def test_maxpool_tie_goes_to_first(name):
    k = kernels.load_backend(name)
    x = np.ones((1, 2, 2, 1))
    out, arg = k.maxpool2_forward(x)
    assert out.item() == 1.0 and arg.item() == 0
    dx = k.maxpool2_backward(np.full((1, 1, 1, 1), 3.0), arg)
    np.testing.assert_array_equal(dx[0, :, :, 0], [[3.0, 0.0], [0.0, 0.0]])
