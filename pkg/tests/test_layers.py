import math

import numpy as np
import pytest

from segnl.nn import layers
from segnl.nn.optim import Adam, adam_step

from conftest import numeric_grad, rel_error

H = 1e-5
TOL = 1e-5
INSTANCES = 10


def away_from_kinks(rng, shape, gap=1e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < gap] += 2 * gap
    return x


def pool_input(rng, shape, gap=1e-3):
    """Random input whose 2x2 blocks have a unique max separated by > gap."""
    while True:
        x = rng.normal(size=shape)
        n, h, w, c = shape
        blocks = np.sort(x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4), axis=1)
        if np.all(blocks[:, -1] - blocks[:, -2] > gap):
            return x


def check(f, wrt, analytic, tol=TOL):
    for x, g in zip(wrt, analytic):
        assert rel_error(numeric_grad(f, x, H), g) <= tol


# -- gradient suite ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(INSTANCES))
def test_grad_conv2d(seed):
    rng = np.random.default_rng(seed)
    n, h, w, cin, cout = rng.integers(1, 3), rng.integers(2, 5), rng.integers(2, 5), rng.integers(1, 4), rng.integers(1, 4)
    x = rng.normal(size=(n, h, w, cin))
    k = rng.normal(size=(cout, cin, 3, 3))
    b = rng.normal(size=cout)
    r = rng.normal(size=(n, h, w, cout))
    f = lambda: float(np.sum(layers.conv2d_forward(x, k, b)[0] * r))
    _, cache = layers.conv2d_forward(x, k, b)
    dx, dk, db = layers.conv2d_backward(r, cache)
    check(f, [x, k, b], [dx, dk, db], tol=1e-6)


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_grad_conv1x1(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(2, 3, 2, 4))
    k = rng.normal(size=(3, 4, 1, 1))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, 3, 2, 3))
    f = lambda: float(np.sum(layers.conv1x1_forward(x, k, b)[0] * r))
    _, cache = layers.conv1x1_forward(x, k, b)
    check(f, [x, k, b], layers.conv1x1_backward(r, cache))


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_grad_maxpool2(seed):
    rng = np.random.default_rng(200 + seed)
    x = pool_input(rng, (2, 4, 6, 2))
    r = rng.normal(size=(2, 2, 3, 2))
    f = lambda: float(np.sum(layers.maxpool2_forward(x)[0] * r))
    _, arg = layers.maxpool2_forward(x)
    check(f, [x], [layers.maxpool2_backward(r, arg)], tol=1e-6)


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_grad_transposed_conv2(seed):
    rng = np.random.default_rng(300 + seed)
    cin, cout = rng.integers(1, 4), rng.integers(1, 4)
    x = rng.normal(size=(2, 3, 2, cin))
    k = rng.normal(size=(cin, cout, 2, 2))
    b = rng.normal(size=cout)
    r = rng.normal(size=(2, 6, 4, cout))
    f = lambda: float(np.sum(layers.transposed_conv2_forward(x, k, b)[0] * r))
    _, cache = layers.transposed_conv2_forward(x, k, b)
    check(f, [x, k, b], layers.transposed_conv2_backward(r, cache), tol=1e-6)


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_grad_leaky_relu(seed):
    rng = np.random.default_rng(400 + seed)
    x = away_from_kinks(rng, (3, 4, 5, 2))
    r = rng.normal(size=x.shape)
    f = lambda: float(np.sum(layers.leaky_relu_forward(x, 0.01)[0] * r))
    _, cache = layers.leaky_relu_forward(x, 0.01)
    check(f, [x], [layers.leaky_relu_backward(r, cache)])


@pytest.mark.parametrize("seed", range(INSTANCES))
@pytest.mark.parametrize("train", [True, False])
def test_grad_batchnorm(seed, train):
    rng = np.random.default_rng(500 + seed)
    c = 3
    x = rng.normal(2.0, 3.0, size=(2, 3, 4, c))
    gamma, beta = rng.normal(size=c), rng.normal(size=c)
    r = rng.normal(size=x.shape)
    stats = {"running_mean": rng.normal(size=c), "running_var": rng.uniform(0.5, 2, size=c)}

    def f():
        state = {k: v.copy() for k, v in stats.items()}
        return float(np.sum(layers.batchnorm_forward(x, gamma, beta, state, train)[0] * r))

    state = {k: v.copy() for k, v in stats.items()}
    _, cache = layers.batchnorm_forward(x, gamma, beta, state, train)
    check(f, [x, gamma, beta], layers.batchnorm_backward(r, cache))


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_grad_weighted_crossentropy(seed):
    rng = np.random.default_rng(600 + seed)
    logits = rng.normal(size=(2, 3, 3, 4)) * 2
    target = rng.integers(0, 3, size=(2, 3, 4))
    weights = (0.01, 1.0, 1.0) if seed % 2 else tuple(rng.uniform(0.01, 2, 3))
    f = lambda: layers.weighted_softmax_crossentropy(logits, target, weights)[0]
    _, g = layers.weighted_softmax_crossentropy(logits, target, weights)
    check(f, [logits], [g])


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_grad_l2(seed):
    rng = np.random.default_rng(700 + seed)
    ws = [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(4,))]
    lam = 10 ** rng.uniform(-6, -2)
    f = lambda: layers.l2_penalty(ws, lam)[0]
    check(f, ws, layers.l2_penalty(ws, lam)[1])


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_grad_dropout_fixed_mask(seed):
    rng = np.random.default_rng(800 + seed)
    x = rng.normal(size=(2, 3, 3, 2))
    r = rng.normal(size=x.shape)
    f = lambda: float(np.sum(layers.dropout_forward(x, 0.3, True, np.random.default_rng(seed))[0] * r))
    _, mask = layers.dropout_forward(x, 0.3, True, np.random.default_rng(seed))
    check(f, [x], [layers.dropout_backward(r, mask)])


# -- forward examples --------------------------------------------------------

def nhwc(a):
    return np.asarray(a, dtype=np.float64)[None, :, :, None]


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 4, 1))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(layers.conv2d_forward(x, k, np.zeros(1))[0], x)


def test_conv_all_ones_overlap_counts():
    out, _ = layers.conv2d_forward(nhwc(np.ones((3, 3))), np.ones((1, 1, 3, 3)), np.zeros(1))
    np.testing.assert_array_equal(out[0, :, :, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_matches_direct_loops(rng):
    x = rng.normal(size=(2, 4, 5, 3))
    k = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 4, 5, 2))
    for n in range(2):
        for i in range(4):
            for j in range(5):
                for o in range(2):
                    ref[n, i, j, o] = np.sum(xp[n, i:i + 3, j:j + 3, :] * k[o].transpose(1, 2, 0)) + b[o]
    np.testing.assert_allclose(layers.conv2d_forward(x, k, b)[0], ref, rtol=1e-12, atol=1e-12)


def test_shape_errors():
    with pytest.raises(layers.ShapeError):
        layers.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 3)), np.zeros(3))
    with pytest.raises(layers.ShapeError):
        layers.maxpool2_forward(np.zeros((1, 3, 4, 1)))
    with pytest.raises(layers.ShapeError):
        layers.transposed_conv2_forward(np.zeros((1, 2, 2, 2)), np.zeros((3, 1, 2, 2)), np.zeros(1))
    with pytest.raises(layers.ShapeError):
        layers.batchnorm_forward(np.zeros((1, 1, 1, 2)), np.ones(2), np.zeros(2),
                                 {"running_mean": np.zeros(2), "running_var": np.ones(2)}, True)


def test_maxpool_example():
    out, _ = layers.maxpool2_forward(nhwc([[1, 2], [3, 4]]))
    assert out.item() == 4.0


def test_maxpool_constant_routes_to_first():
    out, arg = layers.maxpool2_forward(np.full((1, 4, 4, 1), 2.0))
    assert np.all(out == 2.0)
    dx = layers.maxpool2_backward(np.ones_like(out), arg)
    np.testing.assert_array_equal(dx[0, :, :, 0], np.kron(np.ones((2, 2)), [[1, 0], [0, 0]]))


def test_transposed_conv_single_tap():
    k = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, _ = layers.transposed_conv2_forward(np.full((1, 1, 1, 1), 2.5), k, np.zeros(1))
    np.testing.assert_array_equal(out[0, :, :, 0], 2.5 * np.array([[1, 2], [3, 4]]))


def conv_stride2_oracle(y, k):
    """Stride-2 2x2 convolution by loops: y (N,2H,2W,Cout), k (Cin,Cout,2,2) -> (N,H,W,Cin)."""
    n, h2, w2, cout = y.shape
    out = np.zeros((n, h2 // 2, w2 // 2, k.shape[0]))
    for i in range(h2 // 2):
        for j in range(w2 // 2):
            for a in range(2):
                for b in range(2):
                    out[:, i, j, :] += y[:, 2 * i + a, 2 * j + b, :] @ k[:, :, a, b].T
    return out


def test_transposed_conv_adjoint(rng):
    for _ in range(5):
        k = rng.normal(size=(3, 2, 2, 2))
        x = rng.normal(size=(2, 3, 4, 3))
        y = rng.normal(size=(2, 6, 8, 2))
        lhs = np.sum(conv_stride2_oracle(y, k) * x)
        rhs = np.sum(y * layers.transposed_conv2_forward(x, k, np.zeros(2))[0])
        assert math.isclose(lhs, rhs, rel_tol=1e-12)


def test_leaky_relu_values():
    out, cache = layers.leaky_relu_forward(np.array([2.0, -1.0, 0.0]), 0.01)
    np.testing.assert_array_equal(out, [2.0, -0.01, 0.0])
    np.testing.assert_array_equal(layers.leaky_relu_backward(np.ones(3), cache), [1.0, 0.01, 0.01])


def test_dropout_modes_and_statistics():
    x = np.ones((1000, 1000), dtype=np.float32)
    assert layers.dropout_forward(x, 0.1, False)[0] is x
    assert layers.dropout_forward(x, 0.0, True, np.random.default_rng(0))[0] is x
    out, _ = layers.dropout_forward(x, 0.1, True, np.random.default_rng(0))
    assert abs(out.mean() - 1.0) < 0.01
    assert abs(np.mean(out == 0) - 0.1) < 0.01
    with pytest.raises(ValueError):
        layers.dropout_forward(x, 1.0, True, np.random.default_rng(0))


def test_batchnorm_train_normalises(rng):
    x = rng.normal(5.0, 3.0, size=(4, 6, 6, 3))
    state = {"running_mean": np.zeros(3), "running_var": np.ones(3)}
    out, _ = layers.batchnorm_forward(x, np.ones(3), np.zeros(3), state, True)
    flat = out.reshape(-1, 3)
    assert np.all(np.abs(flat.mean(axis=0)) <= 1e-6)
    assert np.all(np.abs(flat.var(axis=0) - 1) <= 1e-4)
    # running stats moved 10% of the way
    np.testing.assert_allclose(state["running_mean"], 0.1 * x.reshape(-1, 3).mean(axis=0))
    np.testing.assert_allclose(state["running_var"], 0.9 + 0.1 * x.reshape(-1, 3).var(axis=0))


def test_batchnorm_eval_identity(rng):
    x = rng.normal(size=(2, 3, 3, 4))
    state = {"running_mean": np.zeros(4), "running_var": np.ones(4)}
    out, _ = layers.batchnorm_forward(x, np.ones(4), np.zeros(4), state, False, eps=0.0)
    np.testing.assert_array_equal(out, x)


def single_pixel(logits, target):
    return layers.weighted_softmax_crossentropy(np.asarray(logits, float).reshape(1, 3, 1, 1),
                                                np.array(target).reshape(1, 1, 1))[0]


def test_crossentropy_examples():
    assert single_pixel([0, 0, 0], 1) == pytest.approx(math.log(3), abs=1e-12)
    assert single_pixel([0, 0, 0], 0) == pytest.approx(0.01 * math.log(3), abs=1e-12)
    assert single_pixel([0, 50, 0], 1) <= 1e-3
    with pytest.raises(ValueError):
        single_pixel([0, 0, 0], 3)


def test_crossentropy_extreme_logits_finite():
    loss, g = layers.weighted_softmax_crossentropy(np.array([1e4, -1e4, 0.0]).reshape(1, 3, 1, 1),
                                                   np.array([[[1]]]))
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_l2_examples():
    assert layers.l2_penalty([np.zeros((3, 3))], 1e-5)[0] == 0.0
    pen, grads = layers.l2_penalty([np.array([2.0])], 1e-5)
    assert pen == pytest.approx(2e-5) and grads[0][0] == pytest.approx(2e-5)
    w = [np.arange(4.0)]
    assert layers.l2_penalty(w, 2e-5)[0] == pytest.approx(2 * layers.l2_penalty(w, 1e-5)[0])


def test_he_init_statistics():
    w = layers.he_init((10 ** 6,), 18, np.random.default_rng(0), np.float64)
    assert abs(w.var() / (2 / 18) - 1) < 0.02
    assert abs(w.mean()) < 3 * w.std() / math.sqrt(w.size)
    a = layers.he_init((4, 2, 3, 3), 18, np.random.default_rng(1))
    b = layers.he_init((4, 2, 3, 3), 18, np.random.default_rng(1))
    assert a.tobytes() == b.tobytes()


def test_adam_zero_gradient_no_move():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, {}, 1, 1e-3)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_closed_form():
    g = np.array([3.0, -0.5, 1e-9])
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": g}, {}, 1, 1e-3)
    # mhat = g, vhat = g^2 after bias correction
    np.testing.assert_allclose(p["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert p["w"][0] == pytest.approx(-1e-3, rel=1e-8)


def test_adam_deterministic(rng):
    grads = [{"w": rng.normal(size=5)} for _ in range(10)]
    runs = []
    for _ in range(2):
        opt, p = Adam(), {"w": np.ones(5)}
        for g in grads:
            opt.step(p, g, 1e-2)
        runs.append(p["w"].copy())
    assert runs[0].tobytes() == runs[1].tobytes()
    with pytest.raises(ValueError):
        adam_step({"w": np.ones(1)}, {"w": np.ones(1)}, {}, 0, 1e-3)
