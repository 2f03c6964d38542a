import numpy as np
import pytest

from fairfl.diffcore import (
    SGD,
    Adam,
    NonFiniteError,
    ParamVector,
    activation_backward,
    activation_forward,
    affine_backward,
    affine_forward,
    as_tensor2,
    bce_with_logits,
    concat_backward,
    concat_forward,
    flatten,
    grad_check,
    gru_cell_backward,
    gru_cell_forward,
    load_checkpoint,
    make_optimizer,
    numerical_gradient,
    relative_error,
    save_checkpoint,
    sigmoid,
    softmax,
    softmax_ce,
    unflatten,
)


def test_affine_scalar_and_identity():
    y, _ = affine_forward(np.array([[3.0]]), np.array([[2.0]]), np.array([[1.0]]))
    assert y[0, 0] == 7.0
    x = np.arange(6.0).reshape(2, 3)
    y, _ = affine_forward(x, np.eye(3), np.zeros((1, 3)))
    assert np.array_equal(y, x)


def test_affine_matches_triple_loop():
    rng = np.random.default_rng(0)
    x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=(1, 2))
    y, _ = affine_forward(x, W, b)
    oracle = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            oracle[i, j] = b[0, j] + sum(x[i, k] * W[k, j] for k in range(3))
    assert np.abs(y - oracle).max() <= 1e-12


def test_affine_shape_mismatch():
    with pytest.raises(ValueError):
        affine_forward(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((1, 2)))


def test_affine_backward_fd():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=(1, 2))
    up = rng.normal(size=(4, 2))
    _, cache = affine_forward(x, W, b)
    dx, dW, db = affine_backward(up, cache)
    f = lambda **kw: float((affine_forward(kw.get("x", x), kw.get("W", W), kw.get("b", b))[0] * up).sum())
    assert grad_check(lambda v: f(x=v), dx, x) < 1e-6
    assert grad_check(lambda v: f(W=v), dW, W) < 1e-6
    assert grad_check(lambda v: f(b=v), db, b) < 1e-6


def test_activation_values():
    assert activation_forward(np.array([-1.0, 2.0]), "relu")[0].tolist() == [0.0, 2.0]
    assert activation_forward(np.array([0.0]), "tanh")[0][0] == 0.0
    assert activation_forward(np.array([0.0]), "sigmoid")[0][0] == 0.5
    with pytest.raises(ValueError):
        activation_forward(np.zeros(1), "gelu")


def test_sigmoid_extremes_are_finite():
    s = sigmoid(np.array([-800.0, 800.0]))
    assert s.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid"])
def test_activation_gradients_fd(kind):
    rng = np.random.default_rng(2)
    x = rng.normal(size=20)
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the ReLU kink
    up = rng.normal(size=20)
    _, cache = activation_forward(x, kind)
    g = activation_backward(up, cache)
    assert grad_check(lambda v: float((activation_forward(v, kind)[0] * up).sum()), g, x) < 1e-6


def test_bce_values_and_stability():
    assert bce_with_logits(np.array([0.0]), np.array([1.0]))[0] == pytest.approx(np.log(2), abs=1e-12)
    loss, grad = bce_with_logits(np.array([40.0, -40.0]), np.array([1.0, 0.0]))
    assert 0.0 <= loss < 1e-15 and np.all(np.isfinite(grad))
    loss, _ = bce_with_logits(np.array([1000.0]), np.array([0.0]))
    assert loss == pytest.approx(1000.0)


def test_bce_gradient_fd():
    rng = np.random.default_rng(3)
    z = rng.normal(scale=3, size=20)
    y = (rng.random(20) < 0.5).astype(float)
    _, g = bce_with_logits(z, y)
    assert grad_check(lambda v: bce_with_logits(v, y)[0], g, z, eps=1e-5) < 1e-6


def test_softmax_ce_values():
    loss, _ = softmax_ce(np.zeros((1, 4)), [2])
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    loss, _ = softmax_ce(np.array([[50.0, 0.0, 0.0]]), [0])
    assert loss < 1e-20
    assert softmax(np.array([[1.0, 2.0, 3.0]])).sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        softmax_ce(np.zeros((1, 3)), [3])


def test_softmax_ce_gradient_fd():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 4))
    cls = rng.integers(0, 4, size=5)
    _, g = softmax_ce(logits, cls)
    assert grad_check(lambda v: softmax_ce(v, cls)[0], g, logits) < 1e-6


def test_concat_round_trip():
    a, b = np.ones((2, 2)), np.zeros((2, 3))
    y, widths = concat_forward([a, b])
    da, db = concat_backward(y, widths)
    assert np.array_equal(da, a) and np.array_equal(db, b)


def test_gru_zero_weights_give_zero_state():
    x = np.random.default_rng(0).normal(size=(2, 3))
    h, _ = gru_cell_forward(x, np.zeros((2, 4)), np.zeros((3, 12)), np.zeros((4, 12)), np.zeros((1, 12)))
    assert np.array_equal(h, np.zeros((2, 4)))


def test_gru_state_bounded():
    rng = np.random.default_rng(5)
    h_prev = rng.uniform(-0.99, 0.99, size=(8, 4))
    h, _ = gru_cell_forward(rng.normal(size=(8, 3)) * 5, h_prev, rng.normal(size=(3, 12)),
                            rng.normal(size=(4, 12)), rng.normal(size=(1, 12)))
    assert np.all(np.abs(h) < 1)


def test_gru_shape_mismatch():
    with pytest.raises(ValueError):
        gru_cell_forward(np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((3, 11)),
                         np.zeros((4, 12)), np.zeros((1, 12)))


def test_gru_three_step_chain_gradients():
    rng = np.random.default_rng(6)
    n_in, hs = 3, 4
    xs = rng.normal(size=(3, 2, n_in))
    h0 = rng.normal(scale=0.5, size=(2, hs))
    Wx, Wh = rng.normal(scale=0.5, size=(n_in, 3 * hs)), rng.normal(scale=0.5, size=(hs, 3 * hs))
    b = rng.normal(scale=0.1, size=(1, 3 * hs))
    up = rng.normal(size=(2, hs))

    def run(xs, h0, Wx, Wh, b):
        h, caches = h0, []
        for t in range(3):
            h, c = gru_cell_forward(xs[t], h, Wx, Wh, b)
            caches.append(c)
        return h, caches

    h, caches = run(xs, h0, Wx, Wh, b)
    dh = up
    dxs = np.zeros_like(xs)
    dWx, dWh, db = np.zeros_like(Wx), np.zeros_like(Wh), np.zeros_like(b)
    for t in reversed(range(3)):
        dx, dh, gWx, gWh, gb = gru_cell_backward(dh, caches[t])
        dxs[t] = dx
        dWx += gWx
        dWh += gWh
        db += gb
    loss = lambda **kw: float((run(kw.get("xs", xs), kw.get("h0", h0), kw.get("Wx", Wx),
                                   kw.get("Wh", Wh), kw.get("b", b))[0] * up).sum())
    for name, g, x in (("xs", dxs, xs), ("h0", dh, h0), ("Wx", dWx, Wx), ("Wh", dWh, Wh), ("b", db, b)):
        assert grad_check(lambda v: loss(**{name: v}), g, x) < 1e-4, name


def test_param_vector_bytes_and_checkpoint(tmp_path):
    layout = (("a", 2, 3), ("b", 1, 3))
    rng = np.random.default_rng(7)
    pv = ParamVector(layout, rng.normal(size=9))
    data = pv.to_bytes()
    assert len(data) == 72
    assert data[:8] == np.float64(pv.values[0]).astype("<f8").tobytes()
    back = ParamVector.from_bytes(layout, data)
    assert np.array_equal(back.values, pv.values)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, pv)
    assert np.array_equal(load_checkpoint(path, layout).values, pv.values)
    with pytest.raises(ValueError):
        ParamVector(layout, np.zeros(8))


def test_flatten_unflatten_bijection():
    rng = np.random.default_rng(8)
    params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=(1, 2))}
    pv = flatten(params)
    assert pv.layout == (("w", 3, 2), ("b", 1, 2))
    back = unflatten(pv)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    with pytest.raises(ValueError):
        unflatten(pv, layout=(("w", 2, 3), ("b", 1, 2)))
    with pytest.raises(ValueError):
        flatten({"v": np.zeros(3)})


def test_sgd_step():
    p = np.array([1.0])
    SGD(0.1).step(p, np.array([2.0]))
    assert p[0] == pytest.approx(0.8)
    p = np.array([1.0, -2.0])
    SGD(0.1).step(p, np.zeros(2))
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_steps():
    p = np.array([0.5, -1.0])
    Adam(1e-3).step(p, np.zeros(2))
    assert p.tolist() == [0.5, -1.0]
    p = np.array([0.5, -1.0])
    Adam(1e-3).step(p, np.ones(2))
    # m_hat / sqrt(v_hat) = 1 at t=1, so the step is lr / (1 + eps)
    assert np.allclose(p, [0.5 - 1e-3, -1.0 - 1e-3], atol=1e-10)


def test_adam_matches_hand_recurrence():
    rng = np.random.default_rng(9)
    grads = rng.normal(size=(5, 3))
    p = np.zeros(3)
    opt = Adam(0.01)
    m = v = np.zeros(3)
    q = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        opt.step(p, g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q = q - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.abs(p - q).max() < 1e-15
    opt.reset()
    assert opt.step_count == 0 and opt.m is None


def test_optimizer_errors():
    with pytest.raises(ValueError):
        SGD(0.0)
    with pytest.raises(ValueError):
        make_optimizer("rmsprop")
    with pytest.raises(ValueError):
        Adam().step(np.zeros(2), np.zeros(3))
    assert isinstance(make_optimizer("SGD", 0.1), SGD)


def test_grad_check_quadratic_and_order():
    rng = np.random.default_rng(10)
    x = rng.normal(size=12)
    assert grad_check(lambda v: float((v**2).sum()), 2 * x, x) < 1e-8
    f = lambda v: float(np.sin(v).sum() + (v**3).sum())
    g = np.cos(x) + 3 * x**2
    e1 = grad_check(f, g, x, eps=1e-3)
    e2 = grad_check(f, g, x, eps=5e-4)
    assert e2 <= 4 * e1


def test_numerical_gradient_leaves_input_untouched():
    x = np.array([1.0, 2.0])
    numerical_gradient(lambda v: float(v.sum()), x)
    assert x.tolist() == [1.0, 2.0]


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


def test_as_tensor2_rejects_non_finite():
    assert as_tensor2([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(NonFiniteError):
        as_tensor2([np.nan])
    with pytest.raises(ValueError):
        as_tensor2(np.zeros((1, 1, 1)))
