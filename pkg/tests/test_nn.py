import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from selfadapt.autodiff import GradMode, Tape, Tensor, conv1x1, finite_diff, grad, sigmoid
from selfadapt.model import ModelSpec, init_params
from selfadapt.nn import (AdamState, Hyperparams, ParamGroup, adam_step, dense, init_adam,
                          init_group, sgd_step)
from oracles import rel_err

finite = st.floats(-10, 10, allow_nan=False, width=64)


def group(**arrays_):
    return ParamGroup("C", {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in arrays_.items()})


def test_default_hyperparameters():
    h = Hyperparams()
    assert (h.alpha, h.beta, h.lam, h.mu, h.batch_per_domain, h.adapt_epochs) == \
        (1e-3, 1e-3, 0.1, 10.0, 20, 1)


@pytest.mark.parametrize("kw", [dict(alpha=-1e-3), dict(beta=-1), dict(lam=-0.1), dict(mu=-1),
                                dict(batch_per_domain=1), dict(adapt_epochs=0)])
def test_invalid_hyperparameters(kw):
    with pytest.raises(ValueError):
        Hyperparams(**kw)


def test_sgd_arithmetic_example():
    out = sgd_step(group(w=1.0), [Tensor(2.0)], 0.5)
    assert out["w"].item() == 0.0


def test_sgd_zero_lr_keeps_values():
    g = group(w=[1.0, -2.0, 3.5])
    out = sgd_step(g, [Tensor([4.0, 5.0, 6.0])], 0.0)
    assert out["w"].data.tobytes() == g["w"].data.tobytes()


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite),
       st.floats(0, 1))
def test_sgd_matches_elementwise_oracle(theta, g, lr):
    out = sgd_step(group(w=theta), [Tensor(g)], lr)["w"].data
    for i in np.ndindex(theta.shape):
        assert out[i] == theta[i] - lr * g[i]


def test_sgd_under_second_order_is_differentiable():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((5, 3)))
    alpha = 0.3

    def after_step(w_arr):
        with Tape():
            w = Tensor(w_arr.data if isinstance(w_arr, Tensor) else w_arr, requires_grad=True)
            (g,) = grad(sigmoid(x @ w).sum(), [w], GradMode.SECOND_ORDER)
            new = sgd_step(ParamGroup("C", {"w": w}), [g], alpha)["w"]
            return (new * new).sum()

    w0 = rng.standard_normal((3, 1))
    with Tape():
        w = Tensor(w0, requires_grad=True)
        (g,) = grad(sigmoid(x @ w).sum(), [w], GradMode.SECOND_ORDER)
        new = sgd_step(ParamGroup("C", {"w": w}), [g], alpha)["w"]
        (dw,) = grad((new * new).sum(), [w])
    fd = finite_diff(after_step, w0)
    assert rel_err(dw.data, fd.data) < 1e-3


def test_adam_zero_gradient_keeps_params():
    g = group(w=[1.0, 2.0])
    st_ = init_adam(g, 1e-3)
    for _ in range(5):
        st_, g2 = adam_step(st_, g, [Tensor(np.zeros(2))])
    assert g2["w"].data.tobytes() == g["w"].data.tobytes()


def test_adam_first_step_oracle():
    lr, eps = 1e-3, 1e-8
    g = np.array([0.5, -3.0, 1e-9, 0.0])
    p = group(w=np.ones(4))
    _, new = adam_step(init_adam(p, lr), p, [Tensor(g)])
    # bias correction makes m_hat = g and v_hat = g^2 on the first step
    expected = 1.0 - lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(new["w"].data, expected, rtol=0, atol=1e-15)


def test_adam_constant_gradient_limit():
    lr = 1e-3
    p = group(w=np.array([0.0, 0.0]))
    st_ = init_adam(p, lr)
    g = Tensor(np.array([0.3, -2.0]))
    prev = p
    for _ in range(10_000):
        st_, new = adam_step(st_, prev, [g])
        step = new["w"].data - prev["w"].data
        prev = new
    assert st_.step == 10_000
    np.testing.assert_allclose(np.abs(step), lr, rtol=0.01)


def test_adam_requires_initialized_state():
    p = group(w=np.ones(2))
    with pytest.raises(ValueError):
        adam_step(AdamState(lr=1e-3), p, [Tensor(np.ones(2))])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-1e6, 1e6)),
       arrays(np.float64, (4,), elements=st.floats(-1e6, 1e6)))
def test_adam_stays_finite(theta, g):
    p = group(w=theta)
    s = init_adam(p, 1e-3)
    for _ in range(3):
        s, p = adam_step(s, p, [Tensor(g)])
    assert np.all(np.isfinite(p["w"].data))


def test_conv1x1_identity_and_zero():
    rng = np.random.default_rng(1)
    f = Tensor(rng.standard_normal((2, 5, 5, 4)))
    np.testing.assert_array_equal(conv1x1(Tensor(np.eye(4)), f).data, f.data)
    np.testing.assert_array_equal(conv1x1(Tensor(np.zeros((4, 4))), f).data, np.zeros(f.shape))


def test_conv1x1_matches_per_pixel_matmul():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((3, 5, 5, 4))
    w = rng.standard_normal((4, 4))
    out = conv1x1(Tensor(w), Tensor(f)).data
    for n in range(3):
        for i in range(5):
            for j in range(5):
                np.testing.assert_allclose(out[n, i, j], w @ f[n, i, j], rtol=1e-12)


def test_dense_shape_check_and_value():
    W = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    b = Tensor(np.array([0.5, -0.5]))
    x = Tensor(np.array([[1.0, 0.0, -1.0]]))
    np.testing.assert_array_equal(dense(W, b, x).data, [[-3.5, -4.5]])
    with pytest.raises(ValueError):
        dense(W, b, Tensor(np.ones((1, 2))))


def test_init_params_adaptor_zero_and_determinism():
    a = init_params(ModelSpec(), 3)
    b = init_params(ModelSpec(), 3)
    c = init_params(ModelSpec(), 4)
    assert np.all(a["A"]["W"].data == 0)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_init_group_biases_zero_and_bounded():
    g = init_group("D", {"W": ((16, 3), 16), "b": ((3,), 0)}, np.random.default_rng(0))
    assert np.all(g["b"].data == 0)
    assert np.all(np.abs(g["W"].data) <= 0.25)
