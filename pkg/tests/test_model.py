import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfadapt.autodiff import ShapeError, Tape, Tensor, finite_diff, grad
from selfadapt.losses import cls_loss
from selfadapt.model import (ModelSpec, MomentAccumulator, TrainedModel, forward_C,
                             forward_C_l1, forward_Ca, forward_Ca_l1, forward_D, forward_F,
                             forward_R, init_params, load_model, param_census, predict_probs,
                             random_adaptor, save_model)
from selfadapt.nn import GROUP_NAMES, ParamGroup
from oracles import rel_err, two_pass_moments

SPEC = ModelSpec()
P = init_params(SPEC, 0)


def images(seed, n=4):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, *SPEC.input_shape))


def feats(seed, n=3):
    return forward_F(P["F"], images(seed, n), SPEC)


def test_zero_input_zero_bias_gives_zero_map():
    out = forward_F(P["F"], np.zeros((2, *SPEC.input_shape)), SPEC)
    assert out.shape == (2, SPEC.s, SPEC.s, SPEC.k)
    assert np.all(out.data == 0)
    zero_f = Tensor(np.zeros((2, SPEC.s, SPEC.s, SPEC.k)))
    assert np.all(forward_C_l1(P["C"], zero_f).data == 0)


def test_forward_passes_are_deterministic():
    x = images(1)
    a = forward_F(init_params(SPEC, 5)["F"], x, SPEC).data
    b = forward_F(init_params(SPEC, 5)["F"], x, SPEC).data
    assert a.tobytes() == b.tobytes()
    f = Tensor(a)
    assert forward_C_l1(P["C"], f).data.tobytes() == forward_C_l1(P["C"], f).data.tobytes()
    assert forward_D(P["D"], f).data.tobytes() == forward_D(P["D"], f).data.tobytes()


def test_forward_outputs_finite_over_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, size=(2, *SPEC.input_shape))
        f = forward_F(P["F"], x, SPEC)
        assert np.all(np.isfinite(f.data))
        assert np.all(np.isfinite(forward_C_l1(P["C"], f).data))


def test_input_shape_checked():
    with pytest.raises(ShapeError):
        forward_F(P["F"], np.zeros((2, 3, 8, 8)), SPEC)


def test_zero_adaptor_identity():
    f = feats(2)
    A0 = ParamGroup("A", {"W": Tensor(np.zeros((SPEC.k, SPEC.k)))})
    assert forward_Ca_l1(P["C"], A0, f).data.tobytes() == forward_C_l1(P["C"], f).data.tobytes()
    assert forward_Ca(P["C"], A0, f).data.tobytes() == forward_C(P["C"], f).data.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["pre", "post"]))
def test_zero_adaptor_identity_property(seed, residual):
    C = init_params(SPEC, seed)["C"]
    f = Tensor(np.random.default_rng(seed).standard_normal((2, SPEC.s, SPEC.s, SPEC.k)))
    A0 = ParamGroup("A", {"W": Tensor(np.zeros((SPEC.k, SPEC.k)))})
    assert forward_Ca(C, A0, f, residual).data.tobytes() == forward_C(C, f).data.tobytes()


def test_identity_adaptor_with_linear_activation_adds_input():
    f = feats(3)
    A = ParamGroup("A", {"W": Tensor(np.eye(SPEC.k))})
    linear = lambda t: t
    out = forward_Ca_l1(P["C"], A, f, activation=linear)
    base = forward_C_l1(P["C"], f, activation=linear)
    np.testing.assert_allclose(out.data, base.data + f.data, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("residual", ["pre", "post"])
def test_random_adaptor_matches_straight_line_oracle(residual):
    f = feats(4).data
    A = random_adaptor(SPEC, 9)
    C = {k: v.data for k, v in P["C"].tensors.items()}
    W = A["W"].data
    z = np.einsum("oc,nijc->nijo", C["W1"], f) + C["b1"]
    br = np.einsum("oc,nijc->nijo", W, f)
    h = np.maximum(z + br, 0) if residual == "pre" else np.maximum(z, 0) + br
    out = forward_Ca_l1(P["C"], A, Tensor(f), residual=residual).data
    np.testing.assert_allclose(out, h, rtol=1e-12, atol=1e-12)
    pooled = h.mean(axis=(1, 2))
    hid = np.maximum(pooled @ C["W2"] + C["b2"], 0)
    prob = 1 / (1 + np.exp(-(hid @ C["W3"] + C["b3"]))).reshape(-1)
    np.testing.assert_allclose(forward_Ca(P["C"], A, Tensor(f), residual).data, prob, rtol=1e-12)


def test_probabilities_bounded_over_1000_inputs():
    rng = np.random.default_rng(5)
    f = Tensor(rng.standard_normal((1000, SPEC.s, SPEC.s, SPEC.k)) * 3)
    p = forward_Ca(P["C"], random_adaptor(SPEC, 1), f).data
    assert p.shape == (1000,) and np.all((p > 0) & (p < 1))


def test_output_monotone_in_final_bias():
    f = feats(6)
    lo = forward_C(P["C"], f).data
    C2 = P["C"].with_values([t if k != "b3" else Tensor(t.data + 0.5)
                             for k, t in P["C"].tensors.items()])
    assert np.all(forward_C(C2, f).data > lo)


def test_depth_and_reconstruction_shapes():
    f = feats(7)
    d = forward_D(P["D"], f, SPEC).data
    assert d.shape == (3, SPEC.depth_size, SPEC.depth_size) and np.all((d >= 0) & (d <= 1))
    h = forward_C_l1(P["C"], f)
    assert forward_R(P["R"], h).shape == h.shape


def test_parameter_census_covers_every_tensor_once():
    census = param_census(P, SPEC)
    expected = {name for name, _ in P.flat()}
    assert set(census) == expected
    for name, grp in census.items():
        assert grp == name.split(".")[0] and grp in GROUP_NAMES


def test_end_to_end_gradient_check():
    spec = ModelSpec(f_hidden=(6,), k=2, s=2, c_hidden=3, depth_size=2, ae_bottleneck=4,
                     image_size=4, in_channels=1)
    params = init_params(spec, 0)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(2, *spec.input_shape))
    y = np.array([1.0, 0.0])

    def loss_of(Fw1):
        F = params["F"].with_values([Fw1] + params["F"].values()[1:])
        return cls_loss(forward_C(params["C"], forward_F(F, x, spec)), y)

    with Tape():
        leaves = params["F"].leaves()
        C = params["C"].leaves()
        loss = cls_loss(forward_C(C, forward_F(leaves, x, spec)), y)
        g = grad(loss, [leaves["W1"], C["W1"], C["W3"]])
    fd = finite_diff(loss_of, params["F"]["W1"].data)
    assert rel_err(g[0].data, fd.data) < 1e-4

    for i, key in ((1, "W1"), (2, "W3")):
        def via_c(w, key=key):
            Cv = params["C"].with_values([w if n == key else t for n, t in params["C"].tensors.items()])
            return cls_loss(forward_C(Cv, forward_F(params["F"], x, spec)), y)
        fd = finite_diff(via_c, params["C"][key].data)
        assert rel_err(g[i].data, fd.data) < 1e-4


def test_save_load_round_trip(tmp_path):
    m = TrainedModel(params=init_params(SPEC, 2), spec=SPEC, config={"a": 1})
    acc = MomentAccumulator(SPEC.k)
    acc.update(feats(8).data)
    m.source_moments = acc.result()
    p = save_model(m, tmp_path / "m.json")
    back = load_model(p)
    assert back.params.checksum() == m.params.checksum()
    assert back.spec == m.spec and back.config == m.config
    np.testing.assert_array_equal(back.source_moments.mean, m.source_moments.mean)
    x = images(9)
    assert predict_probs(back, x).tobytes() == predict_probs(m, x).tobytes()


def test_load_rejects_foreign_manifest(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other", "version": 1}')
    with pytest.raises(ValueError):
        load_model(p)


def test_streaming_moments_match_two_pass():
    rng = np.random.default_rng(10)
    f = rng.standard_normal((37, 4, 4, 8)) * 3 + 1
    acc = MomentAccumulator(8)
    for i in range(0, 37, 5):
        acc.update(f[i:i + 5])
    mean, var = two_pass_moments(f)
    res = acc.result()
    np.testing.assert_allclose(res.mean, mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(res.var, var, rtol=1e-10)
    assert res.count == 37 * 16
