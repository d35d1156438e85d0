import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ekiml.models import (
    SELU_ALPHA,
    SELU_SCALE,
    LayerSpec,
    ModelSpec,
    RnnSpec,
    affine,
    conv2d,
    dense,
    dense_network,
    flatten,
    flatten_params,
    maxpool,
    maxpool_grid,
    model_from_dict,
    softmax,
    unflatten_params,
    xavier_prior,
)
from ekiml.numerics import make_rng


# -- reference implementations (straight-line loops, no vectorisation) --


def ref_dense(layers, x):
    z = list(x)
    for W, b, act in layers:
        out = []
        for i in range(len(b)):
            s = b[i]
            for k in range(len(z)):
                s += W[i][k] * z[k]
            out.append(act(s))
        z = out
    return np.array(z)


def conv_matrix(kernel, in_shape, padding, stride):
    """Materialise the zero-padded cross-correlation as a dense matrix."""
    O, C, kh, kw = kernel.shape
    _, H, W = in_shape
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    M = np.zeros((O * ho * wo, C * H * W))
    for o in range(O):
        for i in range(ho):
            for j in range(wo):
                row = (o * ho + i) * wo + j
                for c in range(C):
                    for a in range(kh):
                        for b in range(kw):
                            r = i * stride + a - padding
                            s = j * stride + b - padding
                            if 0 <= r < H and 0 <= s < W:
                                M[row, (c * H + r) * W + s] += kernel[o, c, a, b]
    return M, (O, ho, wo)


# -- dense --


def test_dense_identity():
    m = ModelSpec((3,), [dense(3, 3, "identity")])
    u = flatten_params(m, [{"W": np.eye(3), "b": np.zeros(3)}])
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(m.forward(u, x), x)


def test_dense_zero_weights_relu():
    m = ModelSpec((2,), [dense(2, 3, "relu")])
    c = np.array([1.5, -1.0, 0.0])
    u = flatten_params(m, [{"W": np.zeros((3, 2)), "b": c}])
    np.testing.assert_array_equal(m.forward(u, np.array([4.0, -7.0])), np.maximum(c, 0))


def test_dense_matches_hand_rolled():
    rng = make_rng(0)
    m = ModelSpec((2,), [dense(2, 3, "tanh"), affine(3, 2)])
    u = rng.standard_normal(m.P)
    t = unflatten_params(m, u)
    x = rng.standard_normal((4, 2))
    got = m.forward(u, x)
    for n in range(4):
        want = ref_dense(
            [(t[0]["W"], t[0]["b"], math.tanh), (t[1]["W"], t[1]["b"], lambda s: s)], x[n]
        )
        np.testing.assert_allclose(got[n], want, atol=1e-12)


def test_dense_ensemble_matches_per_particle():
    rng = make_rng(1)
    m = dense_network([5, 7, 3], activation="selu", output_map="softmax")
    U = rng.standard_normal((6, m.P))
    x = rng.standard_normal((9, 5))
    batch = m.forward(U, x)
    assert batch.shape == (6, 9, 3)
    for j in range(6):
        np.testing.assert_allclose(batch[j], m.forward(U[j], x), atol=1e-13)


def test_forward_is_pure():
    rng = make_rng(2)
    m = dense_network([4, 6, 2])
    u = rng.standard_normal(m.P)
    x = rng.standard_normal((3, 4))
    a = m.forward(u, x)
    b = m.forward(u.copy(), x.copy())
    assert a.tobytes() == b.tobytes()


def test_dense_dimension_mismatch():
    m = dense_network([4, 2])
    with pytest.raises(ValueError):
        m.forward(np.zeros(m.P), np.zeros((1, 5)))
    with pytest.raises(ValueError):
        m.forward(np.zeros(m.P + 1), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        ModelSpec((4,), [dense(4, 3), dense(2, 2)])


def test_selu_constants():
    assert SELU_SCALE == pytest.approx(1.0507, abs=1e-4)
    assert SELU_ALPHA == pytest.approx(1.6733, abs=1e-4)
    m = ModelSpec((1,), [dense(1, 1, "selu")])
    u = flatten_params(m, [{"W": np.ones((1, 1)), "b": np.zeros(1)}])
    assert m.forward(u, np.array([-1.0]))[0] == pytest.approx(SELU_SCALE * SELU_ALPHA * (math.exp(-1) - 1))
    assert m.forward(u, np.array([2.0]))[0] == pytest.approx(2 * SELU_SCALE)


# -- convolution and pooling --


def test_conv_identity_kernel():
    m = ModelSpec((1, 4, 4), [conv2d(1, 1, 1, activation="identity")])
    u = flatten_params(m, [{"W": np.ones((1, 1, 1, 1)), "b": np.zeros(1)}])
    x = make_rng(0).standard_normal((1, 4, 4))
    np.testing.assert_array_equal(m.forward(u, x), x)


def test_conv_zero_kernel_bias_one():
    m = ModelSpec((2, 5, 5), [conv2d(2, 3, 3, padding=1, activation="identity")])
    u = flatten_params(m, [{"W": np.zeros((3, 2, 3, 3)), "b": np.ones(3)}])
    out = m.forward(u, make_rng(1).standard_normal((2, 5, 5)))
    np.testing.assert_array_equal(out, np.ones((3, 5, 5)))


def test_conv_4x4_matches_matrix():
    rng = make_rng(3)
    m = ModelSpec((1, 4, 4), [conv2d(1, 1, 3, padding=1, activation="identity")])
    kernel = rng.standard_normal((1, 1, 3, 3))
    u = flatten_params(m, [{"W": kernel, "b": np.zeros(1)}])
    x = rng.standard_normal((1, 4, 4))
    M, shape = conv_matrix(kernel, (1, 4, 4), 1, 1)
    np.testing.assert_allclose(m.forward(u, x), (M @ x.ravel()).reshape(shape), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(3, 8), st.integers(3, 8), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 3), st.sampled_from([0, 1]), st.sampled_from([1, 2]),
    st.integers(0, 2**32 - 1),
)
def test_conv_matrix_oracle_property(H, W, cin, cout, k, padding, stride, seed):
    rng = np.random.default_rng(seed)
    m = ModelSpec((cin, H, W), [conv2d(cin, cout, k, padding=padding, stride=stride, activation="identity")])
    kernel = rng.standard_normal((cout, cin, k, k))
    bias = rng.standard_normal(cout)
    u = flatten_params(m, [{"W": kernel, "b": bias}])
    x = rng.standard_normal((cin, H, W))
    M, shape = conv_matrix(kernel, (cin, H, W), padding, stride)
    want = (M @ x.ravel()).reshape(shape) + bias[:, None, None]
    np.testing.assert_allclose(m.forward(u, x), want, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        ModelSpec((2, 4, 4), [conv2d(1, 1, 3)])
    with pytest.raises(ValueError):
        ModelSpec((1, 2, 2), [conv2d(1, 1, 3)])
    with pytest.raises(ValueError):
        conv2d(1, 1, 0)
    with pytest.raises(ValueError):
        affine(3, 0)
    with pytest.raises(ValueError):
        conv2d(1, 1, 3, padding=-1)


def test_maxpool_examples():
    np.testing.assert_array_equal(maxpool_grid(np.array([[1.0, 2.0], [3.0, 4.0]]), 2, 2), [[4.0]])
    np.testing.assert_array_equal(maxpool_grid(np.full((4, 6), 2.5), 2), np.full((2, 3), 2.5))
    with pytest.raises(ValueError):
        maxpool_grid(np.zeros((2, 2)), 3)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 6, 6), elements=st.floats(-1e6, 1e6)), st.sampled_from([(2, 2), (3, 3), (2, 1)]))
def test_maxpool_matches_scan(x, ks):
    k, s = ks
    got = maxpool_grid(x, k, s)
    ho = (6 - k) // s + 1
    for c in range(2):
        for i in range(ho):
            for j in range(ho):
                best = -np.inf
                for a in range(k):
                    for b in range(k):
                        best = max(best, x[c, i * s + a, j * s + b])
                assert got[c, i, j] == best


def test_cnn_pipeline_shapes():
    m = ModelSpec(
        (1, 8, 8),
        [conv2d(1, 4, 3, padding=1), maxpool(2), conv2d(4, 2, 3, padding=1), maxpool(2), flatten(), affine(8, 3)],
        output_map="softmax",
    )
    assert m.output_shape == (3,)
    assert m.P == 4 * 9 + 4 + 2 * 4 * 9 + 2 + 8 * 3 + 3
    out = m.forward(make_rng(0).standard_normal((5, m.P)), make_rng(1).standard_normal((7, 1, 8, 8)))
    assert out.shape == (5, 7, 3)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# -- recurrent --


def test_rnn_param_count():
    r = RnnSpec(input_dim=3, hidden_dim=4, output_dim=2, num_layers=2)
    assert r.P == 2 * (16 + 12 + 8) + 2 * 4 + 2


def test_rnn_zero_weights_zero_hidden():
    r = RnnSpec(2, 3, mode="sequence")
    x = make_rng(0).standard_normal((5, 2))
    _, h = r.step(np.zeros(r.P), None, x[:1])
    np.testing.assert_array_equal(h, 0.0)
    np.testing.assert_array_equal(r.forward(np.zeros(r.P), x), 0.0)


def test_rnn_single_step_is_dense_on_stacked_input():
    rng = make_rng(4)
    r = RnnSpec(2, 3, output_dim=2)
    u = rng.standard_normal(r.P)
    t = unflatten_params(r, u)
    h0 = rng.standard_normal(3)
    x0 = rng.standard_normal(2)
    dense_model = ModelSpec((5,), [dense(5, 3, "tanh"), affine(3, 2)])
    v = flatten_params(
        dense_model,
        [
            {"W": np.hstack([t["W_h0"], t["W_x0"]]), "b": t["b_h0"] + t["b_x0"]},
            {"W": t["W_out"], "b": t["b_out"]},
        ],
    )
    got = r.forward(u, x0[None], h0=h0)
    np.testing.assert_allclose(got, dense_model.forward(v, np.concatenate([h0, x0])), atol=1e-14)


def test_rnn_two_steps_hand_unrolled():
    rng = make_rng(5)
    r = RnnSpec(1, 2, output_dim=1, mode="sequence")
    u = rng.standard_normal(r.P)
    t = unflatten_params(r, u)
    x = rng.standard_normal((2, 1))
    h = np.zeros(2)
    outs = []
    for step in range(2):
        h = np.tanh(t["W_h0"] @ h + t["b_h0"] + t["W_x0"] @ x[step] + t["b_x0"])
        outs.append(t["W_out"] @ h + t["b_out"])
    np.testing.assert_allclose(r.forward(u, x), np.array(outs), atol=1e-14)
    last = RnnSpec(1, 2, output_dim=1, mode="last")
    np.testing.assert_allclose(last.forward(u, x), outs[-1], atol=1e-14)


def test_rnn_multilayer_all_layers_see_input():
    rng = make_rng(6)
    r = RnnSpec(2, 3, num_layers=2)
    u = rng.standard_normal(r.P)
    t = unflatten_params(r, u)
    x = rng.standard_normal((1, 2))
    h = np.zeros(3)
    for j in range(2):
        h = np.tanh(t[f"W_h{j}"] @ h + t[f"b_h{j}"] + t[f"W_x{j}"] @ x[0] + t[f"b_x{j}"])
    np.testing.assert_allclose(r.forward(u, x), t["W_out"] @ h + t["b_out"], atol=1e-14)


def test_rnn_ensemble_and_errors():
    r = RnnSpec(1, 4)
    U = make_rng(0).standard_normal((3, r.P))
    x = make_rng(1).standard_normal((5, 7, 1))
    out = r.forward(U, x)
    assert out.shape == (3, 5, 1)
    np.testing.assert_allclose(out[1], r.forward(U[1], x), atol=1e-14)
    with pytest.raises(ValueError):
        r.forward(U, np.zeros((5, 7, 2)))
    with pytest.raises(ValueError):
        r.forward(U, x, h0=np.zeros(3))
    with pytest.raises(ValueError):
        RnnSpec(1, 0)


# -- parameters and priors --


def test_param_count_dnn2():
    assert dense_network([784, 100, 10]).P == 79_510


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flatten_round_trip(seed):
    rng = np.random.default_rng(seed)
    for spec in (
        dense_network([3, 5, 2]),
        ModelSpec((2, 5, 5), [conv2d(2, 3, 3, padding=1), maxpool(2), flatten(), affine(12, 4)]),
        RnnSpec(2, 3, output_dim=2, num_layers=2),
    ):
        u = rng.standard_normal(spec.P)
        np.testing.assert_array_equal(flatten_params(spec, unflatten_params(spec, u)), u)


def test_unflatten_zero_and_errors():
    spec = dense_network([3, 4, 2])
    for block in unflatten_params(spec, np.zeros(spec.P)):
        assert not block["W"].any() and not block["b"].any()
    with pytest.raises(ValueError):
        unflatten_params(spec, np.zeros(spec.P - 1))
    with pytest.raises(ValueError):
        flatten_params(spec, [{"W": np.zeros((4, 3)), "b": np.zeros(4)}])


def test_xavier_block_variances():
    p = xavier_prior(dense_network([784, 10]))
    assert p.blocks[0][3] == pytest.approx(2 / 794)
    sq = xavier_prior(ModelSpec((6,), [dense(6, 6)]))
    assert sq.blocks[0][3] == pytest.approx(1 / 6)
    cv = xavier_prior(ModelSpec((16, 4, 4), [conv2d(16, 32, 3, padding=1)]))
    assert cv.blocks[0][3] == pytest.approx(2 / 48)
    np.testing.assert_array_equal(p.mean, 0.0)


def test_xavier_rnn_blocks():
    r = RnnSpec(2, 4, output_dim=3)
    p = xavier_prior(r)
    var = {name: v for name, _, _, v in p.blocks}
    assert var["W_h0"] == pytest.approx(1 / 4)
    assert var["b_h0"] == pytest.approx(1 / 4)
    assert var["W_x0"] == pytest.approx(2 / 6)
    assert var["W_out"] == pytest.approx(2 / 7)


def test_xavier_empirical_variance():
    spec = dense_network([20, 8, 3])
    p = xavier_prior(spec)
    s = p.sample(100_000, make_rng(0))
    for _, a, b, var in p.blocks:
        assert s[:, a:b].var() == pytest.approx(var, rel=0.05)


# -- softmax --


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    out = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out)) and out[0] == 1.0 and 0 <= out[1] < 1e-300


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e300, 1e300)))
def test_softmax_on_simplex(v):
    p = softmax(v)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_strictly_positive_moderate(v):
    assert np.all(softmax(v) > 0)


# -- serialisation --


def test_model_json_round_trip():
    for spec in (
        ModelSpec((1, 6, 6), [conv2d(1, 2, 3, padding=1, stride=1), maxpool(2), flatten(), dense(18, 5, "sigmoid"), affine(5, 3)], "softmax"),
        RnnSpec(1, 8, mode="sequence"),
    ):
        again = model_from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()
        assert again.P == spec.P
    with pytest.raises(ValueError):
        LayerSpec.from_dict({"kind": "lstm"})
    with pytest.raises(ValueError):
        ModelSpec.from_dict({"input_shape": [2], "layers": [], "bogus": 1})
