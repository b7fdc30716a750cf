import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gaprompt import diffcore as dc
from gaprompt.errors import InvalidArgument

from oracles import numeric_grad, softmax_rows

TOL = 1e-6


def _scalar_loss(fn, weights):
    """Contract any tensor output to a scalar with fixed weights."""
    def wrapped(x):
        out = fn(x)
        return dc.sum_reduce(dc.mul(out, dc.Tensor(weights(out.shape))))
    return wrapped


def _weights(shape):
    return np.linspace(-1.0, 1.5, int(np.prod(shape))).reshape(shape)


UNARY = {
    "exp": dc.exp,
    "tanh": dc.tanh,
    "gelu": dc.gelu,
    "log": lambda x: dc.log(dc.add(dc.mul(x, x), 1.0)),
    "sqrt": lambda x: dc.sqrt(dc.add(dc.mul(x, x), 0.5)),
    "power": lambda x: dc.power(dc.add(dc.mul(x, x), 1.0), -1.5),
    "softmax": lambda x: dc.softmax(x, axis=-1),
    "log_softmax": lambda x: dc.log_softmax(x, axis=-1),
    "layernorm": lambda x: dc.layernorm(x),
    "max_reduce": lambda x: dc.max_reduce(x, axis=1),
    "mean_reduce": lambda x: dc.mean_reduce(x, axis=0),
    "transpose": lambda x: dc.transpose(x),
    "reshape": lambda x: dc.reshape(x, (-1,)),
    "getitem_basic": lambda x: x[1:, :2],
    "getitem_fancy": lambda x: x[np.array([0, 2, 2]), :],
    "gather": lambda x: dc.gather(x, np.array([[2, 0], [2, 2]])),
    "broadcast": lambda x: dc.broadcast_to(x, (2, 3, 4)),
    "concat": lambda x: dc.concat([x, dc.scalar_scale(x, 2.0)], axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    x = rng.normal(size=(3, 4))
    err = dc.grad_check(_scalar_loss(UNARY[name], _weights), x)
    assert err < TOL, f"{name}: {err}"


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "matmul", "sqdist"])
def test_binary_ops_gradients_for_both_inputs(name, rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 4)) if name in ("matmul", "sqdist") else rng.normal(size=(1, 3, 4))
    if name == "div":
        b = np.abs(b) + 0.5
    op = getattr(dc, name)
    assert dc.grad_check(_scalar_loss(lambda x: op(x, dc.Tensor(b)), _weights), a) < TOL
    assert dc.grad_check(_scalar_loss(lambda y: op(dc.Tensor(a), y), _weights), b) < TOL


def test_linear_gradients_for_input_weight_and_bias(rng):
    x, w, bias = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    assert dc.grad_check(_scalar_loss(lambda t: dc.linear(t, dc.Tensor(w), dc.Tensor(bias)), _weights), x) < TOL
    assert dc.grad_check(_scalar_loss(lambda t: dc.linear(dc.Tensor(x), t, dc.Tensor(bias)), _weights), w) < TOL
    assert dc.grad_check(_scalar_loss(lambda t: dc.linear(dc.Tensor(x), dc.Tensor(w), t), _weights), bias) < TOL


def test_cross_entropy_value_and_gradient(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    expected = -np.mean(np.log(softmax_rows(logits))[np.arange(4), labels])
    assert dc.cross_entropy(logits, labels).item() == pytest.approx(expected, abs=1e-12)
    assert dc.grad_check(lambda t: dc.cross_entropy(t, labels), logits) < TOL


def test_layernorm_with_affine_parameters(rng):
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    out = dc.layernorm(x, dc.Tensor(w), dc.Tensor(b)).data
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * w + b
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert dc.grad_check(_scalar_loss(lambda t: dc.layernorm(dc.Tensor(x), t, dc.Tensor(b)), _weights), w) < TOL


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(dc.gelu(x).data, ref, atol=1e-12)


def test_sqdist_exact_zero_for_identical_rows(rng):
    a = rng.normal(size=(1, 5, 3))
    sq = dc.sqdist(a, a).data[0]
    assert np.all(np.diag(sq) == 0.0)
    ref = ((a[0][:, None] - a[0][None]) ** 2).sum(-1)
    np.testing.assert_allclose(sq, ref, atol=1e-12)


def test_gather_batched_matches_take_along_axis(rng):
    x = rng.normal(size=(2, 6, 3))
    idx = rng.integers(0, 6, size=(2, 4))
    out = dc.gather(x, idx, batch_dims=1).data
    np.testing.assert_array_equal(out, np.take_along_axis(x, idx[..., None], axis=1))
    assert dc.grad_check(_scalar_loss(lambda t: dc.gather(t, idx, batch_dims=1), _weights), x) < TOL


def test_scatter_rows_matches_add_at(rng):
    idx = rng.integers(0, 7, size=40)
    rows = rng.normal(size=(40, 3))
    ref = np.zeros((7, 3))
    np.add.at(ref, idx, rows)
    np.testing.assert_allclose(dc.functional.scatter_rows(7, idx, rows), ref, atol=1e-12)


def test_gather_rejects_out_of_range_index():
    with pytest.raises(InvalidArgument):
        dc.gather(np.zeros((3, 2)), np.array([3]))


def test_gradients_accumulate_across_shared_subgraphs():
    x = dc.Tensor(np.array([2.0]), requires_grad=True)
    y = dc.mul(x, x)
    loss = dc.sum_reduce(dc.add(y, y))
    dc.backward(loss)
    assert x.grad[0] == pytest.approx(8.0)


def test_no_grad_records_nothing():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.no_grad():
        y = dc.mul(x, 2.0)
    assert not y.requires_grad
    assert dc.grad_enabled()


def test_frozen_parameter_gets_no_gradient():
    w = dc.Parameter(np.ones(2), name="w", frozen=True)
    v = dc.Parameter(np.ones(2), name="v")
    dc.backward(dc.sum_reduce(dc.mul(w, v)), [v])
    assert w.grad is None
    np.testing.assert_array_equal(v.grad, np.ones(2))


def test_backward_rejects_non_scalar():
    with pytest.raises(InvalidArgument):
        dc.backward(dc.Tensor(np.ones(2), requires_grad=True))


def test_forward_op_dispatch_and_unknown_op():
    out = dc.forward_op("matmul", [np.eye(2), np.array([[1.0], [2.0]])])
    np.testing.assert_array_equal(out.data, [[1.0], [2.0]])
    with pytest.raises(InvalidArgument):
        dc.forward_op("conv", [])


def test_broadcast_mismatch_raises():
    with pytest.raises(InvalidArgument):
        dc.add(np.zeros((2, 3)), np.zeros((4,)))


def test_module_names_and_freeze(rng):
    mlp = dc.MLP([3, 4, 2], rng)
    mlp.assign_names("enc.")
    names = [p.name for p in mlp.parameters()]
    assert names == ["enc.layers.0.weight", "enc.layers.0.bias", "enc.layers.1.weight", "enc.layers.1.bias"]
    assert mlp.num_parameters() == 3 * 4 + 4 + 4 * 2 + 2
    mlp.set_frozen(True)
    assert all(p.frozen for p in mlp.parameters())


def test_zero_last_mlp_outputs_zero(rng):
    mlp = dc.MLP([3, 5, 2], rng, zero_last=True)
    assert not mlp(rng.normal(size=(4, 3))).data.any()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_softmax_rows_sum_to_one(x):
    out = dc.softmax(x, axis=-1).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out, softmax_rows(x), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
def test_matmul_gradient_matches_oracle(a, b):
    x = dc.Tensor(a, requires_grad=True)
    dc.backward(dc.sum_reduce(dc.tanh(dc.matmul(x, dc.Tensor(b)))))
    ref = numeric_grad(lambda v: float(np.tanh(v @ b).sum()), a.copy())
    np.testing.assert_allclose(x.grad, ref, atol=1e-7)
