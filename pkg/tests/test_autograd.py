import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from multipivot import autograd as ag
from multipivot.autograd import ShapeError, Tensor

from gradcheck import check_op


def _shape(rng, ndim=None, lo=1, hi=4):
    ndim = int(rng.integers(1, 4)) if ndim is None else ndim
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=ndim))


def _broadcast_partner(rng, shape):
    """A shape that broadcasts against ``shape`` (some dims set to 1 or dropped)."""
    out = [1 if rng.random() < 0.4 else d for d in shape]
    drop = int(rng.integers(0, len(out)))
    return tuple(out[drop:])


# Each case draws its own random shapes; together they cover well over 100 shapes.
def _case(name, rng):
    r = rng.standard_normal
    if name == "add":
        s = _shape(rng)
        return (lambda a, b: a + b), [r(s), r(_broadcast_partner(rng, s))]
    if name == "sub":
        s = _shape(rng)
        return (lambda a, b: a - b), [r(_broadcast_partner(rng, s)), r(s)]
    if name == "mul":
        s = _shape(rng)
        return (lambda a, b: a * b), [r(s), r(_broadcast_partner(rng, s))]
    if name == "div":
        s = _shape(rng)
        return (lambda a, b: a / b), [r(s), 1.5 + rng.random(_broadcast_partner(rng, s))]
    if name == "exp":
        return ag.exp, [0.5 * r(_shape(rng))]
    if name == "log":
        return ag.log, [0.5 + rng.random(_shape(rng))]
    if name == "relu":
        x = r(_shape(rng))
        x[np.abs(x) < 0.05] += 0.2     # stay away from the kink
        return ag.relu, [x]
    if name == "tanh":
        return ag.tanh, [r(_shape(rng))]
    if name == "sigmoid":
        return ag.sigmoid, [2 * r(_shape(rng))]
    if name == "sum":
        s = _shape(rng)
        axis = int(rng.integers(len(s)))
        return (lambda a: ag.tsum(a, axis=axis, keepdims=bool(axis % 2))), [r(s)]
    if name == "mean":
        s = _shape(rng)
        axis = int(rng.integers(len(s)))
        return (lambda a: ag.mean(a, axis=axis)), [r(s)]
    if name == "reshape":
        s = _shape(rng, 2)
        return (lambda a: a.reshape(s[1], s[0])), [r(s)]
    if name == "transpose":
        s = _shape(rng, 3)
        return (lambda a: a.transpose(2, 0, 1)), [r(s)]
    if name == "getitem":
        s = _shape(rng, 2, lo=2)
        idx = rng.integers(0, s[0], size=5)     # repeated indices accumulate
        return (lambda a: a[idx]), [r(s)]
    if name == "slice":
        s = _shape(rng, 2, lo=2)
        return (lambda a: a[1:, ::2]), [r(s)]
    if name == "concat":
        s = _shape(rng, 2)
        t = (int(rng.integers(1, 4)), s[1])
        return (lambda a, b: ag.concat([a, b], axis=0)), [r(s), r(t)]
    if name == "stack":
        s = _shape(rng, 2)
        return (lambda a, b: ag.stack([a, b], axis=1)), [r(s), r(s)]
    if name == "matmul":
        m, k, n = _shape(rng, 3)
        batch = _shape(rng, 1)
        return (lambda a, b: a @ b), [r(batch + (m, k)), r((k, n))]
    if name == "linear":
        m, k, n = _shape(rng, 3)
        return ag.linear, [r((2, m, k)), r((k, n)), r((n,))]
    if name == "softmax":
        s = _shape(rng)
        axis = int(rng.integers(len(s)))
        return (lambda a: ag.softmax(a, axis=axis)), [r(s)]
    if name == "log_softmax":
        s = _shape(rng, 2)
        return ag.log_softmax, [r(s)]
    if name == "layer_norm":
        s = _shape(rng, 2, lo=2)
        return ag.layer_norm, [r(s), 1 + 0.1 * r(s[-1:]), 0.1 * r(s[-1:])]
    if name == "embedding":
        v, d = _shape(rng, 2, lo=2)
        ids = rng.integers(0, v, size=(2, 3))
        return (lambda w: ag.embedding(w, ids)), [r((v, d))]
    if name == "cross_entropy":
        n, v = _shape(rng, 2, lo=2)
        targets = rng.integers(0, v, size=n)
        eps = float(rng.choice([0.0, 0.1]))
        return (lambda z: ag.cross_entropy_logits(z, targets, eps)), [r((n, v))]
    if name == "cross_entropy_weighted":
        n, v = _shape(rng, 2, lo=2)
        targets = rng.integers(0, v, size=n)
        w = rng.random(n)
        return (lambda z: ag.cross_entropy_logits(z, targets, 0.1, w)), [r((n, v))]
    if name == "dropout":
        s = _shape(rng)
        seed = int(rng.integers(1000))
        return (lambda a: ag.dropout(a, 0.3, np.random.default_rng(seed))), [r(s)]
    if name == "composite":
        s = _shape(rng, 2, lo=2)
        return (lambda a, b: ag.tanh(ag.softmax(a * b, axis=-1) @ ag.transpose(b)) + ag.sigmoid(a).sum()), \
            [r(s), r(s)]
    raise KeyError(name)


OPS = ["add", "sub", "mul", "div", "exp", "log", "relu", "tanh", "sigmoid", "sum", "mean", "reshape",
       "transpose", "getitem", "slice", "concat", "stack", "matmul", "linear", "softmax", "log_softmax",
       "layer_norm", "embedding", "cross_entropy", "cross_entropy_weighted", "dropout", "composite"]


@pytest.mark.parametrize("name", OPS)
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng([seed, OPS.index(name)])
    build, inputs = _case(name, rng)
    check_op(build, inputs, seed=seed, rtol=1e-4)


def test_gradient_suite_covers_many_shapes():
    shapes = set()
    for name in OPS:
        for seed in range(4):
            _, inputs = _case(name, np.random.default_rng([seed, OPS.index(name)]))
            shapes.add((name, tuple(np.shape(x) for x in inputs)))
    assert len(shapes) >= 100


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ Tensor(np.eye(2))).data, a.data)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor([[2.0], [3.0]])).data, [[2.0], [3.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    ref = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs((Tensor(a) @ Tensor(b)).data - ref).max() < 1e-10


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 2)))


def test_softmax_examples(rng):
    assert np.allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0)
    x = rng.standard_normal((4, 6))
    assert np.abs(ag.softmax(Tensor(x + 123.4)).data - ag.softmax(Tensor(x)).data).max() < 1e-12
    got = ag.softmax(Tensor([math.log(1), math.log(2), math.log(3)])).data
    assert np.abs(got - np.array([1, 2, 3]) / 6).max() < 1e-10


def test_softmax_errors():
    with pytest.raises(ShapeError):
        ag.softmax(Tensor(np.zeros((2, 0))), axis=1)
    with pytest.raises(ShapeError):
        ag.softmax(Tensor(np.zeros((2, 3))), axis=2)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-1e6, 1e6)))
def test_softmax_sums_to_one(x):
    out = ag.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    assert np.abs(out.sum(axis=-1) - 1).max() < 1e-12


def test_sigmoid_examples():
    assert ag.sigmoid(Tensor(0.0)).data == 0.5
    assert abs(ag.sigmoid(Tensor(40.0)).data - 1.0) < 1e-12
    assert abs(ag.sigmoid(Tensor(1.0)).data - 0.7310585786) < 1e-9


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_sigmoid_strictly_inside_unit_interval(x):
    y = float(ag.sigmoid(Tensor(x)).data)
    assert 0.0 < y < 1.0


def test_concat_examples():
    assert np.array_equal(ag.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1, 2, 3])
    a = Tensor([[1.0, 2.0]])
    assert np.array_equal(ag.concat([a, Tensor(np.zeros((0, 2)))]).data, a.data)
    with pytest.raises(ShapeError):
        ag.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)


@given(st.integers(1, 4), st.integers(0, 4), st.integers(1, 3), st.integers(0, 2**16))
def test_concat_round_trip(n1, n2, w, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n1, w)), rng.standard_normal((n2, w))
    out = ag.concat([Tensor(a), Tensor(b)], axis=0).data
    assert np.array_equal(out[:n1], a) and np.array_equal(out[n1:], b)


def test_cross_entropy_examples(rng):
    assert abs(float(ag.cross_entropy_logits(Tensor(np.zeros((3, 4))), [0, 1, 2]).data) - math.log(4)) < 1e-12
    losses = []
    for margin in (0.0, 1.0, 2.0, 4.0):
        z = np.zeros((1, 5))
        z[0, 2] = margin
        losses.append(float(ag.cross_entropy_logits(Tensor(z), [2]).data))
    assert all(a > b for a, b in zip(losses, losses[1:]))
    z = rng.standard_normal((3, 5))
    t = [4, 0, 2]
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ref = -np.mean([logp[i, t[i]] for i in range(3)])
    assert abs(float(ag.cross_entropy_logits(Tensor(z), t).data) - ref) < 1e-10


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        ag.cross_entropy_logits(Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_examples(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    ag.backward(ag.tsum(x * x))
    assert np.array_equal(x.grad, 2 * x.data)
    z = Tensor(0.0, requires_grad=True)
    ag.backward(ag.sigmoid(z))
    assert z.grad == 0.25


def test_backward_accumulates_across_uses_and_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ag.tsum(x * 3.0 + x)
    ag.backward(y)
    assert np.array_equal(x.grad, [4.0, 4.0])
    ag.backward(ag.tsum(x))
    assert np.array_equal(x.grad, [5.0, 5.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ag.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_graph_is_topologically_ordered_and_visits_each_node_once():
    x = Tensor([1.0, -2.0], requires_grad=True)
    h = ag.tanh(x)
    loss = ag.tsum(h * h + h)
    g = ag.Graph.from_root(loss)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert len(pos) == len(g.nodes)
    for n in g.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert y._parents == () and not y.requires_grad


def test_ops_are_deterministic(rng):
    x = rng.standard_normal((3, 4))
    a = ag.dropout(ag.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))), 0.5,
                   np.random.default_rng(3)).data
    b = ag.dropout(ag.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))), 0.5,
                   np.random.default_rng(3)).data
    assert np.array_equal(a, b)


def test_dropout_is_identity_at_inference(rng):
    x = Tensor(rng.standard_normal(6))
    assert ag.dropout(x, 0.5, None) is x or np.array_equal(ag.dropout(x, 0.5, None).data, x.data)


def test_embedding_rejects_unknown_id():
    with pytest.raises(IndexError):
        ag.embedding(Tensor(np.zeros((4, 2))), np.array([[0, 4]]))


def test_tensor_invariants(rng):
    t = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    assert t.size == 6 and t.shape == (2, 3)
    ag.backward(ag.tsum(t))
    assert t.grad.shape == t.shape
