import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rev2net import tensor as T
from rev2net.errors import InvalidAxisError, InvalidShapeError, NoTapeError


@pytest.fixture(autouse=True)
def f64():
    with T.precision(64):
        yield


def test_create_fills():
    z = T.create([2, 3], "zeros")
    assert z.shape == (2, 3) and np.all(z.data == 0)
    c = T.create([1], "constant", 0.1)
    assert c.data[0] == pytest.approx(0.1)
    u1 = T.create([4], "uniform", 0, 1, seed=7)
    u2 = T.create([4], "uniform", 0, 1, seed=7)
    assert u1.data.tobytes() == u2.data.tobytes()
    g1 = T.gaussian([5], 0.0, 2.0, seed=3)
    assert g1.data.tobytes() == T.gaussian([5], 0.0, 2.0, seed=3).data.tobytes()


@pytest.mark.parametrize("shape", [[0], [2, -1], []])
def test_create_rejects_bad_extents(shape):
    with pytest.raises(InvalidShapeError):
        T.zeros(shape)


def test_default_precision_is_32_bit():
    with T.precision(32):
        assert T.zeros([2]).dtype == np.float32
    assert T.zeros([2]).dtype == np.float64


def test_elementwise_examples():
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    assert T.add(T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0])).data.tolist() == [4, 6]
    assert T.elementwise("sqrt-eps", T.Tensor([4.0]), c=0.0).data[0] == 2.0
    a = T.Tensor([2.0], requires_grad=True)
    b = T.Tensor([5.0])
    with T.Tape():
        loss = T.mul(a, b)
    loss.backward()
    assert a.grad.tolist() == [5.0]
    assert b.grad is None


def test_binary_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        T.add(T.zeros([2]), T.zeros([3]))


def test_reductions():
    assert T.reduce_sum(T.Tensor([1.0, 2.0, 3.0])).data.tolist() == [6]
    assert T.reduce_mean(T.Tensor([2.0, 4.0])).data.tolist() == [3]
    m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert T.reduce_sum(m, axes=[0]).data.tolist() == [4, 6]
    assert T.reduce("max", m, axes=1).data.tolist() == [2, 4]
    with pytest.raises(InvalidAxisError):
        T.reduce_sum(m, axes=[2])
    with pytest.raises(InvalidAxisError):
        T.reduce_sum(m, axes=[0, 0])


def test_mean_backward_distributes():
    x = T.Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    with T.Tape():
        y = T.reduce_mean(x)
    y.backward()
    assert x.grad.tolist() == [0.25] * 4


def test_max_backward_first_occurrence():
    x = T.Tensor([3.0, 1.0, 3.0], requires_grad=True)
    with T.Tape():
        y = T.reduce_max(x)
    y.backward()
    assert x.grad.tolist() == [1.0, 0.0, 0.0]


def test_reorder_examples():
    frames = T.Tensor(np.stack([np.full((2, 2), v) for v in (1.0, 2.0, 3.0)]))
    rev = T.reverse(frames, 0)
    assert rev.data[:, 0, 0].tolist() == [3, 2, 1]
    assert T.reverse(rev, 0).data.tobytes() == frames.data.tobytes()
    r = T.reshape(T.Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), [6])
    assert r.data.tolist() == [1, 2, 3, 4, 5, 6]
    with pytest.raises(InvalidShapeError):
        T.reshape(T.zeros([2, 3]), [4])


def test_matmul_examples():
    m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert T.matmul(T.Tensor(np.eye(2)), m).data.tolist() == [[1, 2], [3, 4]]
    assert T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]])).data.tolist() == [[11]]
    assert T.matmul(T.zeros([2, 3]), T.zeros([3, 5])).shape == (2, 5)
    with pytest.raises(InvalidShapeError):
        T.matmul(T.zeros([2, 3]), T.zeros([2, 3]))


def test_backward_examples():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with T.Tape():
        loss = T.reduce_sum(x)
    loss.backward()
    assert x.grad.tolist() == [1, 1, 1]

    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape():
        loss = T.reduce_sum(x * x)
    loss.backward()
    assert x.grad.tolist() == [2, 4]


def test_backward_accumulates_on_repeat():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape():
        loss = T.reduce_sum(x * x)
    loss.backward()
    loss.backward()
    assert x.grad.tolist() == [4, 8]


def test_backward_errors():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape():
        y = x * 2.0
    with pytest.raises(InvalidShapeError):
        y.backward()
    with pytest.raises(NoTapeError):
        T.reduce_sum(x).backward()


def test_untracked_tensor_gets_no_grad():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    c = T.Tensor([3.0, 4.0])
    with T.Tape() as tape:
        loss = T.reduce_sum(x * c)
    loss.backward()
    assert c.grad is None
    assert all(rec.output > max(i for i in rec.inputs if i is not None) for rec in tape.records)


def test_no_tape_records_nothing():
    x = T.Tensor([1.0], requires_grad=True)
    y = x * 3.0
    assert y._tape is None
    with T.Tape() as tape:
        with T.no_grad():
            x * 3.0
    assert len(tape) == 0


def test_finite_diff_check_examples():
    x = T.gaussian([5], 0, 1, seed=0)
    assert T.finite_diff_check(lambda t: T.reduce_sum(t * t), x) <= 1e-6
    assert T.finite_diff_check(lambda t: T.Tensor([4.0]), x) == 0.0
    with pytest.raises(InvalidShapeError):
        T.finite_diff_check(lambda t: t * 1.0, x)


def test_finite_diff_restores_state():
    x = T.gaussian([3], 0, 1, seed=0)
    before = x.data.copy()
    T.finite_diff_check(lambda t: T.reduce_sum(T.exp(t)), x)
    assert x.data.tobytes() == before.tobytes()
    assert x.grad is None and not x.requires_grad


def _composite(t):
    w = T.gaussian([4, 3], 0, 1, seed=11)
    h = T.relu(T.matmul(t, w))
    s = T.softplus(h) + T.exp(T.scale(h, 0.1))
    s = T.concat([s, T.square(h)], axis=1)
    s = T.reverse(T.transpose(s, (1, 0)), 0)
    b = T.broadcast_to(T.reduce_max(s, axes=1).reshape(6, 1), (6, 2))
    q = T.div(s, T.shift(T.exp(b), 1.0))
    return T.reduce_sum(T.sqrt_eps(T.square(q))) + T.reduce_mean(T.log(T.shift(T.square(q), 1.0)))


def test_composite_graph_matches_finite_differences():
    x = T.gaussian([2, 4], 0, 1, seed=5)
    assert T.finite_diff_check(_composite, x, h=1e-5) <= 1e-5


def test_composite_graph_32_bit():
    with T.precision(32):
        x = T.gaussian([2, 4], 0, 1, seed=5)
        assert T.finite_diff_check(_composite, x, h=1e-2) <= 1e-2


OPS = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.shift(T.square(b), 0.5)),
    "relu": lambda a, b: T.relu(a),
    "sqrt": lambda a, b: T.sqrt_eps(T.square(a)),
    "softplus": lambda a, b: T.softplus(a),
    "log": lambda a, b: T.log(T.shift(T.square(a), 1.0)),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b, (1, 0))),
    "max": lambda a, b: T.reduce_max(a, axes=1),
    "mean": lambda a, b: T.reduce_mean(a, axes=0),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), rows=st.integers(1, 3), cols=st.integers(1, 4))
def test_op_gradients_random_shapes(name, seed, rows, cols):
    a = T.gaussian([rows, cols], 0, 1, seed=seed)
    b = T.gaussian([rows, cols], 0, 1, seed=seed + 1)
    weights = T.gaussian(OPS[name](a, b).shape, 0, 1, seed=seed + 2)

    def f(t):
        return T.reduce_sum(T.mul(OPS[name](t, b), weights))

    assert T.finite_diff_check(f, a) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shape=st.lists(st.integers(1, 4), min_size=1, max_size=4))
def test_reorder_properties(seed, shape):
    x = T.gaussian(shape, 0, 1, seed=seed)
    for axis in range(len(shape)):
        assert T.reverse(T.reverse(x, axis), axis).data.tobytes() == x.data.tobytes()
    flat = T.reshape(x, [-1])
    assert np.isclose(T.reduce_sum(flat).item(), T.reduce_sum(x).item())
    perm = np.random.default_rng(seed).permutation(len(shape))
    back = T.transpose(T.transpose(x, perm), np.argsort(perm))
    assert np.ascontiguousarray(back.data).tobytes() == x.data.tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12))
def test_relu_zero_gradient_where_nonpositive(seed, n):
    x = T.gaussian([n], 0, 1, seed=seed)
    x.data[0] = 0.0
    x.requires_grad = True
    with T.Tape():
        loss = T.reduce_sum(T.relu(x))
    loss.backward()
    assert np.all(x.grad[x.data <= 0] == 0)
    assert np.all(x.grad[x.data > 0] == 1)
