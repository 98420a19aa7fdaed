import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import softmax as sp_softmax
from scipy.stats import norm

from macsswin import tensor as T
from macsswin.exceptions import ContractError, DTypeError, ParameterError, ShapeError
from macsswin.tensor import Tape, Tensor, grad_check


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_matmul_values():
    a = f64([[1, 2], [3, 4]])
    b = f64([[5, 6], [7, 8]])
    np.testing.assert_array_equal(T.matmul(f64(np.eye(2)), b).data, b.data)
    np.testing.assert_array_equal((a @ b).data, [[19, 22], [43, 50]])


def test_matmul_grad_closed_form():
    a = f64([[1, 2], [3, 4]], grad=True)
    b = f64([[5, 6], [7, 8]])
    with Tape() as tape:
        loss = (a @ b).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [[11, 15], [11, 15]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(f64(np.ones((2, 3))), f64(np.ones((2, 3))))


def test_mixed_dtype_rejected():
    with pytest.raises(DTypeError):
        T.add(Tensor(np.ones(2, np.float32)), Tensor(np.ones(2, np.float64)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(f64([0, 0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(f64([np.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    out = T.softmax(f64([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0])


def test_layer_norm_examples():
    one, zero = f64([1.0, 1.0]), f64([0.0, 0.0])
    np.testing.assert_allclose(T.layer_norm(f64([1, 1, 1]), f64([1, 1, 1]), f64([0, 0, 0])).data, 0)
    np.testing.assert_allclose(T.layer_norm(f64([0, 2]), one, zero, eps=1e-12).data, [-1, 1], atol=1e-9)
    np.testing.assert_allclose(T.layer_norm(f64([0, 2]), f64([3, 3]), f64([1, 1]), eps=1e-12).data, [-2, 4], atol=1e-9)
    with pytest.raises(ParameterError):
        T.layer_norm(f64([0, 2]), one, zero, eps=0.0)


def test_gelu_examples():
    out = T.gelu(f64([0.0, 10.0, 1.0])).data
    assert out[0] == 0
    assert abs(out[1] - 10) < 1e-6
    assert abs(out[2] - norm.cdf(1.0)) < 1e-12


def test_view_examples():
    x = f64(np.arange(6))
    np.testing.assert_array_equal(x.reshape(2, 3).reshape(6).data, x.data)
    m = f64(np.arange(6).reshape(2, 3))
    np.testing.assert_array_equal(m.permute(1, 0).permute(1, 0).data, m.data)
    assert f64([1, 2, 3, 4]).mean().item() == 2.5
    with pytest.raises(ShapeError):
        x.reshape(4, 2)


def test_backward_examples():
    x = f64(np.random.default_rng(0).normal(size=(2, 3, 4)), grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    y = f64([1.0, -2.0], grad=True)
    with Tape() as tape:
        loss = (y * y).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad, [2.0, -4.0])


def test_backward_contract_errors():
    x = f64([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ContractError):
        tape.backward(y)
    with Tape() as tape:
        loss = (x * 2).sum()
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)
    tape.reset()
    with tape:
        loss = (x * 3).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_tensor_on_two_tapes_rejected():
    x = f64([1.0], grad=True)
    with Tape():
        y = x * 2
        with Tape():
            with pytest.raises(ContractError):
                _ = y * 3


def test_no_tape_means_no_recording():
    x = f64([1.0, 2.0], grad=True)
    y = x * 2
    assert y._tape is None


def test_intermediate_grads_need_retain():
    x = f64([1.0, 2.0], grad=True)
    with Tape(retain_grads=True) as tape:
        h = x * 3
        loss = (h * h).sum()
    tape.backward(loss)
    np.testing.assert_allclose(tape.grad_of(h), 2 * h.data)
    with Tape() as plain:
        loss = (x * 2).sum()
    plain.backward(loss)
    with pytest.raises(ContractError):
        plain.grad_of(x)


def test_grad_check_linear_is_exact():
    x = f64(np.random.default_rng(1).normal(size=(3, 4)))
    assert grad_check(lambda t: t.sum(), x) < 1e-10


def test_composed_loss_grad_check():
    rng = np.random.default_rng(2)
    a = f64(rng.normal(size=(3, 4)))
    b = f64(rng.normal(size=(4, 5)))

    def f(a, b):
        return T.log(T.softmax(a @ b)).sum()

    assert grad_check(f, [a, b]) < 1e-4


def _rand(shape, seed=0, scale=1.0):
    return f64(np.random.default_rng(seed).normal(size=shape) * scale)


PRIMITIVES = {
    "add": (lambda a, b: (T.add(a, b) * b).sum(), [(3, 4), (4,)]),
    "sub": (lambda a, b: (T.sub(a, b) ** 2).sum(), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: (a * b).sum(), [(2, 3), (2, 3)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [(2, 3), (3,)]),
    "power": (lambda a: (T.power(a * a + 1.0, 1.5)).sum(), [(5,)]),
    "exp": (lambda a: T.exp(a).sum(), [(4,)]),
    "log": (lambda a: T.log(a * a + 0.5).sum(), [(4,)]),
    "gelu": (lambda a: (T.gelu(a) * a).sum(), [(6,)]),
    "matmul_batched": (lambda a, b: (a @ b).sum(), [(2, 3, 4), (4, 2)]),
    "linear": (lambda x, w, b: (T.linear(x, w, b) ** 2).sum(), [(2, 3, 4), (4, 5), (5,)]),
    "softmax": (lambda a, w: (T.softmax(a, axis=1) * w).sum(), [(3, 5), (3, 5)]),
    "log_softmax": (lambda a, w: (T.log_softmax(a) * w).sum(), [(3, 5), (3, 5)]),
    "layer_norm": (lambda x, g, b, w: (T.layer_norm(x, g, b) * w).sum(), [(3, 6), (6,), (6,), (3, 6)]),
    "permute": (lambda a, w: (a.permute(2, 0, 1) * w).sum(), [(2, 3, 4), (4, 2, 3)]),
    "concat": (lambda a, b, w: (T.concat([a, b], axis=1) * w).sum(), [(2, 3), (2, 2), (2, 5)]),
    "stack": (lambda a, b, w: (T.stack([a, b], axis=1) * w).sum(), [(2, 3), (2, 3), (2, 2, 3)]),
    "getitem": (lambda a: (T.getitem(a, (slice(1, 3), [0, 2, 2])) ** 2).sum(), [(4, 3)]),
    "roll": (lambda a, w: (T.roll(a, (1, -2), (0, 1)) * w).sum(), [(3, 4), (3, 4)]),
    "pad": (lambda a, w: (T.pad(a, ((1, 0), (0, 2))) * w).sum(), [(2, 3), (3, 5)]),
    "upsample": (lambda a, w: (T.upsample_nearest(a, (2, 3), (0, 1)) * w).sum(), [(2, 2), (4, 6)]),
    "mean_axis": (lambda a: (T.mean(a, axis=(0, 2)) ** 2).sum(), [(2, 3, 4)]),
    "sum_axis": (lambda a: (T.sum_(a, axis=1, keepdims=True) ** 2).sum(), [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    xs = [_rand(s, seed=i) for i, s in enumerate(shapes)]
    assert grad_check(fn, xs) < 1e-4


def test_take_rows_and_relu_and_clip_gradients():
    table = _rand((5, 3))
    index = np.array([[0, 4], [4, 2]])
    w = _rand((2, 2, 3), seed=3)
    assert grad_check(lambda t, w: (T.take_rows(t, index) * w).sum(), [table, w]) < 1e-4
    # keep away from the kinks so finite differences stay valid
    x = f64([-1.3, -0.2, 0.4, 2.1])
    assert grad_check(lambda t: (T.relu(t) * t).sum(), x) < 1e-4
    assert grad_check(lambda t: (T.clip(t, -1.0, 1.0) * t).sum(), x) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_normalized(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out, sp_softmax(x, axis=-1), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-100, 100, allow_nan=False)),
       st.permutations([0, 1, 2]))
def test_views_invert_exactly(x, axes):
    t = Tensor(x)
    inv = np.argsort(axes)
    np.testing.assert_array_equal(t.permute(*axes).permute(*inv).data, x)
    np.testing.assert_array_equal(t.reshape(-1).reshape(*x.shape).data, x)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)), st.sampled_from([0, 1]))
def test_mean_times_count_is_sum(x, axis):
    t = Tensor(x)
    total = (T.mean(t, axis=axis).data * x.shape[axis]).sum()
    np.testing.assert_allclose(total, x.sum(), rtol=1e-5, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_gradient_has_tensor_shape(x):
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = T.softmax(t).sum() + (t * t).mean()
    tape.backward(loss)
    assert t.grad.shape == x.shape


def test_backward_runs_in_reverse_recording_order():
    seen = []
    x = f64([1.0], grad=True)
    with Tape() as tape:
        a = T._result(x.data * 2, (x,), lambda g: (seen.append("a") or g * 2,))
        b = T._result(a.data * 3, (a,), lambda g: (seen.append("b") or g * 3,))
        loss = b.sum()
    tape.backward(loss)
    assert seen == ["b", "a"]
    assert x.grad[0] == 6.0
