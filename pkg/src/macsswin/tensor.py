"""Dense N-d tensors with tape-based reverse-mode autodiff.

Operations record onto a :class:`Tape` only while one is active
(``with Tape() as tape:``) and at least one operand requires gradients.
Outside a tape every operation is a plain numpy computation, which is how
inference runs.

Storage is a contiguous numpy buffer; permutes copy. float32 is the working
dtype, float64 is meant for gradient checking.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .exceptions import ContractError, DTypeError, ParameterError, ShapeError

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """N-d float array that can take part in one autodiff tape at a time."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_TYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        dtype = np.dtype(dtype)
        if dtype not in _FLOAT_TYPES:
            raise DTypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        return transpose(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-use: after :meth:`backward` it must be :meth:`reset`
    before new operations are recorded or another backward pass is run.
    """

    def __init__(self, retain_grads: bool = False):
        self.retain_grads = retain_grads
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self._done:
            raise ContractError("tape already ran backward; call reset() before recording")
        for t in inputs:
            if t._tape is not None and t._tape is not self and t.requires_grad:
                raise ContractError("tensor belongs to a different tape")
        out.requires_grad = True
        out._tape = self
        self._nodes.append((out, inputs, backward))

    def reset(self) -> None:
        for out, _, _ in self._nodes:
            out._tape = None
        self._nodes.clear()
        self._grads = {}
        self._done = False

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf tensor that requires gradients."""
        if self._done:
            raise ContractError("backward already called on this tape; reset() first")
        if loss.size != 1:
            raise ContractError(f"backward needs a single-element loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._tape is not self and loss.requires_grad:
            leaves[id(loss)] = loss
        for out, inputs, fn in reversed(self._nodes):
            key = id(out)
            g = grads.get(key) if self.retain_grads else grads.pop(key, None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                tk = id(t)
                prev = grads.get(tk)
                grads[tk] = gi if prev is None else prev + gi
                if t._tape is not self:
                    leaves[tk] = t
        for tk, t in leaves.items():
            g = grads[tk]
            t.grad = np.ascontiguousarray(g, dtype=t.dtype).reshape(t.shape)
        if self.retain_grads:
            self._grads = grads
        # release the graph (closures hold activations) as soon as it is consumed
        for out, _, _ in self._nodes:
            out._tape = None
        self._nodes.clear()
        self._done = True

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        """Gradient of any recorded tensor; needs ``retain_grads=True``."""
        if not self.retain_grads:
            raise ContractError("intermediate gradients need Tape(retain_grads=True)")
        return self._grads.get(id(t))


def _result(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, backward)
    return out


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype or np.float32))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(
        ad / bd,
        (a, b),
        lambda g: (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _result((xd * cdf).astype(xd.dtype, copy=False), (x,), backward)


# -- linear algebra ------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as e:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if x.dtype != weight.dtype:
        raise DTypeError(f"dtype mismatch: {x.dtype} vs {weight.dtype}")
    xd, wd = x.data, weight.data
    k, n = wd.shape
    out = xd.reshape(-1, k) @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (n,))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = xd.reshape(-1, k).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, inputs, backward)


# -- normalisation / activations -----------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    _check_axis(xd, axis)
    z = xd - xd.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    y = z

    def backward(g):
        gy = g * y
        return (gy - y * gy.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    _check_axis(xd, axis)
    z = xd - xd.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggam = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbet = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggam, gbet

    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def drop_path(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Stochastic depth: zero whole samples (axis 0) with probability ``p``."""
    if p <= 0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    keep = (rng.random(shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -- layout --------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {src} into {shape}") from e
    return _result(out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(x: Tensor, a: int = -2, b: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    dt = xs[0].dtype
    if any(t.dtype != dt for t in xs):
        raise DTypeError("concat operands must share a dtype")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concat shapes {[t.shape for t in xs]} on axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(xs), backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in xs]
    return concat(expanded, axis=axis)


def getitem(x: Tensor, idx) -> Tensor:
    xd = x.data
    out = np.array(xd[idx], copy=True)
    fancy = _is_fancy(idx)

    def backward(g):
        gx = np.zeros_like(xd)
        if fancy:
            np.add.at(gx, idx, np.reshape(g, out.shape))
        else:
            gx[idx] = np.reshape(g, out.shape)
        return (gx,)

    return _result(out, (x,), backward)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    if not any(shifts):
        return x
    back = tuple(-s for s in shifts)
    return _result(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),))


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if not any(a or b for a, b in widths):
        return x
    out = np.pad(x.data, widths)
    sl = tuple(slice(a, n + a) for (a, _), n in zip(widths, x.shape))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g[sl]),))


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0 (embedding-style lookup)."""
    index = np.asarray(index, dtype=np.intp)
    td = table.data
    rows = td.shape[0]
    flat = index.reshape(-1)

    def backward(g):
        g2 = g.reshape(flat.size, -1)
        gt = np.empty((rows, g2.shape[1]), dtype=td.dtype)
        for j in range(g2.shape[1]):
            gt[:, j] = np.bincount(flat, weights=g2[:, j], minlength=rows)
        return (gt.reshape(td.shape),)

    return _result(td[index], (table,), backward)


def upsample_nearest(x: Tensor, factors: Sequence[int], axes: Sequence[int]) -> Tensor:
    out = x.data
    for f, ax in zip(factors, axes):
        out = np.repeat(out, f, axis=ax)
    src = x.shape

    def backward(g):
        for f, ax in zip(factors, axes):
            ax = ax % g.ndim
            g = g.reshape(g.shape[:ax] + (g.shape[ax] // f, f) + g.shape[ax + 1 :]).sum(axis=ax + 1)
        return (g.reshape(src),)

    return _result(out, (x,), backward)


# -- reductions ----------------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = np.asarray(xd.sum(axis=axis, keepdims=keepdims), dtype=xd.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape),)

    return _result(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    if axis is None:
        count = xd.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([xd.shape[a] for a in axes]))
    out = np.asarray(xd.mean(axis=axis, keepdims=keepdims), dtype=xd.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xd.shape),)

    return _result(out, (x,), backward)


def _check_axis(arr: np.ndarray, axis: int) -> None:
    if not -arr.ndim <= axis < arr.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {arr.shape}")


# -- verification --------------------------------------------------------
def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called as ``f(x)`` (or ``f(*x)`` for a sequence) and must return
    a single-element tensor. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. ``max_entries`` caps the number of
    coordinates probed per tensor (sampled with ``seed``).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(x)) if isinstance(x, Tensor) else (lambda: f(*xs))
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = call()
            tape.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
    finally:
        for t, fl in zip(xs, flags):
            t.requires_grad = fl
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        ga = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = call().item()
            flat[i] = orig - step
            fm = call().item()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return float(worst)
