"""Dense float64 tensors with a dynamic (record-on-execute) reverse-mode tape.

Every primitive is a pair of numpy kernels: ``forward(*arrays, **attrs)`` returning
``(out, saved)`` and ``backward(saved, grad_out)`` returning one gradient (or
``None``) per input. Primitives are looked up by name in ``PRIMITIVES``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError, ValueError):
    pass


class RankError(ShapeError):
    pass


class UnsupportedPrimitiveError(AutodiffError, LookupError):
    pass


class DeterminismError(AutodiffError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("prim", "inputs", "saved")

    def __init__(self, prim: str, inputs: tuple, saved):
        self.prim = prim
        self.inputs = inputs
        self.saved = saved


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return apply_primitive("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("sub", self, other)

    def __rsub__(self, other):
        return apply_primitive("sub", other, self)

    def __mul__(self, other):
        return apply_primitive("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply_primitive("mul", self, apply_primitive("reciprocal", other))

    def __neg__(self):
        return apply_primitive("neg", self)

    def __matmul__(self, other):
        return apply_primitive("matmul", self, other)

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", self, shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# shape helpers


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis: int, ndim: int, name: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{name}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# primitive kernels


def _add_f(a, b):
    _broadcast_shape("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_b(s, g):
    return _unbroadcast(g, s[0]), _unbroadcast(g, s[1])


def _sub_f(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_b(s, g):
    return _unbroadcast(g, s[0]), _unbroadcast(-g, s[1])


def _mul_f(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, (a, b)


def _mul_b(s, g):
    a, b = s
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_f(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) "
            f"for shapes {a.shape} @ {b.shape}"
        )
    return np.matmul(a, b), (a, b)


def _matmul_b(s, g):
    a, b = s
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _exp_f(x):
    y = np.exp(x)
    return y, y


def _exp_b(y, g):
    return (g * y,)


def _log_f(x):
    if np.any(x <= 0):
        raise AutodiffError("log: non-positive input")
    return np.log(x), x


def _log_b(x, g):
    return (g / x,)


def _neg_f(x):
    return -x, None


def _neg_b(_, g):
    return (-g,)


def _reciprocal_f(x):
    y = 1.0 / x
    return y, y


def _reciprocal_b(y, g):
    return (-g * y * y,)


def _relu_f(x):
    mask = x > 0
    return x * mask, mask


def _relu_b(mask, g):
    return (g * mask,)


def _sigmoid_f(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, y


def _sigmoid_b(y, g):
    return (g * y * (1.0 - y),)


def _softplus_f(x):
    return np.logaddexp(0.0, x), x


def _softplus_b(x, g):
    return (g * 0.5 * (1.0 + np.tanh(0.5 * x)),)


def _silu_f(x):
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return x * sig, (x, sig)


def _silu_b(s, g):
    x, sig = s
    return (g * sig * (1.0 + x * (1.0 - sig)),)


def _clip_f(x, lo=-np.inf, hi=np.inf):
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), inside


def _clip_b(inside, g):
    return (g * inside,)


def _softmax_f(x, axis=-1):
    axis = _norm_axis(axis, x.ndim, "softmax")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def _softmax_b(s, g):
    y, axis = s
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _sum_f(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims), (x.shape, axis, keepdims)


def _sum_b(s, g):
    shape, axis, keepdims = s
    return (np.array(_expand_reduced(g, shape, axis, keepdims)),)


def _mean_f(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return np.mean(x, axis=axis, keepdims=keepdims), (x.shape, axis, keepdims, n)


def _mean_b(s, g):
    shape, axis, keepdims, n = s
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / n,)


def _max_f(x, axis=-1, keepdims=False):
    axis = _norm_axis(axis, x.ndim, "max")
    m = x.max(axis=axis, keepdims=True)
    hit = x == m
    share = hit / hit.sum(axis=axis, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axis)
    return out, (share, axis, keepdims)


def _max_b(s, g):
    share, axis, keepdims = s
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (share * g,)


def _concat_f(*xs, axis=0):
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = xs[0]
    axis = _norm_axis(axis, ref.ndim, "concat")
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {x.shape} differ off axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    return np.concatenate(xs, axis=axis), (sizes, axis)


def _concat_b(s, g):
    sizes, axis = s
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _index_tuple(shape, indices, axis):
    """Advanced-index tuple selecting ``indices`` along ``axis``.

    1-D indices select the same positions for every leading slice; 2-D indices
    (batch, n) pick per-batch positions along axis 1.
    """
    if indices.ndim == 1:
        return (slice(None),) * axis + (indices,)
    if indices.ndim == 2 and axis == 1 and indices.shape[0] == shape[0]:
        return (np.arange(shape[0])[:, None], indices)
    raise ShapeError(
        f"gather/scatter: indices of shape {indices.shape} unsupported on axis {axis} "
        f"of tensor {shape}"
    )


def _gather_f(x, indices=None, axis=0):
    axis = _norm_axis(axis, x.ndim, "gather")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of size {x.shape[axis]}")
    key = _index_tuple(x.shape, idx, axis)
    return x[key], (x.shape, key)


def _gather_b(s, g):
    shape, key = s
    out = np.zeros(shape)
    np.add.at(out, key, g)
    return (out,)


def _scatter_f(x, indices=None, axis=0, size=None):
    axis = _norm_axis(axis, x.ndim, "scatter")
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[axis] if size is None else int(size)
    if idx.shape[-1] != x.shape[axis]:
        raise ShapeError(f"scatter: {idx.shape[-1]} indices for axis of size {x.shape[axis]}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"scatter: index out of range for target size {n}")
    shape = x.shape[:axis] + (n,) + x.shape[axis + 1 :]
    key = _index_tuple(shape, idx, axis)
    out = np.zeros(shape)
    np.add.at(out, key, x)
    return out, key


def _scatter_b(key, g):
    return (g[key],)


def _slice_f(x, start=0, stop=None, axis=0):
    axis = _norm_axis(axis, x.ndim, "slice")
    n = x.shape[axis]
    stop = n if stop is None else stop
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of size {n}")
    key = (slice(None),) * axis + (slice(start, stop),)
    return x[key], (x.shape, key)


def _slice_b(s, g):
    shape, key = s
    out = np.zeros(shape)
    out[key] = g
    return (out,)


def _reshape_f(x, shape=None):
    try:
        return x.reshape(shape), x.shape
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None


def _reshape_b(shape, g):
    return (g.reshape(shape),)


def _expand_f(x, shape=None):
    shape = tuple(shape)
    if x.shape != shape[len(shape) - x.ndim :]:
        raise ShapeError(f"expand: {x.shape} is not a trailing block of {shape}")
    return np.broadcast_to(x, shape).copy(), x.shape


def _expand_b(shape, g):
    return (_unbroadcast(g, shape),)


def _layernorm_f(x, gamma, beta, eps=1e-5):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layernorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layernorm_b(s, g):
    xhat, inv, gamma = s
    n = xhat.shape[-1]
    lead = tuple(range(xhat.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gx_hat = g * gamma
    gx = inv / n * (
        n * gx_hat
        - gx_hat.sum(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, ggamma, gbeta


def _conv1d_f(x, w, b):
    # x: (batch, T, Cin), w: (k, Cin, Cout), b: (Cout,); zero "same" padding
    if x.ndim != 3 or w.ndim != 3 or b.ndim != 1:
        raise ShapeError(f"conv1d: expected (B,T,Cin), (k,Cin,Cout), (Cout,); got {x.shape}, {w.shape}, {b.shape}")
    k, cin, cout = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd for same padding, got {k}")
    if x.shape[-1] != cin or b.shape[0] != cout:
        raise ShapeError(f"conv1d: channel mismatch x{x.shape} w{w.shape} b{b.shape}")
    pad = k // 2
    T = x.shape[1]
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    out = np.broadcast_to(b, (x.shape[0], T, cout)).copy()
    for j in range(k):
        out += xp[:, j : j + T] @ w[j]
    return out, (xp, w, pad, T)


def _conv1d_b(s, g):
    xp, w, pad, T = s
    k = w.shape[0]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(k):
        seg = xp[:, j : j + T]
        gw[j] = seg.reshape(-1, seg.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gxp[:, j : j + T] += g @ w[j].T
    gx = gxp[:, pad : pad + T]
    return gx, gw, g.sum(axis=(0, 1))


def _check_order(order, T: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (T,) or not np.array_equal(np.sort(order), np.arange(T)):
        raise ShapeError(f"selective_scan: order is not a permutation of [0, {T})")
    return order


def _scan_f(x, delta, bmat, cmat, A, skip, order=None):
    # x: (B,T,D); delta: (B,T); bmat, cmat: (B,T,S); A: (D,S); skip: (D,)
    if x.ndim != 3:
        raise ShapeError(f"selective_scan: x must be (batch, T, D), got {x.shape}")
    nb, T, D = x.shape
    S = A.shape[1]
    if A.shape != (D, S) or skip.shape != (D,) or delta.shape != (nb, T):
        raise ShapeError(
            f"selective_scan: inconsistent shapes x{x.shape} delta{delta.shape} A{A.shape} skip{skip.shape}"
        )
    if bmat.shape != (nb, T, S) or cmat.shape != (nb, T, S):
        raise ShapeError(f"selective_scan: B/C must be {(nb, T, S)}, got {bmat.shape}/{cmat.shape}")
    order = np.arange(T) if order is None else _check_order(order, T)
    xs, ds, bs, cs = x[:, order], delta[:, order], bmat[:, order], cmat[:, order]
    # the state history is only kept when a backward pass may follow
    hs = np.empty((nb, T, D, S)) if _GRAD_ENABLED else None
    ys = np.empty((nb, T, D))
    h = np.zeros((nb, D, S))
    a_bar = np.empty_like(h)
    inj = np.empty_like(h)
    db = ds[:, :, None] * bs  # (B,T,S)
    for t in range(T):
        np.multiply(ds[:, t, None, None], A, out=a_bar)
        np.exp(a_bar, out=a_bar)
        np.multiply(xs[:, t, :, None], db[:, t, None, :], out=inj)
        h *= a_bar
        h += inj
        if hs is not None:
            hs[:, t] = h
        ys[:, t] = np.matmul(h, cs[:, t, :, None])[..., 0]
    ys += xs * skip
    out = np.empty_like(ys)
    out[:, order] = ys
    return out, (xs, ds, bs, cs, A, skip, order, hs)


def _scan_b(s, g):
    xs, ds, bs, cs, A, skip, order, hs = s
    nb, T, D = xs.shape
    gys = g[:, order]
    gx = gys * skip
    gskip = (gys * xs).sum(axis=(0, 1))
    gd = np.zeros((nb, T))
    gb = np.empty_like(bs)
    gc = np.empty_like(cs)
    gA = np.zeros_like(A)
    gh = np.zeros((nb, D, A.shape[1]))
    for t in range(T - 1, -1, -1):
        gy = gys[:, t]
        gc[:, t] = np.matmul(gy[:, None, :], hs[:, t])[:, 0]
        gh = gh + gy[:, :, None] * cs[:, t, None, :]
        d = ds[:, t]
        a = np.exp(d[:, None, None] * A)
        if t > 0:
            gexp = gh * hs[:, t - 1] * a
            gA += np.tensordot(d, gexp, axes=(0, 0))
            gd[:, t] += (gexp * A).sum(axis=(1, 2))
        q = np.matmul(xs[:, t, None, :], gh)[:, 0]  # (B,S)
        gd[:, t] += (q * bs[:, t]).sum(axis=1)
        gb[:, t] = d[:, None] * q
        gx[:, t] += d[:, None] * np.matmul(gh, bs[:, t, :, None])[..., 0]
        gh = gh * a
    out = []
    for arr in (gx, gd, gb, gc):
        full = np.empty_like(arr)
        full[:, order] = arr
        out.append(full)
    return out[0], out[1], out[2], out[3], gA, gskip


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_f, _matmul_b),
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "exp": (_exp_f, _exp_b),
    "log": (_log_f, _log_b),
    "neg": (_neg_f, _neg_b),
    "reciprocal": (_reciprocal_f, _reciprocal_b),
    "softmax": (_softmax_f, _softmax_b),
    "concat": (_concat_f, _concat_b),
    "gather": (_gather_f, _gather_b),
    "scatter": (_scatter_f, _scatter_b),
    "sum": (_sum_f, _sum_b),
    "mean": (_mean_f, _mean_b),
    "max": (_max_f, _max_b),
    "relu": (_relu_f, _relu_b),
    "layernorm": (_layernorm_f, _layernorm_b),
    "conv1d": (_conv1d_f, _conv1d_b),
    "slice": (_slice_f, _slice_b),
    # helpers beyond the core set
    "sigmoid": (_sigmoid_f, _sigmoid_b),
    "softplus": (_softplus_f, _softplus_b),
    "silu": (_silu_f, _silu_b),
    "clip": (_clip_f, _clip_b),
    "reshape": (_reshape_f, _reshape_b),
    "expand": (_expand_f, _expand_b),
    "selective_scan": (_scan_f, _scan_b),
}


def apply_primitive(name: str, *inputs, **attrs) -> Tensor:
    """Run primitive ``name`` on ``inputs`` and record a tape node if needed."""
    try:
        fwd, _ = PRIMITIVES[name]
    except KeyError:
        raise UnsupportedPrimitiveError(f"unsupported primitive {name!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    out, saved = fwd(*(t.data for t in tensors), **attrs)
    result = Tensor(out)
    if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result.node = Node(name, tensors, saved)
    return result


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are overwritten.
    """
    if loss.data.size != 1:
        raise RankError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            g = np.zeros_like(t.data)
        if t.node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        t.grad = g
        _, bwd = PRIMITIVES[t.node.prim]
        in_grads = bwd(t.node.saved, g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        # drop activations once consumed
        t.node = None


def finite_difference_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 0.0,
    stats: dict | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` receives ``x`` when a single tensor is given; with a sequence of tensors
    (e.g. model parameters) it is called with no arguments. ``max_coords`` caps the
    number of probed coordinates per tensor (chosen with ``rng``). Coordinates where
    both gradients are below ``atol`` are counted as agreeing; pass ``stats`` to get
    the number of probed and compared coordinates back.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)

    def call() -> Tensor:
        return f(x) if single else f()

    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = call()
    v0 = loss.data.copy()
    backward(loss)
    with no_grad():
        v1 = call().data
    if not np.array_equal(v0, v1):
        raise DeterminismError(f"function is not deterministic: {v0} != {v1}")

    worst = 0.0
    probed = compared = 0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        ga = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(call().data)
                flat[i] = orig - eps
                down = float(call().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            probed += 1
            if max(abs(ga[i]), abs(num)) < atol:
                continue
            compared += 1
            err = abs(ga[i] - num) / (abs(ga[i]) + abs(num) + 1e-12)
            worst = max(worst, err)
    if stats is not None:
        stats.update(probed=probed, compared=compared)
    return worst
