"""Dense tensors with reverse-mode automatic differentiation and Adam.

Every op returns a new :class:`Tensor`. When one of its inputs requires a
gradient the result keeps references to its parents and a closure that
pushes the upstream gradient back to them; :func:`backward` walks that
graph once in reverse topological order and then frees it.

Only what the small MLP/conv nets in this package need is implemented.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operands of an op do not have conforming shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shapes {joined} do not conform")


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where the numeric contract forbids it."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite value in {where}")


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, double backward)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        """Same values, cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, "mul", (a, b), bw)


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)

    def bw(g):
        return (g * k,)

    return _make(a.data * k, "scale", (a,), bw)


def batch_scale(x: Tensor, s) -> Tensor:
    """Multiply sample ``i`` of ``x`` by the per-batch scalar ``s[i]``."""
    s = _as_tensor(s, x)
    if s.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError("batch_scale", x.shape, s.shape)
    return mul(x, reshape(s, (x.shape[0],) + (1,) * (x.ndim - 1)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(x.data * mask, "relu", (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)

    def bw(g):
        return (g * factor,)

    return _make(x.data * factor, "leaky_relu", (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _make(y, "tanh", (x,), bw)


# ----------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), "sum", (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis), 1.0 / n)


def sum_squares(x: Tensor, axis=None) -> Tensor:
    """Squared L2 norm, over everything or along ``axis``."""
    xd = x.data

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (2.0 * g * xd,)

    return _make(np.asarray((xd * xd).sum(axis=axis)), "sum_squares", (x,), bw)


# ------------------------------------------------------------------ structure


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(out, "reshape", (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", xs, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW batch."""
    if x.ndim != 4:
        raise ShapeError("upsample2x", x.shape)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def bw(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample2x", (x,), bw)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, "matmul", (a, b), bw)


def _shift_corr(xn: np.ndarray, wt: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of NHWC ``xn`` with ``wt`` shaped (kh, kw, cin, cout).

    One matmul against all kernel taps at once, then a shifted sum over taps;
    this avoids materialising an im2col matrix.
    """
    kh, kw, cin, cout = wt.shape
    n, hp, wp, _ = xn.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    taps = wt.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    y = (xn.reshape(-1, cin) @ taps).reshape(n, hp, wp, kh, kw, cout)
    out = y[:, :oh, :ow, 0, 0, :].copy()
    for i in range(kh):
        for j in range(kw):
            if i or j:
                out += y[:, i : i + oh, j : j + ow, i, j, :]
    return out


def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 2D cross-correlation. ``x`` is NCHW, ``w`` is (out, in, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d(same) needs odd kernels", w.shape)
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    # work channels-last internally
    xn = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    outn = _shift_corr(xn, w.data.transpose(2, 3, 1, 0))
    oh, ow = outn.shape[1:3]
    out = np.ascontiguousarray(outn.transpose(0, 3, 1, 2))
    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g):
        gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gx = gw = None
        if need_w:
            gm = gn.reshape(-1, o)
            gw = np.empty((kh, kw, c, o), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = xn[:, i : i + oh, j : j + ow, :].reshape(-1, c).T @ gm
            gw = gw.transpose(3, 2, 0, 1)
        if need_x:
            # correlate the padded output gradient with the flipped kernel
            qh, qw = kh - 1 - ph, kw - 1 - pw
            gp = np.pad(gn, ((0, 0), (qh, qh), (qw, qw), (0, 0)))
            gxn = _shift_corr(gp, w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1))
            gx = gxn.transpose(0, 3, 1, 2)
        return gx, gw

    return _make(out, "conv2d", (x, w), bw)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` that requires it.

    Leaf gradients accumulate; the intermediate graph is freed afterwards so a
    second call on the same loss raises :class:`TapeError`.
    """
    if loss._freed:
        raise TapeError("backward called twice on the same tape")
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    _check_finite(loss.data, "loss")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._freed = True


# ------------------------------------------------------------ gradient check


def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f``.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor; the error per
    coordinate is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = f(x)
    _check_finite(out.data, "gradcheck objective")
    backward(out)
    analytic = np.zeros_like(x0) if x.grad is None else x.grad

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("gradcheck objective")
        nflat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


# ----------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 0.0025
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> AdamState:
        st = cls(**kw)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    A missing gradient (``None``) counts as zero.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            if g.shape != p.shape:
                raise ShapeError(f"adam_step[{name}]", p.shape, g.shape)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"gradient of {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif state.m[name].shape != p.shape:
            raise ShapeError(f"adam_step[{name}] state", p.shape, state.m[name].shape)

    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {name: p.grad for name, p in params.items()}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
