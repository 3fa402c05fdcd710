"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Every op returns a new :class:`Tensor`.  When any input requires a gradient the
result remembers its parents and a vector-Jacobian product closure, so a call
to :func:`backward` on a scalar walks the recorded graph in reverse
topological order and accumulates cotangents over fan-out.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
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


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if op == "leaf" and not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    return data


def _node(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    data = _finite(np.asarray(data, dtype=np.float64), op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, vjp, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "div")


# linear algebra and shape ops

def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional; ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1]) if a.ndim > 1 else a.data[None, :]
            g2 = g.reshape(-1, b.shape[1])
            gb = a2.T @ g2
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _node(np.transpose(a.data, axes), (a,), vjp, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), vjp, "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _node(out, ts, vjp, "concat")


def slice_(a, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(np.array(out, copy=True), (a,), vjp, "slice")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast: {a.shape} -> {shape}") from exc

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _node(np.array(out), (a,), vjp, "broadcast")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


# elementwise unary ops

def _unary(a, out: np.ndarray, dfn: Callable[[np.ndarray], np.ndarray], op: str) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * dfn(out),)

    return _node(out, (a,), vjp, op)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    # sign(0) == 0 gives the zero subgradient at the kink
    return _unary(a, np.abs(a.data), lambda _o: np.sign(a.data), "abs")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(a.data)

    def d(o):
        with np.errstate(divide="ignore"):
            return np.where(o > 0, 0.5 / np.where(o > 0, o, 1.0), 0.0)

    return _unary(a, out, d, "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _unary(a, out, lambda o: o, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _unary(a, out, lambda _o: 1.0 / a.data, "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, _sigmoid_np(a.data), lambda o: o * (1.0 - o), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.tanh(a.data), lambda o: 1.0 - o * o, "tanh")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _unary(a, a.data * s, lambda _o: s * (1.0 + a.data * (1.0 - s)), "silu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _unary(a, out, lambda _o: _sigmoid_np(x), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0), lambda _o: (a.data > 0).astype(np.float64), "relu")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.data * a.data, lambda _o: 2.0 * a.data, "square")


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# convolution

def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (C*9, N*Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, 9, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, k] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * 9, n * ho * wo)


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1; x is (N, C, H, W), w is (O, C, 3, 3)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    if stride not in (1, 2):
        raise ShapeError("conv2d: stride must be 1 or 2")
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    cols = _im2col(_pad_hw(x.data, 1), ho, wo, stride)
    wmat = w.data.reshape(o, c * 9)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, o, 1, 1)
        parents.append(b)

    def vjp(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, 9, n, ho, wo)
            dxp = np.zeros((c, n, h + 2, wd + 2))
            for k in range(9):
                i, j = divmod(k, 3)
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, k]
            gx = dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
        if w.requires_grad:
            gw = (gmat @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _node(np.ascontiguousarray(out), parents, vjp, "conv2d")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of (N, C, H, W) built from reshape/broadcast."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    t = reshape(x, (n, c, h, 1, w, 1))
    t = broadcast_to(t, (n, c, h, 2, w, 2))
    return reshape(t, (n, c, 2 * h, 2 * w))


def custom_op(inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable, op: str = "custom") -> Tensor:
    """Register an externally computed value with a hand-written adjoint."""
    return _node(out, [as_tensor(t) for t in inputs], vjp, op)


# reverse pass

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from ``root``; returns ``{id(tensor): gradient}`` for every node reached.

    ``root`` must be a scalar unless an explicit output cotangent ``seed`` is given.
    """
    if seed is None:
        if root.data.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        seed = np.ones_like(root.data)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    if not root.requires_grad:
        return grads
    for node in reversed(_topo(root)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        pgrads = node.vjp(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def grad(root: Tensor, wrt: Iterable[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray]:
    """Gradients of ``root`` for each tensor in ``wrt``; disconnected tensors get zeros."""
    wrt = list(wrt)
    g = backward(root, seed)
    return [g.get(id(t), np.zeros_like(t.data)) for t in wrt]


def finite_difference_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
                            mask: np.ndarray | None = None) -> float:
    """Max relative error between ``backward`` and central differences of scalar ``f`` at ``x``.

    ``mask`` restricts the comparison to selected coordinates (e.g. away from kinks).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError("eps must lie in (0, 1e-2]")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    (g_ad,) = grad(f(xt), [xt])
    g_fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = g_fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            if mask is not None and not mask.reshape(-1)[i]:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x0)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(x0)).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differences")
            gflat[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    if mask is not None:
        err = np.where(mask.reshape(err.shape), err, 0.0)
    return float(err.max()) if err.size else 0.0
