"""Dense float32 tensors with reverse-mode automatic differentiation.

Values are stored as float32; reductions accumulate in float64 and are cast
back.  Every op records its inputs and a backward rule on the output tensor,
and :func:`backward` walks the resulting graph in reverse topological order.

Gradients accumulate: calling :func:`backward` twice without
:meth:`Tensor.zero_grad` adds the second pass onto the first.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, optimizer steps)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Store new tensors as ``dtype`` inside the block (float64 for gradient checks)."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class Tensor:
    """A row-major float32 array that can take part in a compute graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=DTYPE)
    out.grad = None
    out.name = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# initialisation

def seeded_randn(shape: Sequence[int], seed: int, scale: float = 1.0,
                 requires_grad: bool = False) -> Tensor:
    """Normal samples with standard deviation ``scale``; a pure function of its arguments."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must be nonempty")
    if any(s <= 0 for s in shape):
        raise ValueError(f"zero-extent dimension in shape {shape}")
    if not scale > 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# broadcasting: equal shapes, scalars, or a per-channel vector against N x C[...]

def _channel_view(vec_shape: tuple[int, ...], full_shape: tuple[int, ...]) -> tuple[int, ...] | None:
    if len(vec_shape) == 1 and len(full_shape) >= 2 and vec_shape[0] == full_shape[1]:
        return (1, vec_shape[0]) + (1,) * (len(full_shape) - 2)
    return None


def _align(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if a.shape == b.shape or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return a, b
    view = _channel_view(b.shape, a.shape)
    if view is not None:
        return a, b.reshape(view)
    view = _channel_view(a.shape, b.shape)
    if view is not None:
        return a.reshape(view), b
    raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return grad.sum(dtype=np.float64).astype(DTYPE).reshape(shape)
    # per-channel vector
    axes = tuple(i for i in range(grad.ndim) if i != 1)
    return grad.sum(axis=axes, dtype=np.float64).astype(DTYPE).reshape(shape)


def _binary(a, b, op: str, fwd, grads) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    xa, xb = _align(a.data, b.data)
    with np.errstate(over="ignore", invalid="ignore"):
        out = fwd(xa, xb)  # overflow is reported by the finiteness check instead

    def backward_fn(g):
        ga, gb = grads(g, xa, xb)
        return (None if ga is None else _unbroadcast(np.broadcast_to(ga, out.shape), a.shape),
                None if gb is None else _unbroadcast(np.broadcast_to(gb, out.shape), b.shape))

    return _make(out, (a, b), op, backward_fn)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def div(a, b) -> Tensor:
    b = as_tensor(b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: (g / y, -g * x / (y * y)))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(x.data * DTYPE(factor), (x,), "scale", lambda g: (g * DTYPE(factor),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), "relu", lambda g: (g * mask,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise FloatingPointError("sqrt of a negative value")
    out = np.sqrt(x.data)
    if np.any(out == 0):
        def backward_fn(g):
            raise ZeroDivisionError("sqrt backward at zero")
    else:
        def backward_fn(g):
            return (g / (2 * out),)
    return _make(out, (x,), "sqrt", backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def tensor_sum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64))
    src = x.shape
    return _make(total, (x,), "sum", lambda g: (np.broadcast_to(g, src).astype(DTYPE),))


def mean(x: Tensor) -> Tensor:
    return scale(tensor_sum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    xa, xb = a.data, b.data
    out = (xa.astype(np.float64) @ xb.astype(np.float64))
    return _make(out, (a, b), "matmul", lambda g: (
        (g.astype(np.float64) @ xb.T.astype(np.float64)).astype(DTYPE),
        (xa.T.astype(np.float64) @ g.astype(np.float64)).astype(DTYPE),
    ))


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(f"non-integral conv output: size={size}, kernel={k}, "
                         f"stride={stride}, padding={pad}")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N x C x H x W input with an F x C x kh x kw kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho = _conv_out(h, kh, stride, padding)
    wo = _conv_out(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # n, c, ho, wo, kh, kw
    wk = kernel.data
    out = np.einsum("nchwij,fcij->nfhw", windows.astype(np.float64), wk.astype(np.float64),
                    optimize=True)

    def backward_fn(g):
        g64 = g.astype(np.float64)
        gk = np.einsum("nfhw,nchwij->fcij", g64, windows, optimize=True)
        gxp = np.zeros(xp.shape, dtype=np.float64)
        contrib = np.einsum("nfhw,fcij->nchwij", g64, wk.astype(np.float64), optimize=True)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib[..., i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx.astype(DTYPE), gk.astype(DTYPE)

    return _make(out, (x, kernel), "conv2d", backward_fn)


# ---------------------------------------------------------------------------
# statistics and losses

def _reduce_axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        axes = (0,) if ndim == 2 else (0, 2, 3) if ndim == 4 else tuple(range(ndim))
    axes = tuple(sorted(a % ndim for a in axes))
    if not axes or len(set(axes)) != len(axes) or any(a >= ndim for a in axes):
        raise ValueError(f"invalid reduction axes {axes} for a {ndim}-d tensor")
    return axes


def moments(x: Tensor, axes: Sequence[int] | None = None) -> tuple[Tensor, Tensor]:
    """Mean and biased variance over ``axes``.

    The default reduces over N for N x C input and over N, H, W for
    N x C x H x W input, leaving one value per channel.
    """
    x = as_tensor(x)
    axes = _reduce_axes(x.ndim, axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=axes, keepdims=True)
    centred = x64 - mu
    var = (centred * centred).mean(axis=axes, keepdims=True)
    kept = tuple(s for i, s in enumerate(x.shape) if i not in axes)
    src = x.shape

    def mean_back(g):
        return (np.broadcast_to(g.reshape(mu.shape) / count, src).astype(DTYPE),)

    def var_back(g):
        return ((g.reshape(var.shape) * 2.0 * centred / count).astype(DTYPE),)

    return (_make(mu.reshape(kept), (x,), "moments.mean", mean_back),
            _make(var.reshape(kept), (x,), "moments.var", var_back))


def _labels_array(labels, n: int, k: int) -> np.ndarray:
    lab = np.asarray(labels).astype(np.int64).reshape(-1)
    if lab.shape[0] != n:
        raise ValueError(f"{lab.shape[0]} labels for {n} rows of logits")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return lab


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    lab = _labels_array(labels, n, k)
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), lab].mean()

    def backward_fn(g):
        p = np.exp(logp)
        p[np.arange(n), lab] -= 1.0
        return ((float(np.asarray(g).reshape(-1)[0]) / n) * p).astype(DTYPE),

    return _make(np.asarray(loss), (logits,), "softmax_cross_entropy", backward_fn)


# ---------------------------------------------------------------------------
# reverse pass

def graph_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``requires_grad`` tensor."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    order = graph_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
            prev = pending.get(id(parent))
            pending[id(parent)] = pg if prev is None else prev + pg


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of ``fn`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 1e-8) -> float:
    """``|a - b| / (|a| + |b|)``; 0 when both sides are below ``zero_tol`` in norm."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < zero_tol and nb < zero_tol:
        return 0.0
    return float(np.linalg.norm(a - b) / (na + nb))


__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "precision", "as_tensor", "seeded_randn",
    "add", "sub", "mul", "div", "scale", "relu", "sqrt", "reshape", "flatten",
    "tensor_sum", "mean", "matmul", "conv2d", "moments", "softmax_cross_entropy",
    "log_softmax", "graph_order", "backward", "numeric_grad", "relative_error",
]
