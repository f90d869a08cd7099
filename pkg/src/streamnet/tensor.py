"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the streaming networks are provided:
``conv2d`` (stride 1, ``same``/``valid`` padding), ``maxpool2x2``, ``relu``,
``dense``, ``flatten``, ``concat`` and ``softmax_cross_entropy``, plus a few
elementwise helpers used by tests and custom losses.

Every op checks its output for NaN/Inf and raises :class:`NonFiniteError`
instead of propagating garbage.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError, SpatialCollapseError

DTYPE = np.float64

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, finite differences)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes are produced by ops and keep
    references to their parents plus a closure mapping the output gradient
    to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.parents = tuple(parents) if track else ()
        out.backward_fn = backward_fn if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # elementwise helpers -------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children.

    Iterative DFS over parents in recorded order, so the ordering (and hence
    gradient accumulation order) depends only on how the graph was built.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"non-finite gradient reaching {node!r}")
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# elementwise ---------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), back, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.array(x.data.sum()), (x,), back, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    def back(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), back, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


# layers ----------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), back, "relu")


def _same_pad(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def conv2d(x, kernels, bias, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation of an NCHW batch with (Cout, Cin, kh, kw) kernels.

    Lowered to a single matrix product over an im2col buffer. ``same`` pads
    ``(k-1)//2`` before and the remainder after, so output extent equals input.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d kernels must be 4-D (Cout,Cin,kh,kw), got shape {kernels.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input Cin={cin}, kernels Cin={kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if padding == "same":
        (ph0, ph1), (pw0, pw1) = _same_pad(kh), _same_pad(kw)
    elif padding == "valid":
        ph0 = ph1 = pw0 = pw1 = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    hp, wp = h + ph0 + ph1, w + pw0 + pw1
    if kh > hp:
        raise ShapeError(f"conv2d kernel height {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise ShapeError(f"conv2d kernel width {kw} exceeds padded input width {wp}")
    ho, wo = hp - kh + 1, wp - kw + 1

    xp = x.data
    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    # im2col buffer laid out (Cin*kh*kw, N*Ho*Wo): each pass is one GEMM
    if kh == 1 and kw == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(cin, n * ho * wo)
    else:
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, n * ho * wo)
    wmat = kernels.data.reshape(cout, -1)
    out = wmat @ cols
    out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def back(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        dk = db = dx = None
        if kernels.requires_grad:
            dk = (gm @ cols.T).reshape(kernels.shape)
        if bias.requires_grad:
            db = gm.sum(axis=1)
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(cin, kh, kw, n, ho, wo)
            dxp = np.zeros((cin, n, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
            dx = dxp.transpose(1, 0, 2, 3)[:, :, ph0:ph0 + h, pw0:pw0 + w]
        return dx, dk, db

    return Tensor._from_op(out, (x, kernels, bias), back, "conv2d")


def maxpool2x2(x) -> Tensor:
    """Non-overlapping 2x2 max pooling, stride 2; a trailing odd row/column is dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be 4-D (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise SpatialCollapseError(
            f"spatial collapse: maxpool2x2 needs H,W >= 2 but got {h}x{w} (network too deep for this input size)"
        )
    h2, w2 = h // 2, w // 2
    win = (
        x.data[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :, : 2 * h2, : 2 * w2] = (
            gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return (gx,)

    return Tensor._from_op(out, (x,), back, "maxpool2x2")


def dense(x, weights, bias) -> Tensor:
    """Affine map ``x @ weights + bias`` for x of shape (N, F)."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense feature mismatch: input has F={x.shape[1]}, weights expect F={weights.shape[0]}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias must have shape ({weights.shape[1]},), got {bias.shape}")

    def back(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor._from_op(x.data @ weights.data + bias.data, (x, weights, bias), back, "dense")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    Returns the scalar loss node and the (N, K) probability matrix.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D (N,K), got shape {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    probs = np.exp(log_p)
    loss = -log_p[np.arange(n), labels].mean()

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return Tensor._from_op(np.array(loss), (logits,), back, "softmax_cross_entropy"), probs


# verification ----------------------------------------------------------------

def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    epsilon: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> float:
    """Worst relative error between the analytic gradient and central differences.

    ``loss_fn`` must rebuild the scalar loss from scratch on each call, reading
    ``param.data``, which is perturbed in place one coordinate at a time and
    restored afterwards. ``indices`` restricts the check to a subset of
    coordinates (default: all).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    param.grad = None
    loss_fn().backward()
    analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    if indices is None:
        indices = np.ndindex(*param.shape)
    worst = 0.0
    with no_grad():
        for idx in indices:
            idx = tuple(idx)
            orig = param.data[idx]
            param.data[idx] = orig + epsilon
            f_plus = loss_fn().item()
            param.data[idx] = orig - epsilon
            f_minus = loss_fn().item()
            param.data[idx] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            worst = max(worst, float(relative_error(analytic[idx], numeric)))
    return worst
