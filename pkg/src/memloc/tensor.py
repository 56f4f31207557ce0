"""Dense tensors with a small reverse-mode autodiff engine.

Every primitive evaluates eagerly on numpy arrays, checks that its output is
finite, and (when any input requires a gradient) records a node pointing at
its inputs together with a closure that maps the output gradient to input
gradients. ``Tensor.backward`` walks the recorded DAG in reverse topological
order, visiting every node once.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    pass


class NumericFault(FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphStateError(RuntimeError):
    pass


def as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(as_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def flatten(self):
        return flatten(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if self._backward is None and not self.requires_grad:
            raise GraphStateError("tensor was not produced by a recorded forward pass")
        order = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericFault(f"{op}: non-finite output (shape {data.shape})")
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _emit("matmul", A @ B, (a, b), backward)


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _emit("add", out, (a, b), backward)


def multiply(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: cannot broadcast {a.shape} with {b.shape}") from None
    A, B = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * B, A.shape) if a.requires_grad else None,
            _unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return _emit("multiply", out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``(N, C, H, W)`` with ``(F, C, kh, kw)`` kernels."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    if OH < 1 or OW < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    if b is not None:
        b = _wrap(b)
        if b.shape != (F,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {F} filters")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(F, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(F, N, OH, OW).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(F, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = kernels.col2im(wmat.T @ gmat, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(gmat.sum(axis=1))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, parents, backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (odd trailing rows/cols are dropped)."""
    x = _wrap(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"max_pool2d: need (N, C, H>=2, W>=2), got {x.shape}")
    out, idx = kernels.maxpool2x2(x.data)
    shape = x.shape
    return _emit("max_pool2d", out, (x,), lambda g: (kernels.maxpool2x2_backward(g, idx, shape),))


def global_avg_pool(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: need (N, C, H, W), got {x.shape}")
    N, C, H, W = x.shape
    scale = x.dtype.type(1.0 / (H * W))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),)

    return _emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


def flatten(x: Tensor) -> Tensor:
    x = _wrap(x)
    shape = x.shape
    return _emit("flatten", x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: np.ndarray | None = None,
    var: np.ndarray | None = None,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization over all axes except axis 1.

    With ``mean``/``var`` given those statistics are constants (eval mode);
    otherwise batch statistics are used and differentiated through. Returns
    the output together with the statistics that were applied (biased variance).
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: need (N, C) or (N, C, H, W), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} vs {C} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    training = mean is None
    if training:
        mu = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
    else:
        mu, v = np.asarray(mean, dtype=x.dtype), np.asarray(var, dtype=x.dtype)
    inv = (1.0 / np.sqrt(v + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.data.size // C

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return (gx.astype(x.dtype, copy=False), ggamma, gbeta)

    return _emit("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), backward), mu, v


def gate(x: Tensor, g) -> Tensor:
    """Multiply each unit (axis 1) of ``x`` by a gate.

    ``g`` is either one gate per unit, shape ``(U,)``, or one row of gates per
    example, shape ``(N, U)``; it broadcasts over spatial axes.
    """
    x, g = _wrap(x), _wrap(g, x if not isinstance(g, Tensor) else None)
    if x.ndim not in (2, 4):
        raise ShapeError(f"gate: need (N, U) or (N, U, H, W) input, got {x.shape}")
    U = x.shape[1]
    if g.shape == (U,):
        gshape = (1, U) + (1,) * (x.ndim - 2)
        red = (0,) if x.ndim == 2 else (0, 2, 3)
    elif g.shape == (x.shape[0], U):
        gshape = (x.shape[0], U) + (1,) * (x.ndim - 2)
        red = () if x.ndim == 2 else (2, 3)
    else:
        raise ShapeError(f"gate: gate shape {g.shape} does not match input {x.shape}")
    G, X = g.data.reshape(gshape), x.data

    def backward(gr):
        gx = gr * G if x.requires_grad else None
        gg = None
        if g.requires_grad:
            gg = (gr * X).sum(axis=red) if red else gr * X
            gg = gg.reshape(g.shape)
        return (gx, gg)

    return _emit("gate", X * G, (x, g), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor, labels, weights: np.ndarray | None = None, reduction: str = "mean"
) -> Tensor:
    """Cross entropy of ``softmax(logits)`` against integer labels.

    ``reduction`` is ``"mean"``, ``"sum"``, or ``"none"``; per-example
    ``weights`` multiply the per-row losses before the sum reduction.
    """
    logits = _wrap(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    N = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    per = lse - z[rows, labels]
    w = np.ones(N, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    if reduction == "mean":
        w = w / logits.dtype.type(N)
    if reduction == "none":
        out = per.astype(logits.dtype, copy=False)
    else:
        out = np.asarray((per * w).sum(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        scale = g[:, None] if reduction == "none" else (g * w)[:, None]
        return ((p * scale).astype(logits.dtype, copy=False),)

    return _emit("softmax_cross_entropy", out, (logits,), backward)


# ---------------------------------------------------------------------------
# graphs over named leaves


class Graph:
    """A forward function over named leaf tensors, evaluated on demand.

    ``fn`` receives one :class:`Tensor` per binding (as keyword arguments)
    and returns the output tensor. After :func:`evaluate_graph`, ``nodes``
    holds the primitive applications in topological order.
    """

    def __init__(self, fn: Callable[..., Tensor], grad_leaves: Iterable[str] | None = None):
        self.fn = fn
        self.grad_leaves = None if grad_leaves is None else set(grad_leaves)
        self.leaves: dict[str, Tensor] = {}
        self.output: Tensor | None = None
        self.nodes: list[Tensor] = []

    def _wants_grad(self, name: str) -> bool:
        return self.grad_leaves is None or name in self.grad_leaves


def evaluate_graph(graph: Graph, bindings: dict[str, np.ndarray | Tensor]) -> Tensor:
    leaves = {}
    for name, value in bindings.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        leaves[name] = Tensor(arr.copy(), requires_grad=graph._wants_grad(name), name=name)
    out = graph.fn(**leaves)
    if not isinstance(out, Tensor):
        raise TypeError("graph function must return a Tensor")
    graph.leaves, graph.output = leaves, out
    graph.nodes = [n for n in _toposort(out) if not n.is_leaf]
    return out


def backward(graph: Graph, loss: Tensor | None = None) -> dict[str, np.ndarray]:
    """Gradient of the (scalar) graph output with respect to every grad leaf."""
    if graph.output is None:
        raise GraphStateError("backward called before the graph was evaluated")
    loss = graph.output if loss is None else loss
    for t in graph.leaves.values():
        t.grad = None
    loss.backward()
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in graph.leaves.items()
        if t.requires_grad
    }


def finite_diff_gradient(graph: Graph, bindings: dict[str, np.ndarray], name: str, step: float = 1e-5,
                         coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference estimate of d(output)/d(bindings[name]).

    Only float64 bindings are accepted. ``coords`` restricts the estimate to
    selected flat indices (other entries are left at zero).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.asarray(bindings[name])
    if base.dtype != np.float64:
        raise TypeError(f"finite differences need float64 inputs, got {base.dtype}")
    est = np.zeros(base.size)
    idx = range(base.size) if coords is None else coords
    for i in idx:
        vals = []
        for sgn in (1.0, -1.0):
            pert = base.copy().reshape(-1)
            pert[i] += sgn * step
            b = dict(bindings)
            b[name] = pert.reshape(base.shape)
            vals.append(float(evaluate_graph(Graph(graph.fn, ()), b).data.sum()))
        est[i] = (vals[0] - vals[1]) / (2 * step)
    return est.reshape(base.shape)
