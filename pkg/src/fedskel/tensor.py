"""Dense tensors with reverse-mode autodiff and an SGD-with-momentum optimizer.

Tensors store contiguous row-major float arrays (float32 by default; float64 is
supported so tests can run gradient checks in higher precision). Every
differentiable op records a backward closure on the output tensor; ``backward``
replays the graph in reverse topological order. All reductions use numpy's
fixed left-to-right summation, so identical inputs give bitwise-identical
outputs and gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, DimensionError, ConfigError, UsageError

Array = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: Array = np.ascontiguousarray(arr)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A view of the same values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small conveniences; the real API is the module-level functions.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def _make(
    out: Array,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[Array], Sequence[Array | None]],
) -> Tensor:
    """Wrap an op result, recording the closure only if gradients can flow."""
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward_fn = backward_fn
    return t


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


# The attention-mask product is a plain elementwise multiply.
hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    # Subgradient at exactly 0 is defined as 0.
    mask = a.data > 0
    return _make(np.where(mask, a.data, a.data.dtype.type(0)), (a,), lambda g: (g * mask,))


def smul(s: Tensor, a: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (gradients flow to both)."""
    if s.data.size != 1:
        raise DimensionError(f"smul: scalar operand has shape {s.data.shape}")
    sv = s.data.reshape(())

    def backward(g: Array):
        return (np.sum(g * a.data, dtype=g.dtype).reshape(s.data.shape), g * sv)

    return _make(a.data * sv, (s, a), backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    return _make(
        np.sum(a.data, dtype=a.data.dtype).reshape(()),
        (a,),
        lambda g: (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),),
    )


def sq_diff_sum(w: Tensor, target: Array) -> Tensor:
    """0.5 * sum((w - target)^2); the proximal pull toward a reference value."""
    if w.data.shape != target.shape:
        raise DimensionError(f"sq_diff_sum: shape mismatch {w.data.shape} vs {target.shape}")
    diff = w.data - target.astype(w.data.dtype, copy=False)
    out = np.asarray(0.5, dtype=w.data.dtype) * np.sum(diff * diff, dtype=w.data.dtype)
    return _make(out.reshape(()), (w,), lambda g: (g * diff,))


# ---------------------------------------------------------------------------
# Linear algebra / neural-net ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g: Array):
        return (g @ b.data.T, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[N,D] @ w[O,D].T + b[O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(f"linear: incompatible shapes {x.data.shape} and {w.data.shape}")

    def backward(g: Array):
        return (g @ w.data, g.T @ x.data, g.sum(axis=0))

    return _make(x.data @ w.data.T + b.data, (x, w, b), backward)


def graph_mix(f: Tensor, adj: Tensor) -> Tensor:
    """Propagate features over the joint graph: out[...,v] = sum_u f[...,u] A[u,v]."""
    if f.data.shape[-1] != adj.data.shape[0] or adj.data.ndim != 2:
        raise DimensionError(
            f"graph_mix: feature joints {f.data.shape} vs adjacency {adj.data.shape}"
        )

    shape = f.data.shape
    flat = f.data.reshape(-1, shape[-1])

    def backward(g: Array):
        gflat = g.reshape(-1, shape[-1])
        df = (gflat @ adj.data.T).reshape(shape)
        da = flat.T @ gflat
        return (df, da)

    return _make((flat @ adj.data).reshape(shape), (f, adj), backward)


def _cmix_forward(w: Array, f: Array) -> Array:
    """out[n,o,t,v] = sum_c W[o,c] f[n,c,t,v], as a batched matmul."""
    n, c, t, v = f.shape
    f3 = np.ascontiguousarray(f).reshape(n, c, t * v)
    return np.matmul(w, f3).reshape(n, w.shape[0], t, v)


def _cmix_backward(w: Array, f: Array, g: Array) -> tuple[Array, Array]:
    n, c, t, v = f.shape
    f3 = np.ascontiguousarray(f).reshape(n, c, t * v)
    g3 = np.ascontiguousarray(g).reshape(n, w.shape[0], t * v)
    df = np.matmul(w.T, g3).reshape(f.shape)
    dw = np.matmul(g3, f3.transpose(0, 2, 1)).sum(axis=0)
    return df, dw


def channel_mix(f: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution over channels: out[n,o,t,v] = sum_c W[o,c] f[n,c,t,v]."""
    if f.data.ndim != 4 or w.data.ndim != 2 or w.data.shape[1] != f.data.shape[1]:
        raise DimensionError(
            f"channel_mix: features {f.data.shape} vs weights {w.data.shape}"
        )

    def backward(g: Array):
        return _cmix_backward(w.data, f.data, g)

    return _make(_cmix_forward(w.data, f.data), (f, w), backward)


def temporal_conv1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Per-joint temporal convolution with symmetric zero padding.

    x: [N, C_in, T, V], kernel: [C_out, C_in, k_t] with k_t odd.
    Output time extent is ceil(T / stride).
    """
    if kernel.data.ndim != 3:
        raise DimensionError(f"temporal_conv1d: kernel shape {kernel.data.shape}")
    co, ci, kt = kernel.data.shape
    if kt % 2 == 0:
        raise ConfigError(f"temporal kernel size must be odd, got {kt}")
    if stride < 1:
        raise ConfigError(f"temporal stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or x.data.shape[1] != ci:
        raise DimensionError(
            f"temporal_conv1d: input {x.data.shape} vs kernel {kernel.data.shape}"
        )
    n, _, t, v = x.data.shape
    pad = (kt - 1) // 2
    t_out = -(-t // stride)

    xp = np.zeros((n, ci, t + 2 * pad, v), dtype=x.data.dtype)
    xp[:, :, pad : pad + t, :] = x.data

    hi = (t_out - 1) * stride + 1
    # im2col over the time axis: one fused matmul instead of kt small ones.
    cols = np.empty((n, ci, kt, t_out, v), dtype=x.data.dtype)
    for j in range(kt):
        cols[:, :, j] = xp[:, :, j : j + hi : stride, :]
    cols3 = cols.reshape(n, ci * kt, t_out * v)
    k2 = kernel.data.reshape(co, ci * kt)
    out = np.matmul(k2, cols3).reshape(n, co, t_out, v)

    def backward(g: Array):
        g3 = np.ascontiguousarray(g).reshape(n, co, t_out * v)
        dcols = np.matmul(k2.T, g3).reshape(n, ci, kt, t_out, v)
        dxp = np.zeros_like(xp)
        for j in range(kt):
            dxp[:, :, j : j + hi : stride, :] += dcols[:, :, j]
        dk = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0).reshape(co, ci, kt)
        return (dxp[:, :, pad : pad + t, :], dk)

    return _make(out, (x, kernel), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the time and joint axes: [N,C,T,V] -> [N,C]."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4-d input, got {x.data.shape}")
    n, c, t, v = x.data.shape
    inv = x.data.dtype.type(1.0 / (t * v))

    def backward(g: Array):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.data.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-d input, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g: Array):
        dot = np.sum(g * p, axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows: expected 2-d input, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)

    def backward(g: Array):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(logp, (x,), backward)


def cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Batch-averaged cross entropy against integer class labels."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: expected 2-d logits, got {logits.data.shape}")
    n, c = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(
            f"label out of range [0, {c}): min={labels.min()}, max={labels.max()}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean(dtype=logits.data.dtype)

    def backward(g: Array):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / logits.data.dtype.type(n)),)

    return _make(np.asarray(loss).reshape(()), (logits,), backward)


def kl_to_student(teacher_probs: Array, student_logits: Tensor) -> Tensor:
    """Batch-averaged KL(teacher || student); the teacher is a fixed target."""
    if student_logits.data.ndim != 2:
        raise DimensionError(
            f"kl_to_student: expected 2-d logits, got {student_logits.data.shape}"
        )
    if teacher_probs.shape != student_logits.data.shape:
        raise DimensionError(
            f"kl_to_student: teacher {teacher_probs.shape} vs student {student_logits.data.shape}"
        )
    n = teacher_probs.shape[0]
    dtype = student_logits.data.dtype
    p = teacher_probs.astype(dtype, copy=False)
    z = student_logits.data - student_logits.data.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    plogp = np.where(p > 0, p * np.log(np.maximum(p, np.finfo(dtype).tiny)), dtype.type(0))
    loss = (plogp - p * logq).sum(dtype=dtype) / dtype.type(n)

    def backward(g: Array):
        q = np.exp(logq)
        return ((q - p) * (g / dtype.type(n)),)

    return _make(np.asarray(loss).reshape(()), (student_logits,), backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    training: bool,
    update_stats: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over the N, T, V axes of [N,C,T,V]."""
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm: expected 4-d input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or running_mean.shape != (c,):
        raise DimensionError(
            f"batchnorm: channel count {c} vs state {running_mean.shape}"
        )
    dtype = x.data.dtype
    eps = dtype.type(eps)
    gview = gamma.data[None, :, None, None]

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            m = dtype.type(momentum)
            running_mean *= 1 - m
            running_mean += m * mu
            running_var *= 1 - m
            running_var += m * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g: Array):
            dxhat = g * gview
            mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv_std[None, :, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return (dx, dgamma, dbeta)

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g: Array):
            dx = g * gview * inv_std[None, :, None, None]
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return (dx, dgamma, dbeta)

    out = gview * xhat + beta.data[None, :, None, None]
    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into all reachable leaves."""
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # Iterative post-order DFS; the resulting list is a topological order.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            g = np.asarray(g, dtype=parent.data.dtype)
            if parent.grad is None:
                parent.grad = g.reshape(parent.data.shape).copy()
            else:
                parent.grad += g.reshape(parent.data.shape)
        # Free the closure so intermediate buffers can be collected.
        node._backward_fn = None
        node._parents = ()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class SgdMomentum:
    """SGD with classical momentum and decoupled-from-nothing weight decay.

    v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v.
    Velocity buffers are created lazily, zero-initialized, keyed by parameter
    name. Gradients are zeroed after each step.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {weight_decay}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, Array] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise UsageError(f"parameter '{name}' has no gradient")
            dtype = p.data.dtype
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self.velocity[name] = v
            v *= dtype.type(self.momentum)
            v += p.grad
            if self.weight_decay:
                v += dtype.type(self.weight_decay) * p.data
            p.data -= dtype.type(self.lr) * v
            p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
