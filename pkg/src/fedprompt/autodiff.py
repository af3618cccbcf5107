"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a module-level function taking and
returning :class:`Tensor`. When a :class:`GradientTape` is active on the
current thread and an input requires gradients, the operation records a
node holding a vector-Jacobian callback; ``tape.backward(loss)`` replays
the records in reverse. Tapes are thread-local so concurrent clients can
record independently (tensors themselves must not be shared mutably).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError

NORM_EPSILON = 1e-12
LAYER_NORM_EPSILON = 1e-5

_GELU_C = float(np.sqrt(2.0 / np.pi))

_local = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["GradientTape"]:
    """The innermost tape on this thread, or None outside any tape."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array plus gradient bookkeeping.

    ``grad`` is allocated eagerly (zeros) for gradient-requiring leaves
    and stays None on tensors produced by operations; intermediate
    gradients only live inside a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._node: Optional["_TapeNode"] = None

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """Copy of the value with no gradient tracking."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar."""
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _TapeNode:
    __slots__ = ("inputs", "output", "vjp", "tape")

    def __init__(self, inputs, output, vjp, tape):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.tape = tape


class GradientTape:
    """Ordered record of operations, replayed in reverse by backward()."""

    def __init__(self) -> None:
        self._nodes: list[_TapeNode] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate leaf gradients for everything reachable from ``loss``.

        The record order is a topological order of the forward graph, so a
        single reverse scan visits each node exactly once. Gradients
        accumulate into leaf ``grad`` buffers; call sites that need fresh
        gradients zero them first (the optimizers do this after stepping).
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss._node is None:
            if loss.requires_grad and loss.grad is not None:
                loss.grad += pending[id(loss)]
            return
        for node in reversed(self._nodes):
            grad_out = pending.pop(id(node.output), None)
            if grad_out is None:
                continue
            input_grads = node.vjp(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._node is None or tensor._node.tape is not self:
                    # Leaf parameter (or a value produced outside this tape):
                    # accumulate into its persistent buffer.
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += grad
                else:
                    acc = pending.get(id(tensor))
                    pending[id(tensor)] = grad if acc is None else acc + grad

    def clear(self) -> None:
        """Drop the record and zero gradient buffers; values are untouched."""
        for node in self._nodes:
            for tensor in node.inputs:
                if tensor.grad is not None:
                    tensor.grad[...] = 0.0
        self._nodes.clear()


def backward(loss: Tensor) -> None:
    """Module-level entry point: dispatch to the tape that recorded ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        # Constant w.r.t. everything recorded; leaves keep zero gradient.
        if loss.requires_grad and loss.grad is not None:
            loss.grad += np.ones_like(loss.data)
        return
    node.tape.backward(loss)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _apply(
    inputs: tuple[Tensor, ...],
    out_data: np.ndarray,
    vjp: Callable[[np.ndarray], tuple],
) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._result(out_data, needs)
    tape = active_tape()
    if needs and tape is not None:
        node = _TapeNode(inputs, out, vjp, tape)
        out._node = node
        tape._nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply((a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply((a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _apply((a, b), out, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _apply((a,), out, vjp)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DegenerateInputError("log requires strictly positive inputs")
    out = np.log(a.data)
    a_data = a.data

    def vjp(g):
        return (g / a_data,)

    return _apply((a,), out, vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    in_shape = a.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _apply((a,), out, vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.data.ndim}")
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _apply((a,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=ax))

    return _apply(tensors, out, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    ax = axis if axis >= 0 else a.data.ndim + axis
    extent = a.data.shape[ax]
    if start < 0 or length < 0 or start + length > extent:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for extent {extent}")
    index = [slice(None)] * a.data.ndim
    index[ax] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(a.data[index])
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape)
        full[index] = g
        return (full,)

    return _apply((a,), out, vjp)


def take_rows(a: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis if axis >= 0 else a.data.ndim + axis
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[ax]):
        raise IndexError(f"take_rows index out of range for extent {a.data.shape[ax]}")
    out = np.take(a.data, idx, axis=ax)
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape)
        np.add.at(full, (slice(None),) * ax + (idx,), g)
        return (full,)

    return _apply((a,), out, vjp)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` along a new leading axis."""
    if reps < 1:
        raise ShapeError("tile_rows requires reps >= 1")
    out = np.broadcast_to(a.data, (reps,) + a.data.shape).copy()

    def vjp(g):
        return (g.sum(axis=0),)

    return _apply((a,), out, vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2-D operands and a batched 3-D leading axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim > 3 or b.data.ndim > 3:
        raise ShapeError(f"matmul supports rank 2 or 3 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        if ga.ndim > a_data.ndim:
            ga = ga.sum(axis=0)
        if gb.ndim > b_data.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return _apply((a, b), out, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map ``x @ w + b`` (one tape node per layer call)."""
    if w.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"linear expects w [din, dout], b [dout]; got {w.shape}, {b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input width {x.shape} does not match w {w.shape}")
    out = np.matmul(x.data, w.data)
    out += b.data
    x_data, w_data = x.data, w.data

    def vjp(g):
        gx = np.matmul(g, w_data.T)
        gw = np.matmul(np.swapaxes(x_data, -1, -2), g)
        if gw.ndim > 2:
            gw = gw.sum(axis=0)
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _apply((x, w, b), out, vjp)


def dot_last(u: Tensor, v: Tensor) -> Tensor:
    """Sum of elementwise products over the trailing axis (broadcasts)."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise ShapeError(f"dot_last trailing extents differ: {u.shape} vs {v.shape}")
    _check_broadcast(u, v, "dot_last")
    out = np.sum(u.data * v.data, axis=-1)
    u_data, v_data = u.data, v.data

    def vjp(g):
        ge = g[..., None]
        return _unbroadcast(ge * v_data, u.shape), _unbroadcast(ge * u_data, v.shape)

    return _apply((u, v), out, vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    in_shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, in_shape).copy(),)

    return _apply((a,), out, vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("mean_all of an empty tensor")
    out = np.asarray(a.data.mean())
    in_shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g / n, in_shape).copy(),)

    return _apply((a,), out, vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation (smooth, finite-difference friendly)."""
    x = a.data
    x2 = x * x
    inner = x2 * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner)
    out = 1.0 + t
    out *= 0.5 * x

    def vjp(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _apply((a,), out, vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPSILON) -> Tensor:
    """Normalize the trailing axis, then scale/shift by gamma/beta."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm gamma/beta must have shape ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gamma.data + beta.data
    g_data = gamma.data

    def vjp(g):
        gy = g * g_data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        ga = (gy - m1 - xhat * m2) * inv
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return ga, ggamma, gbeta

    return _apply((a, gamma, beta), out, vjp)


def softmax(a: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Max-subtracted softmax of ``a / tau`` along ``axis``."""
    if tau <= 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    if a.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    z = a.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner) / tau,)

    return _apply((a,), s, vjp)


def softmax_with_temperature(x: Tensor, tau: float) -> Tensor:
    """Softmax over the trailing axis with explicit temperature ``tau``."""
    return softmax(x, tau=tau, axis=-1)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Fused scaled-dot-product attention over ``heads`` splits of the width.

    Accepts [s, dm] or [batch, s, dm] operands; queries/keys/values carry
    the full concatenated head width and are split internally.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention operands must share a shape: {q.shape}/{k.shape}/{v.shape}")
    dm = q.shape[-1]
    if dm % heads != 0:
        raise ShapeError(f"width {dm} is not divisible by {heads} heads")
    hd = dm // heads
    alpha = 1.0 / np.sqrt(hd)
    squeeze = q.data.ndim == 2
    s = q.shape[-2]

    def split(x):
        arr = x[None] if squeeze else x
        b = arr.shape[0]
        return arr.reshape(b, s, heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.matmul(qh, np.swapaxes(kh, -1, -2)) * alpha
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = np.matmul(attn, vh)
    b = ctx.shape[0]
    out = ctx.transpose(0, 2, 1, 3).reshape(b, s, dm)
    if squeeze:
        out = out[0]

    def merge(x):
        y = x.transpose(0, 2, 1, 3).reshape(b, s, dm)
        return y[0] if squeeze else y

    def vjp(g):
        gc = split(g if not squeeze else g)
        gv = np.matmul(np.swapaxes(attn, -1, -2), gc)
        gattn = np.matmul(gc, np.swapaxes(vh, -1, -2))
        inner = (gattn * attn).sum(axis=-1, keepdims=True)
        gscores = attn * (gattn - inner) * alpha
        gq = np.matmul(gscores, kh)
        gk = np.matmul(np.swapaxes(gscores, -1, -2), qh)
        return merge(gq), merge(gk), merge(gv)

    return _apply((q, k, v), out, vjp)


# ---------------------------------------------------------------------------
# norms and losses


def l2_normalize(x: Tensor) -> Tensor:
    """Scale trailing-axis rows to unit Euclidean norm."""
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPSILON):
        raise DegenerateInputError("l2_normalize: input norm below epsilon")
    y = x.data / norms

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * inner) / norms,)

    return _apply((x,), y, vjp)


def cosine_loss(u: Tensor, v: Tensor) -> Tensor:
    """Negative cosine similarity; -1 at perfect alignment, 0 when orthogonal."""
    if u.shape[-1] != v.shape[-1]:
        raise ShapeError(f"cosine_loss trailing extents differ: {u.shape} vs {v.shape}")
    return neg(dot_last(l2_normalize(u), l2_normalize(v)))


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    """Softmax cross-entropy over the trailing axis.

    ``target`` is an int for 1-D logits or an int array matching the
    leading shape; returns per-row losses (a scalar in the 1-D case).
    """
    c = logits.shape[-1]
    lead = logits.shape[:-1]
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.shape != lead:
        raise ShapeError(f"target shape {tgt.shape} does not match leading shape {lead}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= c):
        raise IndexError(f"class index out of range [0, {c})")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[..., 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    out = lse - picked
    probs = np.exp(z - zmax)
    probs /= probs.sum(axis=-1, keepdims=True)
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)

    def vjp(g):
        return (g[..., None] * (probs - onehot),)

    return _apply((logits,), out, vjp)
