"""
Dense tensors with reverse-mode differentiation.

A Tensor wraps a numpy array. Every operation that produces a Tensor from inputs
that require gradients records its parents and a closure that pushes the output
gradient back to them; backward() walks that graph in reverse topological order.
Fused kernels (masked softmax, RMSNorm, RoPE, cross-entropy) carry hand-derived
gradients so the graph stays small.
"""

import threading
from contextlib import contextmanager
from typing import List, Sequence

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .errors import MaskError, NumericalError, TensorShapeError

RMS_EPS = 1e-6

_DTYPE = np.float64
# grad mode is per thread
_GRAD_STATE = threading.local()


def set_precision(name: str):
    global _DTYPE
    if name not in ("float64", "float32"):
        raise TensorShapeError(f"unsupported precision '{name}' (expected float64 or float32)")
    _DTYPE = np.float64 if name == "float64" else np.float32


def get_dtype():
    return _DTYPE


@contextmanager
def no_grad():
    """Evaluate without recording a graph (inference paths)."""
    previous = grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # graph plumbing

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            raise TensorShapeError(f"gradient shape {grad.shape} does not match value shape {self.data.shape}")
        self.grad = grad if self.grad is None else self.grad + grad

    # arithmetic

    def __add__(self, other):
        other = _as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = _as_tensor(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.shape))

        return Tensor._result(self.data @ other.data, (self, other), backward)

    def __getitem__(self, index):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accumulate(full)

        return Tensor._result(self.data[index], (self,), backward)

    # shape

    def reshape(self, *shape):
        original = self.shape
        return Tensor._result(self.data.reshape(*shape), (self,),
                              lambda g: self._accumulate(g.reshape(original)))

    def transpose(self, *axes):
        inverse = np.argsort(axes)
        return Tensor._result(self.data.transpose(*axes), (self,),
                              lambda g: self._accumulate(g.transpose(*inverse)))

    def swap_last(self):
        return Tensor._result(np.swapaxes(self.data, -1, -2), (self,),
                              lambda g: self._accumulate(np.swapaxes(g, -1, -2)))

    # reductions

    def sum(self, axis=None, keepdims: bool = False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).astype(self.data.dtype))

        return Tensor._result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def concat(tensors: List[Tensor], axis: int = 0) -> Tensor:
    extents = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(extents)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            t._accumulate(piece)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g):
        x._accumulate(g * (s + x.data * s * (1.0 - s)))

    return Tensor._result(x.data * s, (x,), backward)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over admissible entries of the last axis; inadmissible entries get exactly zero."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape[-2:]:
        raise TensorShapeError(f"mask shape {mask.shape} does not match scores {scores.shape[-2:]}")
    empty = ~mask.any(axis=-1)
    if empty.any():
        raise MaskError(f"query rows {np.flatnonzero(empty).tolist()} admit no key")

    s = np.where(mask, scores.data, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(s - top), 0.0)
    w = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        scores._accumulate(w * (g - (g * w).sum(axis=-1, keepdims=True)))

    return Tensor._result(w, (scores,), backward)


def masked_attention(queries: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray) -> Tensor:
    """
    Scaled dot-product attention restricted to admissible (query, key) pairs.

    queries (..., Tq, dk), keys (..., Tk, dk), values (..., Tk, dv), mask (Tq, Tk) boolean.
    """
    d_k = queries.shape[-1]
    if d_k <= 0 or keys.shape[-1] != d_k:
        raise TensorShapeError(f"query/key head dims {queries.shape[-1]} vs {keys.shape[-1]}")
    scores = (queries @ keys.swap_last()) * (1.0 / np.sqrt(d_k))
    return masked_softmax(scores, mask) @ values


def rmsnorm(states: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    if gain.shape != states.shape[-1:]:
        raise TensorShapeError(f"gain shape {gain.shape} does not match features {states.shape[-1]}")
    x = states.data
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x / r

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if states.requires_grad:
            gh = g * gain.data
            states._accumulate((gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) / r)

    return Tensor._result(xhat * gain.data, (states, gain), backward)


def rope_angles(positions, dim: int, theta: float) -> np.ndarray:
    positions = np.asarray(positions)
    if positions.size and positions.min() < 0:
        raise TensorShapeError(f"negative rotary position {int(positions.min())}")
    if dim % 2:
        raise TensorShapeError(f"rotary dimension must be even, got {dim}")
    freqs = theta ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return positions.astype(np.float64)[:, None] * freqs[None, :]


def rope_apply(states: Tensor, positions, theta: float = 500000.0) -> Tensor:
    """Rotate interleaved feature pairs (2i, 2i+1) of each row by position * theta^(-2i/d)."""
    if theta <= 0:
        raise TensorShapeError(f"rope theta must be positive, got {theta}")
    if len(positions) != states.shape[-2]:
        raise TensorShapeError(f"{len(positions)} positions for sequence extent {states.shape[-2]}")
    angles = rope_angles(positions, states.shape[-1], theta)
    cos = np.cos(angles).astype(_DTYPE)
    sin = np.sin(angles).astype(_DTYPE)

    def rotate(x, sign):
        even, odd = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = even * cos - sign * odd * sin
        out[..., 1::2] = sign * even * sin + odd * cos
        return out

    return Tensor._result(rotate(states.data, 1.0), (states,),
                          lambda g: states._accumulate(rotate(g, -1.0)))


def swiglu_ffn(states: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    return (silu(states @ w_gate) * (states @ w_up)) @ w_down


def cross_entropy_from_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    rows, vocab = logits.shape
    if targets.shape != (rows,):
        raise TensorShapeError(f"{targets.shape} targets for {rows} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TensorShapeError(f"target id outside vocabulary [0, {vocab})")
    weights = np.ones(rows) if weights is None else np.asarray(weights, dtype=np.float64)
    if (weights < 0).any():
        raise TensorShapeError("loss weights must be non-negative")

    x = logits.data
    picked = x[np.arange(rows), targets]
    nll = logsumexp(x, axis=-1) - picked
    live = weights != 0
    loss = np.sum(weights[live] * nll[live])

    def backward(g):
        grad = softmax(x, axis=-1)
        grad[np.arange(rows), targets] -= 1.0
        grad = grad * weights[:, None]
        grad[~live] = 0.0
        logits._accumulate((g * grad).astype(x.dtype))

    return Tensor._result(np.asarray(loss, dtype=_DTYPE), (logits,), backward)


def backward(loss: Tensor):
    """Populate .grad on every tensor that requires gradients and reaches `loss`."""
    if loss.size != 1:
        raise TensorShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite loss {float(loss.data)}")
    if not loss.requires_grad:
        return

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                node.grad = None
