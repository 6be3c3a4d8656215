"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records operations in execution order; ``Tape.backward`` walks
the record once in reverse, so every backward rule runs exactly once per
pass and inputs are always visited after the ops that consume them.

Quantized weights enter the graph through ``ste_node``, which forwards
precomputed quantized values and routes gradients to the underlying
weights through a 0/1 pass mask (straight-through estimator).

Everything is float64: quantization in this package restricts values, not
storage width, so a plain dense array backend is sufficient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not fit the requested operation."""


class ValidationError(ValueError):
    """An operation precondition was violated."""


def stable_softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``z / temperature``, stabilized by max subtraction."""
    zt = np.asarray(z, dtype=np.float64) / temperature
    e = np.exp(zt - zt.max())
    return e / e.sum()


class Tensor:
    """Dense float64 array registered on a tape.

    ``grad`` is populated on requires-grad leaves after ``Tape.backward``.
    """

    __slots__ = ("data", "tape", "node_id", "requires_grad", "grad")

    def __init__(self, data, tape, node_id, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def sum(self):
        return tensor_sum(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


class _Op:
    __slots__ = ("out_id", "out_shape", "in_ids", "backward")

    def __init__(self, out_id, out_shape, in_ids, backward):
        self.out_id = out_id
        self.out_shape = out_shape
        self.in_ids = in_ids
        self.backward = backward


class Tape:
    """Ordered operation record for one forward pass.

    One tape belongs to one forward/backward cycle; distinct runs use
    distinct tapes and never share mutable state. ``backward_calls``
    counts backward-rule executions of the most recent backward pass.
    """

    def __init__(self):
        self._ops: list[_Op] = []
        self._leaves: list[Tensor] = []
        self._next_id = 0
        self.backward_calls = 0

    def _new_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    @property
    def num_ops(self):
        return len(self._ops)

    def leaf(self, data, requires_grad=False) -> Tensor:
        """Register an input tensor (parameter or constant)."""
        t = Tensor(data, self, self._new_id(), requires_grad)
        self._leaves.append(t)
        return t

    def record(self, out_data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        """Register an op output.

        ``backward(grad_out)`` must return one gradient array (or None)
        per input, in input order.
        """
        for t in inputs:
            if t.tape is not self:
                raise ValidationError("all operands must live on the same tape")
        out = Tensor(out_data, self, self._new_id())
        self._ops.append(_Op(out.node_id, out.data.shape, tuple(t.node_id for t in inputs), backward))
        return out

    def backward(self, loss: Tensor):
        """Accumulate gradients of a scalar loss into requires-grad leaves.

        Each leaf's ``grad`` is overwritten (zeros if the loss does not
        depend on it).
        """
        if loss.tape is not self:
            raise ValidationError("loss tensor is not on this tape")
        if loss.data.size != 1:
            raise ValidationError(f"loss must be scalar, got shape {loss.data.shape}")
        grads = {loss.node_id: np.ones_like(loss.data)}
        self.backward_calls = 0
        for op in reversed(self._ops):
            gout = grads.pop(op.out_id, None)
            if gout is None:
                gout = np.zeros(op.out_shape)
            gins = op.backward(gout)
            self.backward_calls += 1
            for nid, g in zip(op.in_ids, gins):
                if g is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + g
                else:
                    grads[nid] = g
        for t in self._leaves:
            if t.requires_grad:
                g = grads.get(t.node_id)
                t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)


def _is_number(x):
    return isinstance(x, (int, float, np.integer, np.floating))


def _check_elementwise(a_shape, b_shape, name):
    """Equal shapes, or one side carrying a single element."""
    if a_shape == b_shape:
        return
    if int(np.prod(a_shape)) == 1 or int(np.prod(b_shape)) == 1:
        return
    raise DimensionError(f"{name}: incompatible shapes {a_shape} and {b_shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    # gradient of the broadcast single-element side is the total
    return np.sum(g).reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return [g @ bd.T, ad.T @ g]

    return a.tape.record(ad @ bd, [a, b], bwd)


def add(a: Tensor, b) -> Tensor:
    if _is_number(b):
        return a.tape.record(a.data + float(b), [a], lambda g: [g])
    _check_elementwise(a.shape, b.shape, "add")
    ash, bsh = a.data.shape, b.data.shape
    return a.tape.record(a.data + b.data, [a, b],
                         lambda g: [_reduce_to(g, ash), _reduce_to(g, bsh)])


def sub(a: Tensor, b) -> Tensor:
    if _is_number(b):
        return a.tape.record(a.data - float(b), [a], lambda g: [g])
    _check_elementwise(a.shape, b.shape, "sub")
    ash, bsh = a.data.shape, b.data.shape
    return a.tape.record(a.data - b.data, [a, b],
                         lambda g: [_reduce_to(g, ash), _reduce_to(-g, bsh)])


def mul(a: Tensor, b) -> Tensor:
    if _is_number(b):
        c = float(b)
        return a.tape.record(a.data * c, [a], lambda g: [g * c])
    _check_elementwise(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return a.tape.record(ad * bd, [a, b],
                         lambda g: [_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)])


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape.record(a.data * c, [a], lambda g: [g * c])


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    keep = (a.data > 0).astype(np.float64)
    return a.tape.record(a.data * keep, [a], lambda g: [g * keep])


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.data.shape
    return a.tape.record(np.asarray(np.sum(a.data)), [a],
                         lambda g: [np.ones(shape) * g])


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: rows of a 2-D batch, or channels of NCHW."""
    if x.data.ndim == 2 and b.shape == (x.shape[1],):
        return x.tape.record(x.data + b.data, [x, b], lambda g: [g, g.sum(axis=0)])
    if x.data.ndim == 4 and b.shape == (x.shape[1],):
        return x.tape.record(x.data + b.data[None, :, None, None], [x, b],
                             lambda g: [g, g.sum(axis=(0, 2, 3))])
    raise DimensionError(f"bias_add: bias {b.shape} does not fit input {x.shape}")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels.

    Stabilized by per-row max subtraction; backward is
    (softmax - onehot) / batch.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} does not match batch {n}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError("labels must be integers")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(f"labels must lie in [0, {c}), got range "
                              f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return [p * (float(g) / n)]

    return logits.tape.record(np.asarray(loss), [logits], bwd)


def ste_node(w: Tensor, forward_value, pass_mask) -> Tensor:
    """Forward a precomputed value, pass gradients through a 0/1 mask.

    ``forward_value`` and ``pass_mask`` are taken as constants (arrays or
    tensors); the gradient flows only to ``w``, elementwise masked.
    """
    value = np.asarray(forward_value.data if isinstance(forward_value, Tensor) else forward_value,
                       dtype=np.float64)
    mask = np.asarray(pass_mask.data if isinstance(pass_mask, Tensor) else pass_mask,
                      dtype=np.float64)
    if value.shape != w.shape or mask.shape != w.shape:
        raise DimensionError(f"ste_node: value {value.shape} / mask {mask.shape} "
                             f"must match weights {w.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValidationError("ste_node: pass mask entries must be 0 or 1")
    return w.tape.record(value, [w], lambda g: [g * mask])


def softmax_with_temperature(z: Tensor, temperature: float) -> Tensor:
    """Temperature softmax of a vector, with the exact Jacobian backward."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    if z.data.ndim != 1:
        raise DimensionError(f"softmax_with_temperature needs a vector, got {z.shape}")
    a = stable_softmax(z.data, temperature)

    def bwd(g):
        return [a * (g - np.dot(g, a)) / temperature]

    return z.tape.record(a, [z], bwd)


def mix(rows: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Weighted sum of equally shaped tensors: ``sum_k weights[k] * rows[k]``."""
    if weights.data.ndim != 1 or len(rows) != weights.data.size:
        raise DimensionError(f"mix: {len(rows)} rows vs weight vector {weights.shape}")
    shape = rows[0].shape
    for r in rows:
        if r.shape != shape:
            raise DimensionError(f"mix: row shapes differ ({r.shape} vs {shape})")
    stacked = np.stack([r.data for r in rows])
    out = np.tensordot(weights.data, stacked, axes=1)

    def bwd(g):
        grads = [weights.data[k] * g for k in range(len(rows))]
        gw = np.array([float(np.sum(g * stacked[k])) for k in range(len(rows))])
        return grads + [gw]

    return weights.tape.record(out, list(rows) + [weights], bwd)


def flatten_batch(x: Tensor) -> Tensor:
    """Reshape (B, ...) to (B, -1); backward restores the shape."""
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)
    return x.tape.record(out, [x], lambda g: [g.reshape(shape)])


def _im2col(x, k):
    # (B, C, H, W) -> (B, Ho, Wo, C*k*k) patch matrix, stride 1, valid padding
    b, c, h, w = x.shape
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h - k + 1, w - k + 1, c * k * k)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Direct 2-D convolution, stride 1, no padding.

    x: (B, C, H, W), w: (O, C, k, k) -> (B, O, H-k+1, W-k+1).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D operands, got {x.shape} and {w.shape}")
    b, c, h, wd = x.data.shape
    o, c2, kh, kw = w.data.shape
    if c != c2 or kh != kw:
        raise DimensionError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    k = kh
    if h < k or wd < k:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {k}")
    ho, wo = h - k + 1, wd - k + 1
    cols = _im2col(x.data, k)                       # (B, Ho, Wo, C*k*k)
    w2 = w.data.reshape(o, -1)                      # (O, C*k*k)
    out = (cols @ w2.T).transpose(0, 3, 1, 2)       # (B, O, Ho, Wo)
    xshape = x.data.shape

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1)                # (B, Ho, Wo, O)
        gw = np.tensordot(g2, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.data.shape)
        gcols = (g2 @ w2).reshape(b, ho, wo, c, k, k)
        gx = np.zeros(xshape)
        for di in range(k):
            for dj in range(k):
                gx[:, :, di:di + ho, dj:dj + wo] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return [gx, gw]

    return x.tape.record(out, [x, w], bwd)
