"""Differentiable primitives over `Tensor`.

Each op computes its forward value with NumPy (hot kernels go through
`reattn.backend`) and records an adjoint rule on the active tape. Outputs
only participate in autodiff while a tape is active, so eval-mode forward
passes carry no bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from reattn import backend
from reattn.errors import DataError, DimensionError, NumericalError, ParameterError
from reattn.tape import Node, active_tape
from reattn.tensor import Tensor


def _coerce_pair(a, b):
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor._wrap(np.asarray(b, dtype=a.dtype), False)
    if isinstance(b, Tensor):
        return Tensor._wrap(np.asarray(a, dtype=b.dtype), False), b
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sums `g` down to `shape`, inverting NumPy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _emit(op, inputs, out_data, backward) -> Tensor:
    tape = active_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, req)
    if req:
        tape.record(Node(op, inputs, out, backward))
    return out


def _normalize_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim if -ndim <= a < ndim else a for a in axis)
    if any(a < 0 or a >= ndim for a in axes) or len(set(axes)) != len(axes):
        raise ParameterError(f"invalid axes {axis} for {ndim}-d tensor")
    return axes


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", (a, b), out, bw)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _emit("sub", (a, b), out, bw)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit("mul", (a, b), out, bw)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _emit("div", (a, b), out, bw)


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NumericalError("sqrt of negative values")
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out),)

    return _emit("sqrt", (a,), out, bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _emit("exp", (a,), out, bw)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericalError("log of non-positive values")
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _emit("log", (a,), out, bw)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias, with weight of shape [in, out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- shape manipulation -------------------------------------------------------


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ParameterError(f"axes {axes} is not a permutation for rank {a.ndim}")
    inverse = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _emit("transpose", (a,), out, bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")

    def bw(g):
        return (g.reshape(a.shape),)

    return _emit("reshape", (a,), out, bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}")

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _emit("broadcast_to", (a,), out, bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ParameterError("concat of zero tensors")
    axis = _normalize_axes(axis, tensors[0].ndim)[0]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        )
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        pieces, start = [], 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            pieces.append(g[tuple(sl)] if t.requires_grad else None)
            start += n
        return pieces

    return _emit("concat", tensors, out, bw)


def _validate_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice, type(Ellipsis))):
            raise ParameterError(f"slice_ supports basic indexing only, got {type(p).__name__}")
    return key


def slice_(a: Tensor, key) -> Tensor:
    key = _validate_basic_key(key)
    try:
        out = np.ascontiguousarray(a.data[key])
    except IndexError as e:
        raise DimensionError(f"index {key!r} invalid for shape {a.shape}: {e}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _emit("slice", (a,), out, bw)


# -- reductions ---------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if a.ndim else g
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", (a,), np.asarray(out), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if a.ndim else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if a.ndim else g
        return (np.broadcast_to(g / count, a.shape),)

    return _emit("mean", (a,), np.asarray(out), bw)


# -- nonlinearities -----------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    out = backend.gelu_forward(a.data)

    def bw(g):
        return (backend.gelu_backward(a.data, g),)

    return _emit("gelu", (a,), out, bw)


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Stable softmax along `axis`; the temperature divides the logits
    before exponentiation."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    ax = _normalize_axes(axis, x.ndim)[0]
    inv_tau = 1.0 / float(temperature)
    moved = ax != x.ndim - 1
    data = np.ascontiguousarray(np.moveaxis(x.data, ax, -1)) if moved else x.data
    y = backend.softmax_forward(data, inv_tau)
    out = np.ascontiguousarray(np.moveaxis(y, -1, ax)) if moved else y

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1)) if moved else g
        gx = backend.softmax_backward(y, gm, inv_tau)
        return (np.ascontiguousarray(np.moveaxis(gx, -1, ax)) if moved else gx,)

    return _emit("softmax", (x,), out, bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _normalize_axes(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=ax, keepdims=True),)

    return _emit("log_softmax", (x,), out, bw)


def dropout(x: Tensor, rate: float, mask: np.ndarray | None = None,
            rng: np.random.Generator | None = None, mode: str = "train") -> Tensor:
    """Inverted dropout. The mask comes from an explicit array or a seeded
    generator so stochastic passes are replayable."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"drop rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ParameterError(f"unknown dropout mode {mode!r}")
    if mask is None:
        if rng is None:
            raise ParameterError("training dropout needs an explicit mask or a generator")
        mask = (rng.random(x.shape) >= rate).astype(x.dtype)
    else:
        mask = np.asarray(mask, dtype=x.dtype)
        if mask.shape != x.shape:
            raise DimensionError(f"mask shape {mask.shape} != input shape {x.shape}")
    scale = 1.0 / (1.0 - rate)
    out = x.data * mask * scale

    def bw(g):
        return (g * mask * scale,)

    return _emit("dropout", (x,), out, bw)


# -- normalization ------------------------------------------------------------


@dataclass
class RunningStats:
    """EMA statistics a batch-kind normalize keeps for evaluation mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    batches_seen: int = 0

    @classmethod
    def for_shape(cls, stat_shape, dtype=np.float32, momentum=0.1) -> "RunningStats":
        return cls(np.zeros(stat_shape, dtype=dtype), np.ones(stat_shape, dtype=dtype),
                   momentum)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, count: int):
        unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * batch_mean
        self.var = (1.0 - m) * self.var + m * unbiased
        self.batches_seen += 1

    def state(self) -> dict:
        return {"mean": self.mean, "var": self.var}


def normalize(x: Tensor, kind: str, stats_axes, scale: Tensor, shift: Tensor,
              eps: float = 1e-5, running: RunningStats | None = None,
              mode: str = "train") -> Tensor:
    """Zero-mean unit-variance over `stats_axes`, then affine scale/shift.

    kind 'layer' always normalizes with the current statistics; kind 'batch'
    additionally maintains `running` statistics in train mode and uses them
    instead in eval mode.
    """
    if kind not in ("layer", "batch"):
        raise ParameterError(f"normalize kind must be 'layer' or 'batch', got {kind!r}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"unknown normalize mode {mode!r}")
    if eps <= 0:
        raise ParameterError(f"epsilon must be positive, got {eps}")
    axes = _normalize_axes(stats_axes, x.ndim)
    if not axes:
        raise ParameterError("normalize needs at least one statistics axis")

    use_running = kind == "batch" and mode == "eval"
    if use_running:
        if running is None:
            raise ParameterError("batch normalize in eval mode needs running statistics")
        mu, var = running.mean, running.var
    else:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
        if kind == "batch" and running is not None:
            count = int(np.prod([x.shape[i] for i in axes]))
            running.update(mu, var, count)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    try:
        out = xhat * scale.data + shift.data
    except ValueError:
        raise DimensionError(
            f"normalize affine shapes {scale.shape}/{shift.shape} do not broadcast to {x.shape}"
        )

    def bw(g):
        gs = _unbroadcast(g * xhat, scale.shape) if scale.requires_grad else None
        gb = _unbroadcast(g, shift.shape) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * scale.data
            if use_running:
                gx = dxhat * inv
            else:
                gx = inv * (dxhat
                            - dxhat.mean(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, gs, gb

    return _emit("normalize", (x, scale, shift), out, bw)


# -- lookups ------------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into `table` by an integer id array; gradients scatter-add."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DataError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"embedding id out of range [0, {table.shape[0]})")
    out = np.ascontiguousarray(table.data[ids])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("embedding", (table,), out, bw)


def gather_rows(x: Tensor, indices) -> Tensor:
    """out[n] = x[n, indices[n]] for a 2-d tensor; used by cross-entropy."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-d tensor, got {x.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DataError(f"gather indices must be integers, got {idx.dtype}")
    if idx.shape != (x.shape[0],):
        raise DimensionError(f"gather indices shape {idx.shape} != ({x.shape[0]},)")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise DataError(f"gather index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    out = np.ascontiguousarray(x.data[rows, idx])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _emit("gather_rows", (x,), out, bw)
