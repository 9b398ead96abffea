"""Dense tensors with tape-based reverse-mode gradients.

Storage and compute are 32-bit; tests re-derive expectations with 64-bit
oracles via :func:`using_dtype`. Broadcasting is deliberately restricted to
scalar-with-tensor and row-vector-over-matrix; anything else raises
:class:`ShapeError`. Every public op checks its output for NaN/Inf and raises
:class:`NumericError` immediately instead of letting bad values propagate.

A :class:`GradTape` is confined to one thread. Ops record a backward rule on
the innermost active tape whenever an input requires grad; with no active
tape they run as pure forward evaluation, which is safe to call concurrently
on shared frozen weights.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_state = threading.local()


def _tapes() -> list["GradTape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


class using_dtype:
    """Context manager switching the compute dtype (tests use float64 oracles)."""

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype)

    def __enter__(self):
        self._prev = current_dtype()
        _state.dtype = self._dtype
        return self

    def __exit__(self, *exc):
        _state.dtype = self._prev
        return False


class Tensor:
    """A dense array of reals with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=current_dtype())
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"zero-size extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of ops; replaying it in reverse accumulates gradients."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        tapes = _tapes()
        if tapes and tapes[-1] is self:
            tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._entries.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every requires_grad leaf behind ``loss``; clears the tape."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise NumericError("tape already consumed by a previous backward")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, rule in reversed(self._entries):
            if out.grad is None:
                continue
            grads = rule(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
        self._entries.clear()
        self._consumed = True


def active_tape() -> GradTape | None:
    tapes = _tapes()
    return tapes[-1] if tapes else None


def backward(loss: Tensor) -> None:
    """Run backward on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise NumericError("backward called with no active GradTape")
    tape.backward(loss)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")
    return arr


def _quiet():
    return np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore")


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    _finite(out_data, op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, rule)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=current_dtype()))


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    """Classify an allowed pairing: same shape, scalar operand, or row over matrix."""
    if a.shape == b.shape:
        return "same"
    if b.size == 1:
        return "scalar_b"
    if a.size == 1:
        return "scalar_a"
    if a.ndim == 2 and b.shape == (1, a.shape[1]):
        return "row_b"
    if b.ndim == 2 and a.shape == (1, b.shape[1]):
        return "row_a"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    """Collapse an output gradient back onto a broadcast operand."""
    if kind == "same":
        return g
    if kind == f"scalar_{side}":
        return g.sum(keepdims=True).reshape(1, 1) if g.ndim >= 1 else g.sum()
    if kind == f"row_{side}":
        return g.sum(axis=0, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    with _quiet():
        out = a.data + b.data

    def rule(g, kind=kind):
        ga = _reduce_to(g, kind, "a") if a.requires_grad else None
        gb = _reduce_to(g, kind, "b") if b.requires_grad else None
        if ga is not None and ga.shape != a.data.shape:
            ga = ga.reshape(a.data.shape)
        if gb is not None and gb.shape != b.data.shape:
            gb = gb.reshape(b.data.shape)
        return ga, gb

    return _record("add", out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    with _quiet():
        out = a.data * b.data

    def rule(g, kind=kind):
        ga = _reduce_to(g * b.data, kind, "a") if a.requires_grad else None
        gb = _reduce_to(g * a.data, kind, "b") if b.requires_grad else None
        if ga is not None and ga.shape != a.data.shape:
            ga = ga.reshape(a.data.shape)
        if gb is not None and gb.shape != b.data.shape:
            gb = gb.reshape(b.data.shape)
        return ga, gb

    return _record("mul", out, (a, b), rule)


def neg(a) -> Tensor:
    return mul(a, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    with _quiet():
        out = a.data @ b.data

    def rule(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), rule)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def rule(g):
        return ((x.data > 0) * g,)

    return _record("relu", out, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def rule(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-np.abs(x.data)))
    out = np.where(x.data >= 0, out, 1.0 - out)

    def rule(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (x,), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", out, (x,), rule)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over positions where ``mask`` is nonzero; masked outputs are 0.

    Raises if any row is fully masked.
    """
    x = _as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise ShapeError(f"mask shape {m.shape} does not match input {x.shape}")
    if not m.any(axis=axis).all():
        raise ShapeError("masked_softmax: a row has no unmasked entries")
    neg_inf = np.where(m, x.data, -np.inf)
    shifted = neg_inf - neg_inf.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("masked_softmax", out, (x,), rule)


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0, variance 1 (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def rule(g):
        n = x.data.shape[-1]
        gy = g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True)
        return (gy * inv,)

    return _record("layernorm", y, (x,), rule)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.mean())

    def rule(g):
        return (np.full_like(x.data, float(g) / x.data.size),)

    return _record("mean", out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def rule(g):
        return (np.full_like(x.data, float(g)),)

    return _record("sum", out, (x,), rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of no tensors")
    ndim = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ndim:
            raise ShapeError(f"concat rank mismatch: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(pc if p.requires_grad else None for p, pc in zip(parts, pieces))

    return _record("concat", out, tuple(parts), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a matrix, got {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice [{start}:{stop}] outside {x.shape}")
    out = x.data[:, start:stop].copy()

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _record("slice_cols", out, (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def rule(g):
        return (g.reshape(x.data.shape),)

    return _record("reshape", out, (x,), rule)


def lookup(table: Tensor, ids) -> Tensor:
    """Gather rows ``table[ids]``; backward scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.data.ndim != 2:
        raise ShapeError(f"lookup table must be a matrix, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"lookup id out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("lookup", out, (table,), rule)


def repeat_rows(x: Tensor, times: int) -> Tensor:
    """Repeat each row ``times`` consecutive times: (B, D) -> (B*times, D)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"repeat_rows needs a matrix, got {x.shape}")
    out = np.repeat(x.data, times, axis=0)

    def rule(g):
        return (g.reshape(x.shape[0], times, x.shape[1]).sum(axis=1),)

    return _record("repeat_rows", out, (x,), rule)


def group_mean(x: Tensor, group: int) -> Tensor:
    """Mean over consecutive groups of rows: (B*group, D) -> (B, D)."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] % group != 0:
        raise ShapeError(f"group_mean: shape {x.shape} not divisible into groups of {group}")
    b = x.shape[0] // group
    out = x.data.reshape(b, group, x.shape[1]).mean(axis=1)

    def rule(g):
        return (np.repeat(g / group, group, axis=0),)

    return _record("group_mean", out, (x,), rule)


def attend(values: Tensor, weights: Tensor) -> Tensor:
    """Per-group weighted sum: values (B*n, D) with weights (B, n) -> (B, D)."""
    values, weights = _as_tensor(values), _as_tensor(weights)
    if values.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(f"attend needs matrices, got {values.shape}, {weights.shape}")
    b, n = weights.shape
    if values.shape[0] != b * n:
        raise ShapeError(f"attend: {values.shape[0]} value rows != {b}x{n} weights")
    v3 = values.data.reshape(b, n, values.shape[1])
    out = np.einsum("bn,bnd->bd", weights.data, v3)

    def rule(g):
        gv = (weights.data[:, :, None] * g[:, None, :]).reshape(values.data.shape) \
            if values.requires_grad else None
        gw = np.einsum("bnd,bd->bn", v3, g) if weights.requires_grad else None
        return gv, gw

    return _record("attend", out, (values, weights), rule)


_conv_idx_cache: dict[tuple, tuple] = {}


def _conv_indices(h: int, w: int, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Flattened gather indices for im2col with replicate edge padding."""
    key = (h, w, k, stride)
    cached = _conv_idx_cache.get(key)
    if cached is not None:
        return cached
    pad = (k - 1) // 2
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    ys = (np.arange(oh) * stride - pad)[:, None, None, None] + np.arange(k)[None, None, :, None]
    xs = (np.arange(ow) * stride - pad)[None, :, None, None] + np.arange(k)[None, None, None, :]
    yy = np.clip(np.broadcast_to(ys, (oh, ow, k, k)), 0, h - 1)
    xx = np.clip(np.broadcast_to(xs, (oh, ow, k, k)), 0, w - 1)
    flat = (yy * w + xx).reshape(-1).astype(np.int64)
    _conv_idx_cache[key] = (flat, oh, ow)
    return flat, oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """2-d convolution, kernel (k, k, Cin, Cout) over an (H, W, Cin) image.

    Edges are replicate-padded by (k-1)//2 so constant inputs stay constant
    (no zero-padding halo artifacts in the feature grid).
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be (H, W, C), got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv2d kernel must be (k, k, Cin, Cout), got {weight.shape}")
    k, _, cin, cout = weight.shape
    h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d channels: input has {c}, kernel expects {cin}")
    if bias.shape != (1, cout):
        raise ShapeError(f"conv2d bias must be (1, {cout}), got {bias.shape}")
    flat, oh, ow = _conv_indices(h, w, k, stride)

    x_flat = x.data.reshape(h * w, c)
    cols = x_flat[flat].reshape(oh * ow, k * k * c)
    w_mat = weight.data.reshape(k * k * c, cout)
    with _quiet():
        out = (cols @ w_mat + bias.data).reshape(oh, ow, cout)

    def rule(g):
        g2 = g.reshape(oh * ow, cout)
        gw = (cols.T @ g2).reshape(weight.data.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0, keepdims=True) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w_mat.T).reshape(oh * ow * k * k, c)
            gx_flat = np.zeros_like(x_flat)
            np.add.at(gx_flat, flat, dcols)
            gx = gx_flat.reshape(x.data.shape)
        return gx, gw, gb

    return _record("conv2d", out, (x, weight, bias), rule)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Row-wise softmax cross-entropy, summed with optional per-row weights.

    ``logits`` is (V,) or (B, V); ``targets`` a single id or B ids. With
    ``weights`` (B,), returns sum_b w_b * CE_b, so callers control masking
    and normalization.
    """
    logits = _as_tensor(logits)
    lg = logits.data if logits.data.ndim == 2 else logits.data.reshape(1, -1)
    ids = np.asarray(targets, dtype=np.int64).reshape(-1)
    if ids.shape[0] != lg.shape[0]:
        raise ShapeError(f"{ids.shape[0]} targets for {lg.shape[0]} logit rows")
    if ids.min() < 0 or ids.max() >= lg.shape[1]:
        raise ShapeError(f"target id out of range [0, {lg.shape[1]})")
    w = np.ones(lg.shape[0], dtype=lg.dtype) if weights is None \
        else np.asarray(weights, dtype=lg.dtype).reshape(-1)
    if w.shape[0] != lg.shape[0]:
        raise ShapeError(f"{w.shape[0]} weights for {lg.shape[0]} logit rows")

    m = lg.max(axis=1, keepdims=True)
    logz = m + np.log(np.exp(lg - m).sum(axis=1, keepdims=True))
    ce = logz[:, 0] - lg[np.arange(lg.shape[0]), ids]
    out = np.asarray((ce * w).sum())

    def rule(g):
        p = np.exp(lg - logz)
        p[np.arange(lg.shape[0]), ids] -= 1.0
        gl = p * (w * float(g))[:, None]
        return (gl.reshape(logits.data.shape),)

    return _record("cross_entropy", out, (logits,), rule)


def clip_gradients(params: Iterable[Tensor], clip_value: float) -> None:
    """Clamp every gradient coordinate to [-clip_value, +clip_value] in place."""
    for p in params:
        if p.grad is not None:
            np.clip(p.grad, -clip_value, clip_value, out=p.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(np.float32)


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative disagreement between backward() and central differences.

    Both sides run at 64-bit so the check verifies the backward rules rather
    than float32 rounding: the rules are dtype-generic, so a wrong rule fails
    identically at either precision. Relative error per coordinate is
    |a - fd| / max(1e-8, |a| + |fd|).
    """
    with using_dtype(np.float64):
        probe = Tensor(x.data.astype(np.float64), requires_grad=True)
        with GradTape() as tape:
            out = f(probe)
            if out.data.size != 1:
                raise ShapeError("check_gradients needs a scalar-valued function")
            tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.astype(np.float64)

    base = x.data.astype(np.float64)
    fd = np.zeros_like(base)
    flat = base.reshape(-1)
    fd_flat = fd.reshape(-1)
    with using_dtype(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(base)).item()
            flat[i] = orig - h
            lo = f(Tensor(base)).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom))
