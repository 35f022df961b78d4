"""Differentiable operations on Tensors.

Every op validates shapes up front (ShapeError names the op and the
offending shapes), checks its output for non-finite entries, and records a
backward closure on the active tape. Python scalars and plain arrays are
wrapped as constant tensors and cast to the peer operand's dtype so that
float32 graphs stay float32.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import Tensor, finite_check_enabled, record


def _check_finite(op: str, data: np.ndarray) -> None:
    if finite_check_enabled() and not np.all(np.isfinite(data)):
        raise NumericError(f"op {op!r} produced non-finite values")


def _emit(op: str, out_data: np.ndarray, inputs: tuple, backward) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    record(out, inputs, backward)
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        at, bt = a, as_tensor(b, like=a)
    elif isinstance(b, Tensor):
        at, bt = as_tensor(a, like=b), b
    else:
        at, bt = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(at.data.shape, bt.data.shape)
    except ValueError:
        raise ShapeError(
            f"op {op!r}: shapes {at.data.shape} and {bt.data.shape} "
            f"do not broadcast") from None
    return at, bt


def add(a, b) -> Tensor:
    at, bt = _binary_operands("add", a, b)

    def backward(g):
        return (_unbroadcast(g, at.data.shape), _unbroadcast(g, bt.data.shape))

    return _emit("add", at.data + bt.data, (at, bt), backward)


def sub(a, b) -> Tensor:
    at, bt = _binary_operands("sub", a, b)

    def backward(g):
        return (_unbroadcast(g, at.data.shape), _unbroadcast(-g, bt.data.shape))

    return _emit("sub", at.data - bt.data, (at, bt), backward)


def neg(a) -> Tensor:
    at = as_tensor(a)

    def backward(g):
        return (-g,)

    return _emit("neg", -at.data, (at,), backward)


def mul(a, b) -> Tensor:
    at, bt = _binary_operands("mul", a, b)

    def backward(g):
        return (_unbroadcast(g * bt.data, at.data.shape),
                _unbroadcast(g * at.data, bt.data.shape))

    return _emit("mul", at.data * bt.data, (at, bt), backward)


def matmul(a, b) -> Tensor:
    at, bt = as_tensor(a), as_tensor(b)
    an, bn = at.data.ndim, bt.data.ndim
    if an not in (1, 2) or bn not in (1, 2):
        raise ShapeError(f"op 'matmul': only 1-D/2-D operands, got "
                         f"{at.data.shape} @ {bt.data.shape}")
    if at.data.shape[-1] != bt.data.shape[0]:
        raise ShapeError(f"op 'matmul': inner dimensions differ, "
                         f"{at.data.shape} @ {bt.data.shape}")
    A, B = at.data, bt.data

    def backward(g):
        if an == 2 and bn == 2:
            return (g @ B.T, A.T @ g)
        if an == 2 and bn == 1:
            return (np.outer(g, B), A.T @ g)
        if an == 1 and bn == 2:
            return (B @ g, np.outer(A, g))
        return (g * B, g * A)  # dot product, g scalar

    return _emit("matmul", A @ B, (at, bt), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("op 'concat': empty input list")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in ts], axis=axis),
                 tuple(ts), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack along a new axis; composed from reshape + concat."""
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:])
                for t in ts]
    return concat(expanded, axis=axis)


def reshape(a: Tensor, shape) -> Tensor:
    at = as_tensor(a)
    old_shape = at.data.shape

    def backward(g):
        return (g.reshape(old_shape),)

    return _emit("reshape", at.data.reshape(shape), (at,), backward)


def sigmoid(a) -> Tensor:
    at = as_tensor(a)
    # Evaluate on the side that keeps exp() below overflow.
    x = at.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _emit("sigmoid", out_data, (at,), backward)


def tanh(a) -> Tensor:
    at = as_tensor(a)
    out_data = np.tanh(at.data)

    def backward(g):
        return (g * (1.0 - out_data * out_data),)

    return _emit("tanh", out_data, (at,), backward)


def log(a) -> Tensor:
    at = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(at.data)

    def backward(g):
        return (g / at.data,)

    return _emit("log", out_data, (at,), backward)


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    at = as_tensor(a)
    x = at.data
    out_data = np.where(x > 0, x, alpha * x)

    def backward(g):
        return (g * np.where(x > 0, 1.0, alpha),)

    return _emit("leaky_relu", out_data, (at,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    at = as_tensor(a)
    x = at.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner),)

    return _emit("softmax", out_data, (at,), backward)


def masked_softmax(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over entries where ``mask`` is True; zeros elsewhere.

    Rows with no valid entry are a caller bug (neighborhoods always contain
    the self node) and raise.
    """
    at = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    if m.shape != at.data.shape:
        raise ShapeError(f"op 'masked_softmax': mask shape {m.shape} does not "
                         f"match input shape {at.data.shape}")
    if not m.any(axis=axis).all():
        raise ShapeError("op 'masked_softmax': a row has no valid entries")
    x = np.where(m, at.data, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner) * m,)

    return _emit("masked_softmax", out_data, (at,), backward)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    at = as_tensor(a)
    shape = at.data.shape

    def backward(g):
        return (_expand_reduced(g, shape, axis, keepdims).astype(at.data.dtype,
                                                                 copy=False),)

    return _emit("sum", at.data.sum(axis=axis, keepdims=keepdims), (at,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    at = as_tensor(a)
    shape = at.data.shape
    if axis is None:
        count = at.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def backward(g):
        expanded = _expand_reduced(g, shape, axis, keepdims)
        return ((expanded / count).astype(at.data.dtype, copy=False),)

    return _emit("mean", at.data.mean(axis=axis, keepdims=keepdims), (at,), backward)


def l2_norm_sq(a, axis=None) -> Tensor:
    """Sum of squares, over everything or along ``axis``."""
    at = as_tensor(a)
    shape = at.data.shape

    def backward(g):
        return ((2.0 * at.data * _expand_reduced(g, shape, axis, False)),)

    return _emit("l2_norm_sq", (at.data * at.data).sum(axis=axis), (at,), backward)


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    at = as_tensor(a)
    x = at.data
    out_data = np.clip(x, lo, hi)
    pass_mask = np.ones_like(x, dtype=bool)
    if lo is not None:
        pass_mask &= x > lo
    if hi is not None:
        pass_mask &= x < hi

    def backward(g):
        return (g * pass_mask,)

    return _emit("clamp", out_data, (at,), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    at, bt = _binary_operands("maximum", a, b)
    take_a = at.data >= bt.data

    def backward(g):
        return (_unbroadcast(g * take_a, at.data.shape),
                _unbroadcast(g * ~take_a, bt.data.shape))

    return _emit("maximum", np.where(take_a, at.data, bt.data), (at, bt), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand."""
    at, bt = _binary_operands("minimum", a, b)
    take_a = at.data <= bt.data

    def backward(g):
        return (_unbroadcast(g * take_a, at.data.shape),
                _unbroadcast(g * ~take_a, bt.data.shape))

    return _emit("minimum", np.where(take_a, at.data, bt.data), (at, bt), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Fancy-index the leading axis; repeated indices accumulate gradient."""
    at = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    n = at.data.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"op 'gather_rows': index out of range for leading "
                         f"dimension {n}")

    def backward(g):
        out = np.zeros_like(at.data)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", at.data[idx], (at,), backward)


def mode_contract(t: Tensor, v: Tensor, mode: int) -> Tensor:
    """Contract vector ``v`` against axis ``mode`` of tensor ``t``."""
    tt, vt = as_tensor(t), as_tensor(v)
    if vt.data.ndim != 1:
        raise ShapeError(f"op 'mode_contract': vector operand must be 1-D, "
                         f"got {vt.data.shape}")
    if not 0 <= mode < tt.data.ndim:
        raise ShapeError(f"op 'mode_contract': mode {mode} out of range for "
                         f"rank {tt.data.ndim}")
    if tt.data.shape[mode] != vt.data.shape[0]:
        raise ShapeError(f"op 'mode_contract': axis {mode} has size "
                         f"{tt.data.shape[mode]}, vector has {vt.data.shape[0]}")
    moved = np.moveaxis(tt.data, mode, 0)

    def backward(g):
        dt = np.moveaxis(np.multiply.outer(vt.data, g), 0, mode)
        dv = moved.reshape(moved.shape[0], -1) @ np.asarray(g).reshape(-1)
        return (dt, dv)

    out_data = np.tensordot(vt.data, tt.data, axes=(0, mode))
    return _emit("mode_contract", out_data, (tt, vt), backward)


def contract(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with einsum-based backward.

    Each operand's subscript letters must appear in the output or in the
    other operand (no internal sums like 'ii'), which holds for every
    contraction this package uses.
    """
    at, bt = as_tensor(a), as_tensor(b)
    try:
        lhs, out_sub = subscripts.replace(" ", "").split("->")
        a_sub, b_sub = lhs.split(",")
    except ValueError:
        raise ShapeError(f"op 'contract': bad subscripts {subscripts!r}") from None
    for sub, t in ((a_sub, at), (b_sub, bt)):
        if len(sub) != t.data.ndim:
            raise ShapeError(f"op 'contract': subscript {sub!r} does not match "
                             f"rank of shape {t.data.shape}")
        if len(set(sub)) != len(sub):
            raise ShapeError(f"op 'contract': repeated letter in {sub!r}")
    if not set(a_sub) <= set(out_sub) | set(b_sub) or \
       not set(b_sub) <= set(out_sub) | set(a_sub):
        raise ShapeError(f"op 'contract': {subscripts!r} sums a letter missing "
                         f"from the other operand")

    def backward(g):
        da = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, bt.data)
        db = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, at.data)
        return (da, db)

    try:
        out_data = np.einsum(subscripts, at.data, bt.data)
    except ValueError as exc:
        raise ShapeError(f"op 'contract': {exc}") from None
    return _emit("contract", out_data, (at, bt), backward)


def trilinear(w: Tensor, s: Tensor, r: Tensor, o: Tensor) -> Tensor:
    """Batched three-mode product: out[b] = sum_ijk w[ijk] s[bi] r[bj] o[bk]."""
    wt, st, rt, ot = as_tensor(w), as_tensor(s), as_tensor(r), as_tensor(o)
    if wt.data.ndim != 3 or st.data.ndim != 2 or rt.data.ndim != 2 \
            or ot.data.ndim != 2:
        raise ShapeError("op 'trilinear': expects core [i,j,k] and batched "
                         "vectors [b,i], [b,j], [b,k]")
    if (st.data.shape[1], rt.data.shape[1], ot.data.shape[1]) != wt.data.shape:
        raise ShapeError(f"op 'trilinear': core {wt.data.shape} does not match "
                         f"vectors {st.data.shape}, {rt.data.shape}, "
                         f"{ot.data.shape}")
    W, S, R, O = wt.data, st.data, rt.data, ot.data

    def backward(g):
        dw = np.einsum("b,bi,bj,bk->ijk", g, S, R, O)
        ds = np.einsum("b,ijk,bj,bk->bi", g, W, R, O)
        dr = np.einsum("b,ijk,bi,bk->bj", g, W, S, O)
        do = np.einsum("b,ijk,bi,bj->bk", g, W, S, R)
        return (dw, ds, dr, do)

    out_data = np.einsum("ijk,bi,bj,bk->b", W, S, R, O)
    return _emit("trilinear", out_data, (wt, st, rt, ot), backward)
