"""Dense tensors with reverse-mode automatic differentiation.

Every numeric primitive the segmentation network needs lives here:
3D (dilated) convolution, transposed convolution, max pooling, group
normalization, dropout, activations, einsum-style contraction and the
elementwise/reduction plumbing. Tensors carry float32 data for training
and inference; a float64 path exists solely for finite-difference
gradient checking (`grad_check`).

The recorded graph is the tape: each op stores its parents and a rule
that maps the output gradient to parent gradients. `backward` replays
the rules in reverse topological order.
"""

from __future__ import annotations

from contextlib import contextmanager
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DropoutMode",
    "no_grad",
    "set_finite_checks",
    "add",
    "mul",
    "concat",
    "relu",
    "sigmoid",
    "softmax",
    "dropout",
    "conv3d",
    "conv_transpose3d",
    "maxpool3d",
    "group_norm",
    "global_avg_pool",
    "contract",
    "backward",
    "grad_check",
    "derive_rng",
    "derive_seed",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_finite_checks = True

# When a selection tape is active, relu/maxpool/clamp record their branch
# choices on first use and replay them on later passes, so repeated
# evaluations probe the pinned piecewise branch instead of hopping across
# kinks (used by grad_check).
_selection_tape: list | None = None
_selection_cursor = 0


@contextmanager
def _selection_scope(tape: list):
    global _selection_tape, _selection_cursor
    prev_tape, prev_cursor = _selection_tape, _selection_cursor
    _selection_tape, _selection_cursor = tape, 0
    try:
        yield
    finally:
        _selection_tape, _selection_cursor = prev_tape, prev_cursor


def _pin_selection(compute):
    """Record `compute()` on the active tape the first time, replay after."""
    global _selection_cursor
    if _selection_tape is None:
        return compute()
    if _selection_cursor < len(_selection_tape):
        value = _selection_tape[_selection_cursor]
    else:
        value = compute()
        _selection_tape.append(value)
    _selection_cursor += 1
    return value


class DropoutMode(Enum):
    """Dropout behaviour: TRAIN and MC_ACTIVE sample masks, OFF is identity."""

    TRAIN = "train"
    MC_ACTIVE = "mc_active"
    OFF = "off"


@contextmanager
def no_grad():
    """Disable graph recording inside the context (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf screening; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in _FLOAT_DTYPES:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Canonical network layout is (B, C, D, H, W), row-major, W fastest.
    Treat tensors as immutable once created; parameter updates mutate
    `.data` in place from exactly one thread (the optimizer).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], Sequence[tuple["Tensor", np.ndarray]]] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in the given precision (graph is not carried over)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def __sub__(self, other):
        return add(self, -_coerce(other, self.dtype))

    def __rsub__(self, other):
        return add(-self, _coerce(other, self.dtype))

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}; cast explicitly")


def _make(data: np.ndarray, parents: Iterable[Tensor], rule, op: str) -> Tensor:
    """Wrap an op result, recording the backward rule when grads are live."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad or p._backward_rule is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_rule = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops (broadcasting over size-1 axes)
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data + b.data

    def rule(g):
        ga = _unbroadcast(g, a.shape)
        gb = _unbroadcast(g, b.shape)
        if gb is ga:
            gb = gb.copy()  # two parents must never share one buffer
        return [(a, ga), (b, gb)]

    return _make(data, (a, b), rule, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data * b.data

    def rule(g):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    return _make(data, (a, b), rule, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data / b.data

    def rule(g):
        return [
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ]

    return _make(data, (a, b), rule, "div")


def tlog(x: Tensor) -> Tensor:
    data = np.log(x.data)
    return _make(data, (x,), lambda g: [(x, g / x.data)], "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    inside = _pin_selection(lambda: ((x.data >= lo) & (x.data <= hi)).astype(x.dtype))
    data = inside * x.data + (1.0 - inside) * np.clip(x.data, lo, hi)
    return _make(data, (x,), lambda g: [(x, g * inside)], "clamp")


def tsum(x: Tensor, axis=None) -> Tensor:
    data = np.sum(x.data, axis=axis)
    shape = x.shape

    def rule(g):
        if axis is None:
            return [(x, np.broadcast_to(g, shape).astype(x.dtype))]
        axes = axis if isinstance(axis, tuple) else (axis,)
        kept = list(shape)
        for ax in axes:
            kept[ax % len(shape)] = 1
        return [(x, np.broadcast_to(g.reshape(kept), shape).astype(x.dtype))]

    return _make(data, (x,), rule, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax % x.ndim]
    s = tsum(x, axis)
    return mul(s, Tensor(np.asarray(1.0 / count, dtype=x.dtype)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)
    orig = x.shape
    return _make(data, (x,), lambda g: [(x, g.reshape(orig))], "reshape")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _check_same_dtype(*tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        pieces = np.split(g, splits, axis=axis)
        return list(zip(tensors, pieces))

    return _make(data, tensors, rule, "concat")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = _pin_selection(lambda: (x.data > 0).astype(x.dtype))
    data = x.data * mask
    return _make(data, (x,), lambda g: [(x, g * mask)], "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    data = np.empty_like(xd)
    pos = xd >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    data[~pos] = ex / (1.0 + ex)

    def rule(g):
        return [(x, g * data * (1.0 - data))]

    return _make(data, (x,), rule, "sigmoid")


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for ndim {x.ndim}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    data = ex / np.sum(ex, axis=axis, keepdims=True)

    def rule(g):
        inner = np.sum(g * data, axis=axis, keepdims=True)
        return [(x, data * (g - inner))]

    return _make(data, (x,), rule, "softmax")


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, mode: DropoutMode, rng) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at sample time.

    TRAIN and MC_ACTIVE both sample; OFF returns the input unchanged.
    `rng` is an integer seed or a numpy Generator; a given seed always
    yields the same mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if mode is DropoutMode.OFF or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("sampling dropout needs a seed or Generator")
    gen = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    keep = gen.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    data = x.data * mask
    return _make(data, (x,), lambda g: [(x, g * mask)], "dropout")


# ---------------------------------------------------------------------------
# 3D convolution family
# ---------------------------------------------------------------------------


def _conv_out_extent(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, out_sp: tuple[int, int, int]) -> np.ndarray:
    """Materialize sliding k*k*k patches of a padded (B,C,*,*,*) volume.

    Returns (B, C*k^3, Do*Ho*Wo); memory cost is C*k^3 copies of the output
    grid, which is fine at desk scale.
    """
    B, C = xp.shape[:2]
    Do, Ho, Wo = out_sp
    sB, sC, sD, sH, sW = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (B, C, k, k, k, Do, Ho, Wo),
        (sB, sC, sD * dilation, sH * dilation, sW * dilation, sD * stride, sH * stride, sW * stride),
    )
    return np.ascontiguousarray(view).reshape(B, C * k ** 3, Do * Ho * Wo)


def _conv3d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int, dilation: int):
    """Forward cross-correlation on raw arrays; returns (out, padded_x)."""
    B, Cin, D, H, W = x.shape
    Cout, _, k, _, _ = w.shape
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    else:
        xp = x
    out_sp = tuple(_conv_out_extent(n, k, stride, padding, dilation) for n in (D, H, W))
    if min(out_sp) < 1:
        raise ValueError(f"kernel {k} (dilation {dilation}) larger than padded input {(D, H, W)} + 2*{padding}")
    if k == 1:
        xs = xp[:, :, ::stride, ::stride, ::stride] if stride > 1 else xp
        out = np.matmul(w.reshape(Cout, Cin), xs.reshape(B, Cin, -1))
    else:
        col = _im2col(xp, k, stride, dilation, out_sp)
        out = np.matmul(w.reshape(Cout, -1), col)
    return out.reshape(B, Cout, *out_sp), xp


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """3D cross-correlation with zero padding, stride, and dilation.

    `x` is (B, Cin, D, H, W), `weight` is (Cout, Cin, k, k, k) with
    k in {1, 3, 5, 7}. Output extent per axis is
    floor((n + 2*padding - dilation*(k-1) - 1) / stride) + 1.
    Gradients are recorded for x, weight and bias.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D tensors, got {x.shape} and {weight.shape}")
    Cout, Cin, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise ValueError(f"non-cubic kernel {weight.shape[2:]}")
    if k not in (1, 3, 5, 7):
        raise ValueError(f"kernel size {k} not in (1, 3, 5, 7)")
    if x.shape[1] != Cin:
        raise ValueError(f"input channels {x.shape[1]} != weight channels {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError(f"bias shape {bias.shape} != ({Cout},)")
    _check_same_dtype(*([x, weight] + ([bias] if bias is not None else [])))

    out_data, xp = _conv3d_raw(x.data, weight.data, stride, padding, dilation)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, Cout, 1, 1, 1)

    B = x.shape[0]
    in_sp = x.shape[2:]
    out_sp = out_data.shape[2:]

    def rule(g):
        gm = g.reshape(B, Cout, -1)
        # weight gradient: one GEMM against the recomputed patch matrix
        if k == 1:
            xs = xp[:, :, ::stride, ::stride, ::stride] if stride > 1 else xp
            col = xs.reshape(B, Cin, -1)
        else:
            col = _im2col(xp, k, stride, dilation, out_sp)
        gw = np.matmul(gm, col.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)

        # input gradient: for stride 1 it is itself a dilated correlation with
        # the spatially flipped, channel-swapped kernel; otherwise scatter
        # per kernel offset
        back_pad = dilation * (k - 1) - padding
        if stride == 1 and back_pad >= 0:
            wf = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx, _ = _conv3d_raw(g, wf, 1, back_pad, dilation)
        else:
            gxp = np.zeros_like(xp)
            wm = weight.data.reshape(Cout, Cin, k ** 3)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        idx = (i * k + j) * k + l
                        contrib = np.matmul(wm[:, :, idx].T, gm).reshape(B, Cin, *out_sp)
                        gxp[
                            :,
                            :,
                            i * dilation : i * dilation + stride * (out_sp[0] - 1) + 1 : stride,
                            j * dilation : j * dilation + stride * (out_sp[1] - 1) + 1 : stride,
                            l * dilation : l * dilation + stride * (out_sp[2] - 1) + 1 : stride,
                        ] += contrib
            gx = gxp[
                :, :, padding : padding + in_sp[0], padding : padding + in_sp[1], padding : padding + in_sp[2]
            ]
        pairs = [(x, np.ascontiguousarray(gx)), (weight, gw)]
        if bias is not None:
            pairs.append((bias, gm.sum(axis=(0, 2))))
        return pairs

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, rule, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2x2 kernel, no padding.

    Each spatial extent exactly doubles; the output tiles do not overlap,
    so the forward pass is a pure scatter of weighted input voxels.
    `weight` is (Cin, Cout, 2, 2, 2).
    """
    if x.ndim != 5 or weight.ndim != 5 or weight.shape[2:] != (2, 2, 2):
        raise ValueError(f"conv_transpose3d expects (Cin,Cout,2,2,2) weight, got {weight.shape}")
    B, Cin, D, H, W = x.shape
    if min(D, H, W) < 1:
        raise ValueError(f"non-positive spatial extents {(D, H, W)}")
    if Cin != weight.shape[0]:
        raise ValueError(f"input channels {Cin} != weight channels {weight.shape[0]}")
    Cout = weight.shape[1]
    _check_same_dtype(*([x, weight] + ([bias] if bias is not None else [])))

    xm = x.data.reshape(B, Cin, -1)
    out = np.empty((B, Cout, 2 * D, 2 * H, 2 * W), dtype=x.dtype)
    for i in range(2):
        for j in range(2):
            for l in range(2):
                piece = np.matmul(weight.data[:, :, i, j, l].T, xm).reshape(B, Cout, D, H, W)
                out[:, :, i::2, j::2, l::2] = piece
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1, 1)

    def rule(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for i in range(2):
            for j in range(2):
                for l in range(2):
                    gs = np.ascontiguousarray(g[:, :, i::2, j::2, l::2]).reshape(B, Cout, -1)
                    gx += np.matmul(weight.data[:, :, i, j, l], gs).reshape(x.shape)
                    gw[:, :, i, j, l] = np.matmul(xm, gs.transpose(0, 2, 1)).sum(axis=0)
        pairs = [(x, gx), (weight, gw)]
        if bias is not None:
            pairs.append((bias, g.sum(axis=(0, 2, 3, 4))))
        return pairs

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, rule, "conv_transpose3d")


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2; spatial extents must be even.

    Backward routes the gradient to the first-in-scan-order argmax voxel
    of each block.
    """
    B, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ValueError(f"maxpool3d needs even spatial extents, got {(D, H, W)}")
    blocks = (
        x.data.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(B, C, D // 2, H // 2, W // 2, 8)
    )
    arg = _pin_selection(lambda: np.argmax(blocks, axis=-1))
    data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        onehot = (np.arange(8, dtype=np.int64) == arg[..., None]).astype(x.dtype)
        gb = onehot * g[..., None]
        gx = (
            gb.reshape(B, C, D // 2, H // 2, W // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(B, C, D, H, W)
        )
        return [(x, np.ascontiguousarray(gx))]

    return _make(data, (x,), rule, "maxpool3d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel-group) over its channels and voxels.

    y = gamma * (x - mean) / sqrt(var + eps) + beta, with the statistics
    taken over C/groups channels and the full spatial extent.
    """
    B, C = x.shape[:2]
    if C % groups != 0:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta must be ({C},), got {gamma.shape}, {beta.shape}")
    _check_same_dtype(x, gamma, beta)

    spatial = x.shape[2:]
    grouped = x.data.reshape(B, groups, -1)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = ((grouped - mean) * inv_std).reshape(x.shape)
    gshape = (1, C) + (1,) * len(spatial)
    data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def rule(g):
        sum_axes = (0,) + tuple(range(2, x.ndim))
        gbeta = g.sum(axis=sum_axes)
        ggamma = (g * xhat).sum(axis=sum_axes)
        gxhat = (g * gamma.data.reshape(gshape)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        m1 = gxhat.mean(axis=2, keepdims=True)
        m2 = (gxhat * xh).mean(axis=2, keepdims=True)
        gx = (inv_std * (gxhat - m1 - xh * m2)).reshape(x.shape)
        return [(x, gx), (gamma, ggamma), (beta, gbeta)]

    return _make(data, (x, gamma, beta), rule, "group_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over D, H, W per (batch, channel) -> (B, C, 1, 1, 1)."""
    B, C = x.shape[:2]
    n = int(np.prod(x.shape[2:]))
    if n == 0:
        raise ValueError("global_avg_pool on empty spatial extents")
    data = x.data.mean(axis=(2, 3, 4), keepdims=True)

    def rule(g):
        return [(x, np.broadcast_to(g / n, x.shape).astype(x.dtype))]

    return _make(data, (x,), rule, "global_avg_pool")


# ---------------------------------------------------------------------------
# generalized contraction (einsum over two operands)
# ---------------------------------------------------------------------------


def _parse_contract_spec(spec: str) -> tuple[str, str, str]:
    try:
        ins, out = spec.replace(" ", "").split("->")
        a_spec, b_spec = ins.split(",")
    except ValueError as exc:
        raise ValueError(f"bad contraction spec {spec!r}; expected 'ab,bc->ac' form") from exc
    for s in (a_spec, b_spec):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated axis label within one operand in {spec!r}")
    for ch in a_spec:
        if ch not in out and ch not in b_spec:
            raise ValueError(f"axis {ch!r} of first operand appears nowhere else in {spec!r}")
    for ch in b_spec:
        if ch not in out and ch not in a_spec:
            raise ValueError(f"axis {ch!r} of second operand appears nowhere else in {spec!r}")
    for ch in out:
        if ch not in a_spec and ch not in b_spec:
            raise ValueError(f"output axis {ch!r} not present in inputs in {spec!r}")
    return a_spec, b_spec, out


def contract(a: Tensor, b: Tensor, spec: str) -> Tensor:
    """Batched generalized product of two tensors, einsum-style.

    `spec` names the axes, e.g. "bin,bjn->bij" contracts over n. Shared
    labels must have equal extents. Covers both attention patterns
    (gram matrix and attention-times-values) plus ordinary matmul.
    """
    a_spec, b_spec, out_spec = _parse_contract_spec(spec)
    if len(a_spec) != a.ndim or len(b_spec) != b.ndim:
        raise ValueError(f"spec {spec!r} does not match operand ranks {a.ndim}, {b.ndim}")
    extents: dict[str, int] = {}
    for s, t in ((a_spec, a), (b_spec, b)):
        for ch, n in zip(s, t.shape):
            if extents.setdefault(ch, n) != n:
                raise ValueError(f"axis {ch!r} extent mismatch: {extents[ch]} vs {n}")
    _check_same_dtype(a, b)
    data = np.einsum(spec, a.data, b.data, optimize=True)

    def rule(g):
        ga = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, a.data, optimize=True)
        return [(a, ga), (b, gb)]

    return _make(data, (a, b), rule, "contract")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) to every requires_grad leaf on the tape.

    `loss` must be scalar. Leaf `.grad` buffers accumulate across calls;
    use `zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward_rule is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward_rule is None:
            continue
        for parent, pg in node._backward_rule(g):
            if not (parent.requires_grad or parent._backward_rule is not None):
                continue
            if pg.shape != parent.shape:
                raise AssertionError(f"gradient shape {pg.shape} != parent shape {parent.shape}")
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.copy() if pg.base is not None else pg
            else:
                acc += pg


# ---------------------------------------------------------------------------
# gradient checking (float64 only)
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor] | Tensor,
    h: float = 1e-5,
    max_coords: int = 1000,
    rng_seed: int = 0,
    atol: float = 1e-6,
    stencil_rtol: float = 2e-6,
) -> float:
    """Max relative error between backward gradients and central differences.

    `f` recomputes a scalar loss from `leaves` on every call; leaves must be
    float64 with requires_grad set. Tensors above `max_coords` elements are
    probed on a random coordinate subset. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8).

    The probes measure the derivative of the branch-pinned function: the
    ReLU masks, pooling argmaxes, and clamp branches observed on the
    analytic pass are replayed on every probe, because those selections
    are exactly what the backward rules differentiate; without pinning, a
    kink inside the probe interval yields a branch-average slope no
    gradient convention matches. Each coordinate is probed with two
    stencils (h and h/2). Coordinates where both readings sit below `atol`
    are under the round-off noise floor (eps * |loss| / (2h)) and count as
    agreeing. Stencils that disagree beyond `stencil_rtol` mark the
    coordinate unmeasurable at this step size and skip it; agreeing
    stencils are Richardson-extrapolated before comparison. A wrong
    backward rule disagrees at every step size and is always flagged.
    """
    if isinstance(leaves, Tensor):
        leaves = [leaves]
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise TypeError("grad_check requires float64 leaves")
        if not leaf.requires_grad:
            raise ValueError("grad_check leaves must have requires_grad=True")

    selections: list = []

    def pinned():
        with _selection_scope(selections):
            return f()

    for leaf in leaves:
        leaf.zero_grad()
    out = pinned()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]

            def central(step):
                flat[idx] = orig + step
                fp = pinned().item()
                flat[idx] = orig - step
                fm = pinned().item()
                flat[idx] = orig
                return (fp - fm) / (2.0 * step)

            num_h = central(h)
            num_half = central(h / 2.0)
            a = float(ana.reshape(-1)[idx])
            if max(abs(a), abs(num_half)) < atol:
                continue
            if abs(num_h - num_half) > stencil_rtol * max(abs(num_h), abs(num_half), 1e-8):
                continue
            # Richardson extrapolation of two agreeing stencils cancels the
            # O(h^2) truncation term
            numeric = (4.0 * num_half - num_h) / 3.0
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# seeding helpers
# ---------------------------------------------------------------------------


def derive_seed(root: int, *path: int) -> int:
    """Stable child seed from a root seed and an integer path."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF] + [int(p) & 0xFFFFFFFF for p in path])
    return int(ss.generate_state(1)[0])


def derive_rng(root: int, *path: int) -> np.random.Generator:
    """Generator seeded from (root, *path); same arguments, same stream."""
    return np.random.default_rng(derive_seed(root, *path))
