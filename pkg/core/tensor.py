"""
Dense tensors with tape-based reverse-mode differentiation.

Every op checks extents explicitly; the only implicit broadcast is over a leading
batch dimension. Reductions go through numpy in a fixed order, so identical inputs
give bit-identical values and gradients.
"""

import itertools
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

from utils.errors import ContractError, DimensionError, NumericError

_ids = itertools.count()
_local = threading.local()
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tensor:
    """Immutable n-dimensional array that can take part in a Tape."""

    __slots__ = ("data", "requires_grad", "name", "_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        arr = np.asarray(arr, dtype=dtype)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._id = next(_ids)
        self._tape = None

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def sub_(self, delta: np.ndarray) -> None:
        """In-place update reserved for optimizer steps."""
        np.subtract(self.data, delta, out=self.data)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{req}{nm})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported; divide by a scalar")
        return div_scalar(self, other)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TapeEntry:
    op: str
    output: int
    inputs: Tuple[int, ...]
    needs_grad: Tuple[bool, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradMap(Mapping):
    """Parameter name -> gradient array, with the global L2 norm of the concatenation."""

    def __init__(self, grads: Mapping[str, np.ndarray]):
        self._grads: Dict[str, np.ndarray] = {k: grads[k] for k in sorted(grads)}
        self.norm = global_norm(self._grads)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._grads[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def scaled(self, factor: float) -> "GradMap":
        return GradMap({k: g * factor for k, g in self._grads.items()})

    def flatten(self) -> np.ndarray:
        if not self._grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self._grads.values()])

    def __repr__(self) -> str:
        return f"GradMap({len(self)} params, norm={self.norm:.6g})"


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.vdot(g, g))
    return math.sqrt(total)


class Tape:
    """Ordered record of executed ops; entries only ever reference earlier nodes."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._produced = set()
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def _record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        for t in inputs:
            if t.requires_grad and t._id not in self._produced:
                self._leaves[t._id] = t
        self.entries.append(TapeEntry(
            op=op,
            output=out._id,
            inputs=tuple(t._id for t in inputs),
            needs_grad=tuple(t.requires_grad for t in inputs),
            backward=backward,
        ))
        self._produced.add(out._id)
        out._tape = self

    def backward(self, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> GradMap:
        """
        Reverse sweep from a scalar loss. Returns gradients for every requires_grad
        parameter in `params` (default: the named leaves seen on this tape); parameters
        the loss does not reach get zeros, frozen ones are left out.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("backward() needs a scalar loss tensor")
        if loss._id not in self._produced:
            raise ContractError("loss was not produced on this tape")

        grads: Dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue
            for node, need, ig in zip(entry.inputs, entry.needs_grad, entry.backward(g)):
                if not need or ig is None:
                    continue
                prev = grads.get(node)
                grads[node] = ig if prev is None else prev + ig

        if params is None:
            params = {t.name: t for t in self._leaves.values() if t.name}
        result = {}
        for name, p in params.items():
            if not p.requires_grad:
                continue
            g = grads.get(p._id)
            if g is None:
                result[name] = np.zeros_like(p.data)
            else:
                result[name] = np.array(g, dtype=p.data.dtype).reshape(p.shape)
        return GradMap(result)


def backward(loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> GradMap:
    """Backward over the tape that produced `loss`."""
    tape = getattr(loss, "_tape", None)
    if tape is None:
        raise ContractError("loss was not produced on an active tape")
    return tape.backward(loss, params)


def per_sample_grads(
    loss_fn: Callable[[object], Tensor],
    batch: Sequence,
    params: Optional[Mapping[str, Tensor]] = None,
    workers: int = 1,
) -> List[GradMap]:
    """
    One independent tape and backward pass per sample. Workers only change where
    the passes run; results come back in batch order.
    """
    if len(batch) == 0:
        raise ContractError("per_sample_grads needs a non-empty batch")

    def one(sample) -> GradMap:
        with Tape() as tape:
            loss = loss_fn(sample)
            return tape.backward(loss, params)

    if workers <= 1 or len(batch) == 1:
        return [one(sample) for sample in batch]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, batch))


# ---------------------------------------------------------------------------
# Op plumbing
# ---------------------------------------------------------------------------

def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(op, out, inputs, backward)
    return out


def _is_scalar(value) -> bool:
    return isinstance(value, (int, float, np.floating, np.integer)) and not isinstance(value, bool)


def _pairing(op: str, a: Tensor, b: Tensor) -> Optional[str]:
    """Equal shapes, or one operand missing only the leading batch dimension."""
    if a.shape == b.shape:
        return None
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return "b"
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return "a"
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(g: np.ndarray, which: Optional[str], side: str) -> np.ndarray:
    return g.sum(axis=0) if which == side else g


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return _emit("add_scalar", a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    which = _pairing("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, which, "a"), _reduce_to(g, which, "b")))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return _emit("sub_scalar", a.data - b, (a,), lambda g: (g,))
    b = as_tensor(b)
    which = _pairing("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, which, "a"), -_reduce_to(g, which, "b")))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scale(a, b)
    b = as_tensor(b)
    which = _pairing("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, which, "a"), _reduce_to(g * ad, which, "b")))


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


def div_scalar(x: Tensor, divisor: float) -> Tensor:
    x = as_tensor(x)
    return _emit("div_scalar", x.data / divisor, (x,), lambda g: (g / divisor,))


def neg(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit("pow", xd ** exponent, (x,),
                 lambda g: (g * exponent * xd ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = expit(xd)
    return _emit("silu", xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
    return tuple(sorted(ax % ndim for ax in axes))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def grad(g):
        return (np.broadcast_to(np.reshape(g, kept), shape),)

    return _emit("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), grad)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def grad(g):
        return (np.broadcast_to(np.reshape(g, kept) / count, shape),)

    return _emit("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), grad)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {original} to {tuple(shape)}") from e
    return _emit("reshape", data, (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes to `shape` (same rank required)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise DimensionError(f"cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a == 1 and b != 1)
    return _emit("expand", np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (g.sum(axis=axes, keepdims=True),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise DimensionError(f"concat: {t.shape} does not match {ref.shape} off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a 2-d table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("take_rows needs a 2-d table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"row ids out of range [0, {table.shape[0]})")

    def grad(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("take_rows", table.data[ids], (table,), grad)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("upsample_nearest needs a 4-d (B, C, H, W) tensor")
    b, c, h, w = x.shape

    def grad(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit("upsample", x.data.repeat(factor, axis=2).repeat(factor, axis=3), (x,), grad)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n), (B,m,k)@(B,k,n), or (B,m,k)@(k,n) with b shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    shared = False
    if a.ndim == 2 and b.ndim == 2:
        pass
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 2:
        shared = True
    else:
        raise DimensionError(f"matmul does not support {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad(g):
        da = g @ np.swapaxes(bd, -1, -2) if need_a else None
        if not need_b:
            db = None
        elif shared:
            db = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
        else:
            db = np.swapaxes(ad, -1, -2) @ g
        return da, db

    return _emit("matmul", ad @ bd, (a, b), grad)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,C,H,W) with (O,C,kh,kw); output extent floor((h+2p-kh)/s)+1."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and kernel, got {x.shape}, {kernel.shape}")
    bsz, channels, height, width = x.shape
    out_ch, k_ch, kh, kw = kernel.shape
    if k_ch != channels:
        raise DimensionError(f"conv2d channel mismatch: input {channels}, kernel {k_ch}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d needs stride >= 1 and padding >= 0")
    hp, wp = height + 2 * padding, width + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (out_ch,):
            raise DimensionError(f"conv2d bias must have shape ({out_ch},)")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    kd = kernel.data
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def grad(g):
        dk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])) if need_k else None
        dx = None
        if need_x:
            dxp = np.zeros(xp.shape, dtype=np.result_type(g, kd))
            h_end = (out_h - 1) * stride + 1
            w_end = (out_w - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, kd[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i:i + h_end:stride, j:j + w_end:stride] += contrib.transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + height, padding:padding + width]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", out, inputs, grad)


# ---------------------------------------------------------------------------
# Normalization and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {x.ndim}-d tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", y, (x,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (B, C, ...) over channel groups; no affine part."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[1] % groups:
        raise DimensionError(f"group_norm: {x.shape[1] if x.ndim > 1 else '?'} channels "
                             f"not divisible into {groups} groups")
    shape = x.shape
    xr = x.data.reshape(shape[0], groups, -1)
    mu = xr.mean(axis=-1, keepdims=True)
    centered = xr - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def grad(g):
        gr = g.reshape(xhat.shape)
        dx = inv * (gr - gr.mean(axis=-1, keepdims=True)
                    - xhat * (gr * xhat).mean(axis=-1, keepdims=True))
        return (dx.reshape(shape),)

    return _emit("group_norm", xhat.reshape(shape), (x,), grad)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy needs (B, K) logits and (B,) labels")
    bsz = logits.shape[0]
    lse = logsumexp(logits.data, axis=1)
    picked = logits.data[np.arange(bsz), labels]
    probs = np.exp(logits.data - lse[:, None])

    def grad(g):
        d = probs.copy()
        d[np.arange(bsz), labels] -= 1.0
        return (d * (g / bsz),)

    return _emit("cross_entropy", np.asarray((lse - picked).mean()), (logits,), grad)
