"""Dense float tensors and reverse-mode differentiation on a gradient tape.

Everything the network touches (activations, weights, gradients) is a
:class:`Tensor`: a contiguous row-major float array, float32 by default.
A float64 mode exists purely so finite-difference gradient verification can
run at tight tolerances; mixing the two dtypes in one operation is an error.

Differentiation is define-by-run. While a :class:`GradTape` is active (as a
context manager), every operation that touches a gradient-requiring tensor
appends one entry to the tape. Entries are therefore already in topological
order, and ``tape.backward(loss)`` replays them once, in reverse.
"""

from __future__ import annotations

import itertools
from collections.abc import Mapping
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_uids = itertools.count(1)
_ACTIVE_TAPE: ContextVar["GradTape | None"] = ContextVar("idcnet_tape", default=None)

SUPPORTED_KERNEL_SIZES = (1, 3, 5)


class Tensor:
    """Dense N-dimensional float array with value semantics.

    ``data`` is always C-contiguous float32 or float64. Constructing a
    tensor from non-finite data raises; operations keep values finite for
    finite inputs (stable softmax, epsilon-guarded normalizers).
    """

    __slots__ = ("data", "uid", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None:
            dtype = np.float32
        elif dtype not in (np.float32, np.float64):
            raise TypeError(f"tensors are float32 or float64, not {dtype}")
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if not np.isfinite(arr).all():
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.uid = next(_uids)
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for op outputs; skips the finiteness scan.
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.uid = next(_uids)
        t.requires_grad = False
        return t

    @classmethod
    def zeros(cls, shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def full(cls, shape, value, dtype=np.float32) -> "Tensor":
        return cls(np.full(shape, value, dtype=dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        t = Tensor._wrap(self.data.copy())
        t.requires_grad = self.requires_grad
        return t

    def astype(self, dtype) -> "Tensor":
        t = Tensor._wrap(self.data.astype(dtype))
        t.requires_grad = self.requires_grad
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # Small operator surface; the heavy ops are module functions below.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


@dataclass
class TapeEntry:
    """One executed differentiable operation.

    ``backward`` maps the output gradient to per-input gradients; it gets a
    boolean mask saying which inputs actually need one and may return None
    for the rest.
    """

    op: str
    in_uids: tuple[int, ...]
    out_uid: int
    backward: Callable[[np.ndarray, tuple[bool, ...]], tuple]


class Gradients(Mapping):
    """Gradient map keyed by node id; indexing by Tensor is accepted too."""

    def __init__(self, by_uid: dict[int, Tensor]):
        self._by_uid = by_uid

    @staticmethod
    def _key(key) -> int:
        return key.uid if isinstance(key, Tensor) else key

    def __getitem__(self, key) -> Tensor:
        return self._by_uid[self._key(key)]

    def __contains__(self, key) -> bool:
        return self._key(key) in self._by_uid

    def __iter__(self):
        return iter(self._by_uid)

    def __len__(self) -> int:
        return len(self._by_uid)


class GradTape:
    """Execution-ordered record of differentiable operations.

    The tape is rebuilt every forward pass. Recording happens only inside a
    ``with tape:`` block and only for operations whose inputs require (or
    carry) gradients, so inference runs tape-free at zero cost.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._grad_uids: set[int] = set()
        self._token = None

    def __enter__(self) -> "GradTape":
        if _ACTIVE_TAPE.get() is not None:
            raise RuntimeError("another GradTape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def watch(self, tensor: Tensor) -> None:
        """Request a gradient for ``tensor`` even if it does not require one."""
        self._grad_uids.add(tensor.uid)

    def _record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward) -> None:
        for t in inputs:
            if t.requires_grad:
                self._grad_uids.add(t.uid)
        self.entries.append(TapeEntry(op, tuple(t.uid for t in inputs), out.uid, backward))
        self._grad_uids.add(out.uid)

    def backward(self, loss: Tensor) -> Gradients:
        """Propagate d(loss)/d(node) through the tape, newest entry first.

        ``loss`` must be a scalar produced under this tape. Returns the
        gradients of every leaf node (parameters and watched tensors); the
        seed gradient of the loss with respect to itself is 1.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {e.out_uid for e in self.entries}
        if loss.uid not in produced:
            raise ValueError("loss tensor was not computed under this tape")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g_out = grads.pop(entry.out_uid, None)
            if g_out is None:
                continue
            need = tuple(u in self._grad_uids for u in entry.in_uids)
            for uid, g in zip(entry.in_uids, entry.backward(g_out, need)):
                if g is None:
                    continue
                prev = grads.get(uid)
                grads[uid] = g if prev is None else prev + g
        return Gradients({uid: Tensor._wrap(g) for uid, g in grads.items()})


def _tape_if_tracking(inputs: Sequence[Tensor]) -> GradTape | None:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return None
    for t in inputs:
        if t.requires_grad or t.uid in tape._grad_uids:
            return tape
    return None


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed tensor dtypes: {dt} vs {t.dtype}")


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    _check_same_dtype(a, b)
    out = Tensor._wrap(a.data + b.data)
    tape = _tape_if_tracking((a, b))
    if tape is not None:
        def backward(g, need):
            return (g if need[0] else None, g if need[1] else None)
        tape._record("add", (a, b), out, backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shaped tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        _check_same_dtype(a, b)
        out = Tensor._wrap(a.data * b.data)
        tape = _tape_if_tracking((a, b))
        if tape is not None:
            a_data, b_data = a.data, b.data
            def backward(g, need):
                return (g * b_data if need[0] else None, g * a_data if need[1] else None)
            tape._record("mul", (a, b), out, backward)
        return out
    scalar = float(b)
    out = Tensor._wrap(a.data * a.dtype.type(scalar))
    tape = _tape_if_tracking((a,))
    if tape is not None:
        def backward(g, need):
            return (g * a.dtype.type(scalar) if need[0] else None,)
        tape._record("mul_scalar", (a,), out, backward)
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum(), dtype=a.dtype))
    tape = _tape_if_tracking((a,))
    if tape is not None:
        shape = a.shape
        def backward(g, need):
            return (np.full(shape, g.reshape(()), dtype=g.dtype) if need[0] else None,)
        tape._record("sum", (a,), out, backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape))
    tape = _tape_if_tracking((a,))
    if tape is not None:
        old_shape = a.shape
        def backward(g, need):
            return (g.reshape(old_shape) if need[0] else None,)
        tape._record("reshape", (a,), out, backward)
    return out


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate (N, C, H, W) tensors along the channel axis."""
    if not parts:
        raise ValueError("concat_channels: empty input list")
    _check_same_dtype(*parts)
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))
    tape = _tape_if_tracking(parts)
    if tape is not None:
        widths = [p.data.shape[1] for p in parts]
        offsets = np.concatenate(([0], np.cumsum(widths)))
        def backward(g, need):
            return tuple(
                np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]) if need[i] else None
                for i in range(len(widths))
            )
        tape._record("concat", tuple(parts), out, backward)
    return out


# ---------------------------------------------------------------------------
# neural kernels


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with bias.

    Shapes: x (N, C, H, W), weight (K, C, kh, kw), bias (K,) ->
    (N, K, H', W') with H' = floor((H + 2*padding - kh)/stride) + 1.
    Each output element is accumulated over (c, kh, kw) in that exact
    order, so small cases agree bitwise with a naive quadruple loop.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    k, c_w, kh, kw = weight.shape
    if kh not in SUPPORTED_KERNEL_SIZES or kw not in SUPPORTED_KERNEL_SIZES:
        raise ValueError(f"conv2d: kernel sizes limited to {SUPPORTED_KERNEL_SIZES}, got {kh}x{kw}")
    if c_in != c_w:
        raise ShapeError(
            f"conv2d: input has {c_in} channels (shape {x.shape}) but weight expects "
            f"{c_w} (shape {weight.shape})"
        )
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: {kh}x{kw} kernel does not fit input {x.shape} with padding {padding}"
        )
    _check_same_dtype(x, weight, bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    xpt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    wt = np.ascontiguousarray(weight.data.transpose(1, 2, 3, 0))
    y = np.zeros((n, out_h, out_w, k), dtype=x.dtype)
    _kernels.conv2d_forward(xpt, wt, bias.data, stride, y)
    out = Tensor._wrap(y.transpose(0, 3, 1, 2))

    tape = _tape_if_tracking((x, weight, bias))
    if tape is not None:
        def backward(g, need):
            gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
            gx = gw = gb = None
            if need[0]:
                wb = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
                dxp = np.zeros_like(xpt)
                _kernels.conv2d_backward_input(gt, wb, stride, dxp)
                gx = dxp.transpose(0, 3, 1, 2)
                if padding:
                    gx = gx[:, :, padding:padding + h, padding:padding + w]
                gx = np.ascontiguousarray(gx)
            if need[1]:
                gw = np.zeros_like(weight.data)
                _kernels.conv2d_backward_weight(gt, xpt, stride, gw)
            if need[2]:
                gb = g.sum(axis=(0, 2, 3))
            return (gx, gw, gb)
        tape._record("conv2d", (x, weight, bias), out, backward)
    return out


def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max over k x k windows; gradient flows to the first maximum in
    row-major window order. Optional padding behaves as -inf borders
    (windows are clipped to the valid region, so outputs stay finite)."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: need 4-d input, got {x.shape}")
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool2d: k and stride must be >= 1, got k={k} stride={stride}")
    if padding < 0 or padding >= k:
        raise ValueError(f"maxpool2d: padding must satisfy 0 <= padding < k, got {padding}")
    n, c, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"maxpool2d: {k}x{k} window larger than input {x.shape}")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    y = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    arg_i = np.empty(y.shape, dtype=np.int64)
    arg_j = np.empty(y.shape, dtype=np.int64)
    _kernels.maxpool2d_forward(x.data, k, stride, padding, y, arg_i, arg_j)
    out = Tensor._wrap(y)

    tape = _tape_if_tracking((x,))
    if tape is not None:
        in_shape = x.shape
        def backward(g, need):
            if not need[0]:
                return (None,)
            dx = np.zeros(in_shape, dtype=g.dtype)
            _kernels.maxpool2d_backward(g, arg_i, arg_j, dx)
            return (dx,)
        tape._record("maxpool2d", (x,), out, backward)
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight + bias for x (N, D), weight (D, M), bias (M,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense: need 2-d input/weight, got {x.shape} and {weight.shape}")
    n, d = x.shape
    d_w, m = weight.shape
    if d != d_w:
        raise ShapeError(f"dense: input width {d} (shape {x.shape}) != weight rows {d_w} "
                         f"(shape {weight.shape})")
    if bias.shape != (m,):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match width {m}")
    _check_same_dtype(x, weight, bias)
    out = Tensor._wrap(x.data @ weight.data + bias.data)

    tape = _tape_if_tracking((x, weight, bias))
    if tape is not None:
        x_data, w_data = x.data, weight.data
        def backward(g, need):
            gx = g @ w_data.T if need[0] else None
            gw = x_data.T @ g if need[1] else None
            gb = g.sum(axis=0) if need[2] else None
            return (gx, gw, gb)
        tape._record("dense", (x, weight, bias), out, backward)
    return out
