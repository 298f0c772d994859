"""Reverse-mode autodiff on flat numpy buffers.

A Tape records elementary operations in creation order (which is a valid
topological order); ``backward`` replays local gradient rules once, in
reverse. 32-bit storage is the training default; 64-bit mode exists so
finite-difference verification tolerances are attainable.

Broadcasting is restricted to scalars on purpose: every shape in the rest
of the system is made explicit by the caller.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64
PRECISION_DTYPES = {32: F32, 64: F64}

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "tensor",
    "zeros",
    "concat",
    "matmul",
    "softmax",
    "conv2d",
    "backward",
    "finite_diff_check",
    "grad_check_params",
    "tensor_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation contract."""


class TapeError(RuntimeError):
    """Invalid tape usage: double backward, non-scalar loss, nesting."""


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class _Node:
    __slots__ = ("out_slot", "parent_slots", "grad_fn")

    def __init__(self, out_slot: int, parent_slots: tuple, grad_fn: Callable):
        self.out_slot = out_slot
        self.parent_slots = parent_slots
        self.grad_fn = grad_fn


class Tape:
    """Single-threaded record of operations; not shareable across threads."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._n_slots = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tape = None

    def _new_slot(self) -> int:
        self._n_slots += 1
        return self._n_slots - 1

    def _register_leaf(self, t: "Tensor") -> None:
        t._tape = self
        t._slot = self._new_slot()
        self._leaves.append(t)


class Tensor:
    """N-dimensional value; the sole numeric carrier of the system.

    Immutable by convention after creation except for ``grad`` accumulation.
    ``requires_grad`` marks optimization leaves; intermediate results get a
    tape slot automatically while a Tape is active.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_slot")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (F32, F64):
                arr = arr.astype(F32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._slot: int | None = None

    # -- basic introspection ------------------------------------------------

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
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return _binary_ew(self, other, np.add, lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary_ew(self, other, np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return _binary_ew(self, other, np.multiply, lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary_ew(
            self, other, np.divide, lambda g, a, b: (g / b, -g * a / (b * b))
        )

    def __rtruediv__(self, other):
        num = _const_like(self, other)
        return num / self

    def __neg__(self):
        out = Tensor(-self.data)
        return _record(out, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return self.pow(exponent)

    # -- elementwise unaries ---------------------------------------------------

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data))
        y = out.data
        return _record(out, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise ValueError("log of non-positive value")
        out = Tensor(np.log(self.data))
        a = self.data
        return _record(out, (self,), lambda g: (g / a,))

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0))
        mask = (self.data > 0).astype(self.data.dtype)
        return _record(out, (self,), lambda g: (g * mask,))

    def abs(self) -> "Tensor":
        out = Tensor(np.abs(self.data))
        sign = np.sign(self.data)
        return _record(out, (self,), lambda g: (g * sign,))

    def tanh(self) -> "Tensor":
        out = Tensor(np.tanh(self.data))
        y = out.data
        return _record(out, (self,), lambda g: (g * (1 - y * y),))

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = Tensor(y)
        return _record(out, (self,), lambda g: (g * y * (1 - y),))

    def gelu(self) -> "Tensor":
        # tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
        x = self.data
        c = x.dtype.type(np.sqrt(2.0 / np.pi))
        k = x.dtype.type(0.044715)
        u = c * (x + k * x**3)
        t = np.tanh(u)
        out = Tensor(0.5 * x * (1 + t))

        def grad(g):
            du = c * (1 + 3 * k * x * x)
            return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)

        return _record(out, (self,), grad)

    def pow(self, exponent: float) -> "Tensor":
        e = float(exponent)
        if e != int(e) and np.any(self.data < 0):
            raise ValueError("fractional power of negative value")
        out = Tensor(self.data**e)
        a = self.data
        return _record(out, (self,), lambda g: (g * e * a ** (e - 1),))

    def sqrt(self) -> "Tensor":
        return self.pow(0.5)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            out = Tensor(np.sum(self.data))
            shape, dt = self.shape, self.data.dtype
            return _record(out, (self,), lambda g: (np.full(shape, g, dtype=dt),))
        ax = axis % self.data.ndim
        out = Tensor(np.sum(self.data, axis=ax))
        n = self.shape[ax]

        def grad(g):
            return (np.repeat(np.expand_dims(g, ax), n, axis=ax),)

        return _record(out, (self,), grad)

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.size if axis is None else self.shape[axis % self.data.ndim]
        return self.sum(axis) * (1.0 / n)

    # -- shape manipulation ------------------------------------------------------

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        new = tuple(shape)
        out = Tensor(np.reshape(self.data, new))
        old = self.shape
        return _record(out, (self,), lambda g: (np.reshape(g, old),))

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        out = Tensor(np.transpose(self.data, axes))
        inv = tuple(np.argsort(axes))
        return _record(out, (self,), lambda g: (np.transpose(g, inv),))

    def slice(self, bounds: Sequence[tuple[int, int]]) -> "Tensor":
        if len(bounds) != self.data.ndim:
            raise ShapeError(
                f"slice bounds rank {len(bounds)} != tensor rank {self.data.ndim}"
            )
        key = tuple(np.s_[a:b] for a, b in bounds)
        out = Tensor(self.data[key].copy())
        shape, dt = self.shape, self.data.dtype

        def grad(g):
            full = np.zeros(shape, dtype=dt)
            full[key] = g
            return (full,)

        return _record(out, (self,), grad)

    def row(self, i: int) -> "Tensor":
        """Rank-reduced extraction of row i from a 2-D tensor."""
        if self.data.ndim != 2:
            raise ShapeError(f"row() needs a 2-D tensor, got shape {self.shape}")
        return self.slice(((i, i + 1), (0, self.shape[1]))).reshape((self.shape[1],))

    def roll(self, shift: int, axis: int) -> "Tensor":
        out = Tensor(np.roll(self.data, shift, axis=axis))
        return _record(out, (self,), lambda g: (np.roll(g, -shift, axis=axis),))

    # -- elementwise binary extrema ------------------------------------------------

    def maximum(self, other) -> "Tensor":
        def grads(g, a, b):
            mask = (a >= b).astype(a.dtype)  # ties route to self
            return (g * mask, g * (1 - mask))

        return _binary_ew(self, other, np.maximum, grads)

    def minimum(self, other) -> "Tensor":
        def grads(g, a, b):
            mask = (a <= b).astype(a.dtype)
            return (g * mask, g * (1 - mask))

        return _binary_ew(self, other, np.minimum, grads)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)

    def backward(self) -> None:
        backward(self)


# -- construction helpers -----------------------------------------------------


def tensor(data, bits: int = 32, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=PRECISION_DTYPES[bits], requires_grad=requires_grad)


def zeros(shape: Sequence[int], bits: int = 32, requires_grad: bool = False) -> Tensor:
    return Tensor(
        np.zeros(tuple(shape), dtype=PRECISION_DTYPES[bits]), requires_grad=requires_grad
    )


def _const_like(ref: Tensor, value) -> Tensor:
    return Tensor(np.full(ref.shape, value, dtype=ref.data.dtype))


# -- recording machinery --------------------------------------------------------


def _record(out: Tensor, parents: tuple, grad_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    tracked = [
        p.requires_grad or (p._tape is tape and p._slot is not None) for p in parents
    ]
    if not any(tracked):
        return out
    slots = []
    for p, tr in zip(parents, tracked):
        if not tr:
            slots.append(None)
            continue
        if p._tape is not tape:
            tape._register_leaf(p)
        slots.append(p._slot)
    out._tape = tape
    out._slot = tape._new_slot()
    tape._nodes.append(_Node(out._slot, tuple(slots), grad_fn))
    return out


def _binary_ew(a: Tensor, other, fwd, grads) -> Tensor:
    """Elementwise binary op; shapes must match exactly or `other` is a scalar."""
    if isinstance(other, Tensor):
        if a.shape != other.shape:
            raise ShapeError(
                f"elementwise shapes differ: {a.shape} vs {other.shape}"
            )
        if a.data.dtype != other.data.dtype:
            raise ShapeError(
                f"mixed dtypes: {a.data.dtype.name} vs {other.data.dtype.name}"
            )
        out = Tensor(fwd(a.data, other.data))
        ad, bd = a.data, other.data
        return _record(out, (a, other), lambda g: grads(g, ad, bd))
    if not np.isscalar(other):
        raise ShapeError(f"operand must be Tensor or scalar, got {type(other)!r}")
    b = a.data.dtype.type(other)
    out = Tensor(fwd(a.data, b))
    ad = a.data

    def grad(g):
        return (grads(g, ad, b)[0],)

    return _record(out, (a,), grad)


# -- core ops ----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"mixed dtypes: {a.data.dtype.name} vs {b.data.dtype.name}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.data.ndim if x.data.ndim else 0
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=ax, keepdims=True)
    out = Tensor(y)

    def grad(g):
        dot = np.sum(g * y, axis=ax, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty sequence")
    ax = axis % tensors[0].data.ndim
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(sizes))
        )

    return _record(out, tuple(tensors), grad)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D convolution (cross-correlation): x[C,H,W], w[K,C,kh,kw] -> [K,Ho,Wo]."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs x[C,H,W], w[K,C,kh,kw]; got {x.shape}, {w.shape}")
    C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {C} vs kernel {Cw}")
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = xp.shape[1:]
    Ho = (Hp - kh) // s + 1
    Wo = (Wp - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s]  # C,Ho,Wo,kh,kw
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(
        C * kh * kw, Ho * Wo
    )
    wmat = w.data.reshape(K, -1)
    y = (wmat @ cols).reshape(K, Ho, Wo)
    if b is not None:
        if b.shape != (K,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({K},)")
        y = y + b.data.reshape(K, 1, 1)
    out = Tensor(y)

    def grad(g):
        gm = g.reshape(K, -1)
        dw = (gm @ cols.T).reshape(w.shape)
        dcols = (wmat.T @ gm).reshape(C, kh, kw, Ho, Wo)
        dxp = np.zeros((C, Hp, Wp), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + Ho * s : s, j : j + Wo * s : s] += dcols[:, i, j]
        dx = dxp[:, p : p + H, p : p + W] if p else dxp
        if b is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, grad)


# -- backward pass ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad for every tape tensor reachable from a scalar loss."""
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not recorded on any tape")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {
        loss._slot: np.ones_like(loss.data)
    }
    for node in reversed(tape._nodes):
        g = grads.pop(node.out_slot, None)
        if g is None:
            continue
        for slot, pg in zip(node.parent_slots, node.grad_fn(g)):
            if slot is None or pg is None:
                continue
            if slot in grads:
                grads[slot] = grads[slot] + pg
            else:
                grads[slot] = pg
    for leaf in tape._leaves:
        g = grads.get(leaf._slot)
        if g is None:
            continue
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# -- verification oracles ------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between analytic gradient of f at x and central differences.

    Requires 64-bit input; `f` must be a pure tensor function that does not
    manage tapes itself.
    """
    if x.data.dtype != F64:
        raise ValueError("finite_diff_check requires a 64-bit tensor")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        y = f(leaf)
        backward(y)
    analytic = np.zeros_like(x.data) if leaf.grad is None else leaf.grad
    analytic = analytic.ravel()
    base = x.data.ravel().copy()
    idxs = range(base.size) if coords is None else coords
    worst = 0.0
    for i in idxs:
        probe = base.copy()
        probe[i] = base[i] + eps
        fp = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = base[i] - eps
        fm = f(Tensor(probe.reshape(x.shape))).item()
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_coords: int = 50,
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Finite-difference check of d(loss)/d(params) over sampled coordinates.

    ``loss_fn`` reads the parameter tensors in place; numeric probes perturb
    their buffers directly. 64-bit parameters required.
    """
    names = sorted(params)
    sizes = [params[n].size for n in names]
    total = int(sum(sizes))
    if total == 0:
        raise ValueError("no parameters to check")
    for n in names:
        if params[n].data.dtype != F64:
            raise ValueError(f"parameter {n} is not 64-bit")
        params[n].zero_grad()
    with Tape():
        loss = loss_fn()
        backward(loss)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[pi - 1] if pi else 0))
        p = params[names[pi]]
        analytic = 0.0 if p.grad is None else float(p.grad.ravel()[local])
        keep = p.data.ravel()[local]
        p.data.ravel()[local] = keep + eps
        fp = loss_fn().item()
        p.data.ravel()[local] = keep - eps
        fm = loss_fn().item()
        p.data.ravel()[local] = keep
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic - numeric) / max(1.0, abs(analytic))
        worst = max(worst, err)
    return worst


# -- snapshot format ------------------------------------------------------------------
# Header: rank, dims... as uint32 LE, then a uint32 precision flag (32 or 64),
# followed by raw little-endian floats.


def tensor_bytes(t: Tensor) -> bytes:
    arr = t.data
    bits = 64 if arr.dtype == F64 else 32
    head = struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<I", d) for d in arr.shape)
    head += struct.pack("<I", bits)
    return head + arr.astype("<f8" if bits == 64 else "<f4", copy=False).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset) if rank else ()
    offset += 4 * rank
    (bits,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if bits not in PRECISION_DTYPES:
        raise ValueError(f"unknown precision flag {bits}")
    count = int(np.prod(dims)) if rank else 1
    width = bits // 8
    arr = np.frombuffer(buf, dtype=f"<f{width}", count=count, offset=offset)
    offset += count * width
    data = arr.reshape(dims).astype(PRECISION_DTYPES[bits])
    return Tensor(data), offset


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        t, _ = tensor_from_bytes(fh.read())
    return t
