"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap contiguous float64 numpy arrays and are immutable after
construction. Operations execute eagerly; when a Tape is active and an input
requires gradients, each op appends a record (inputs, output, backward rule)
to the tape. `backward` replays the tape in reverse, which is a valid reverse
topological order because records are appended in execution order.

Shapes follow numpy broadcasting only where an op explicitly allows it
(elementwise add/mul); everything else is strict. All math is float64; the
checkpoint writer owns any narrowing to float32.

A global operation counter (`op_count`) accumulates rough flop estimates for
complexity assertions in tests. It is not thread-safe and is meant for
single-threaded instrumentation only.
"""

from __future__ import annotations

import ctypes
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


def _tune_allocator() -> None:
    # glibc hands large frees straight back to the OS (mmap), so every big
    # temporary pays page-fault costs again. Keep them on the heap instead;
    # roughly 4x on allocation-heavy training loops. No-op off glibc.
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 2**31 - 1)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

__all__ = [
    "Tensor",
    "Param",
    "Tape",
    "backward",
    "finite_diff_grad",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "bmm",
    "lmatmul",
    "swap_axes",
    "reshape",
    "concat",
    "narrow",
    "split",
    "tsum",
    "tmean",
    "softmax_last",
    "log_softmax_last",
    "layer_norm",
    "gelu",
    "gather_last",
    "expand_batch",
    "deform_sample",
    "deform_attend",
    "bilinear_sample",
    "op_count",
    "op_count_reset",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_state = threading.local()

_OP_COUNT = 0.0


def _bump(n: float) -> None:
    global _OP_COUNT
    _OP_COUNT += n


def op_count() -> float:
    """Rough flop-ish count accumulated since the last reset."""
    return _OP_COUNT


def op_count_reset() -> None:
    global _OP_COUNT
    _OP_COUNT = 0.0


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


def _assert_finite(arr: np.ndarray, context: str) -> None:
    # One cheap pass: the sum is non-finite iff some element is NaN/Inf
    # (finite overflow would need magnitudes ~1e308, far outside this engine's
    # operating range).
    if not math.isfinite(float(np.sum(arr))):
        raise ValueError(f"non-finite values {context}")


class Tensor:
    """Immutable dense float64 array, row-major.

    Construction rejects non-finite values; every op output passes through
    here, so NaN/Inf surfaces at the op that produced it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        _assert_finite(arr, "in tensor construction")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path for op outputs: takes ownership of arr.
        _assert_finite(arr, "produced by an operation")
        out = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are promoted to constants.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Param:
    """Named learnable value with an accumulated gradient of the same shape."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, init):
        self.name = name
        self.value = Tensor(init, requires_grad=True)
        self.value.grad = np.zeros(self.value.shape)

    @property
    def grad(self) -> np.ndarray:
        g = self.value.grad
        return g if g is not None else np.zeros(self.value.shape)

    def zero_grad(self) -> None:
        self.value.grad = np.zeros(self.value.shape)

    def assign(self, new_value: np.ndarray) -> None:
        """Replace the value (optimizer step). Grad buffer is preserved."""
        if new_value.shape != self.value.shape:
            raise ShapeError(
                f"assign shape {new_value.shape} != param shape {self.value.shape}"
            )
        grad = self.value.grad
        self.value = Tensor(new_value, requires_grad=True)
        self.value.grad = grad

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


class _Record:
    __slots__ = ("inputs", "output", "back")

    def __init__(self, inputs, output, back):
        self.inputs = inputs
        self.output = output
        self.back = back


class Tape:
    """Ordered record of executed ops; append order is a topological order."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.records)


def _emit(out_arr: np.ndarray, inputs: Sequence[Tensor], back: Callable) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, req)
    tape = _active_tape()
    if req and tape is not None:
        tape.records.append(_Record(tuple(inputs), out, back))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable grad-requiring leaf.

    Grads sum across multiple uses of a tensor and across repeated backward
    calls (Param grad buffers are only cleared by `zero_grad`).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    produced = {id(r.output) for r in tape.records}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.back(g)
        for t, ig in zip(rec.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            elif id(t) in produced:
                grads[key] = ig
            else:
                # Leaf: accumulate into the persistent buffer.
                if t.grad is None:
                    t.grad = np.array(ig, dtype=np.float64, copy=True)
                else:
                    t.grad = t.grad + ig
    if id(loss) not in produced and loss.requires_grad:
        if loss.grad is None:
            loss.grad = np.ones(loss.shape)
        else:
            loss.grad = loss.grad + np.ones(loss.shape)


def finite_diff_grad(f: Callable[[], float], param: Param, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of f with respect to every param element.

    f must be a deterministic closure that reads `param.value` on each call.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(param.value.data, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        param.assign(base)
        f_plus = float(f())
        flat[i] = orig - h
        param.assign(base)
        f_minus = float(f())
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    param.assign(base)
    return grad


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    _bump(out.size)

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    _bump(out.size)

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    _bump(out.size)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    _bump(a.size)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    _bump(a.size)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf
    _bump(8 * a.size)

    def back(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _emit(out, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b with b strictly 2-D; a may carry leading batch axes
    (they are flattened into one dgemm)."""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
    _bump(2 * a2.shape[0] * k * n)

    def back(g):
        g2 = g.reshape(-1, n)
        da = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        db = a2.T @ g2 if b.requires_grad else None
        return da, db

    return _emit(out, (a, b), back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (B,m,k) @ (B,k,n) -> (B,m,n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _bump(2 * a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])

    def back(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        db = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return da, db

    return _emit(out, (a, b), back)


def lmatmul(p: Tensor, x: Tensor) -> Tensor:
    """Left projection over the token axis: (P,N) @ (...,N,D) -> (...,P,D)."""
    if p.ndim != 2 or x.ndim < 2 or p.shape[1] != x.shape[-2]:
        raise ShapeError(f"lmatmul shape mismatch: {p.shape} @ {x.shape}")
    n, d = x.shape[-2], x.shape[-1]
    out = np.matmul(p.data, x.data)
    _bump(2 * p.shape[0] * n * x.size // n)

    def back(g):
        if p.requires_grad:
            g3 = g.reshape(-1, p.shape[0], d)
            x3 = x.data.reshape(-1, n, d)
            dp = np.tensordot(g3, x3, axes=([0, 2], [0, 2]))
        else:
            dp = None
        dx = np.matmul(p.data.T, g) if x.requires_grad else None
        return dp, dx

    return _emit(out, (p, x), back)


# ---------------------------------------------------------------------------
# shape manipulation


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2))
    return _emit(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _emit(out, (a,), back)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; all other dimensions must agree exactly."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    ref = list(parts[0].shape)
    ax = axis % len(ref)
    for p in parts[1:]:
        s = list(p.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat shape mismatch: {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]

    def back(g):
        offs = np.cumsum([0] + sizes)
        return tuple(
            np.take(g, np.arange(offs[i], offs[i + 1]), axis=ax)
            for i in range(len(parts))
        )

    return _emit(out, tuple(parts), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    ax = axis % a.ndim
    if start < 0 or start + length > a.shape[ax]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range on {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(idx)])

    def back(g):
        full = np.zeros(a.shape)
        full[tuple(idx)] = g
        return (full,)

    return _emit(out, (a,), back)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != a.shape[axis % a.ndim]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of {a.shape}")
    outs, off = [], 0
    for s in sizes:
        outs.append(narrow(a, axis, off, s))
        off += s
    return outs


def expand_batch(a: Tensor, b: int) -> Tensor:
    """Prepend a batch axis of size b by repetition; backward sums over it."""
    out = np.broadcast_to(a.data, (b,) + a.shape).copy()
    return _emit(out, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    _bump(a.size)
    if axis is None:
        out = a.data.sum(keepdims=True).reshape(())

        def back(g):
            return (np.full(a.shape, float(g)),)

        return _emit(np.asarray(out), (a,), back)
    ax = axis % a.ndim
    out = a.data.sum(axis=ax)

    def back(g):
        return (np.repeat(np.expand_dims(g, ax), a.shape[ax], axis=ax),)

    return _emit(out, (a,), back)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis % a.ndim]
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# normalization / softmax


def softmax_last(x: Tensor) -> Tensor:
    """Probability vector along the trailing axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    out = z
    _bump(5 * x.size)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        gz = g - dot
        gz *= out
        return (gz,)

    return _emit(out, (x,), back)


def log_softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    _bump(5 * x.size)

    def back(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the trailing axis, then affine gain*xhat+bias."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    _bump(8 * x.size)

    def back(g):
        dxhat = g * gain.data
        dgain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        dbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = (dxhat - m1 - xhat * m2) * inv
        else:
            dx = None
        return dx, dgain, dbias

    return _emit(out, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# gathers


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the trailing axis per row: out[...] = x[..., idx[...]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last index shape {idx.shape} != {x.shape[:-1]}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    c = x.shape[-1]

    def back(g):
        dx = np.zeros((idx.size, c))
        np.add.at(dx, (np.arange(idx.size), idx.reshape(-1)), g.reshape(-1))
        return (dx.reshape(x.shape),)

    return _emit(out, (x,), back)


# ---------------------------------------------------------------------------
# bilinear sampling

# Coordinates are normalized to [0,1]^2 with the half-cell convention: the
# center of cell (i,j) on an H-by-W grid sits at ((j+0.5)/W, (i+0.5)/H).
# Out-of-range samples clamp to the border, so coordinate gradients vanish
# outside the grid interior.


def _bilinear_parts(pts: np.ndarray, h: int, w: int):
    u = pts[..., 0] * w - 0.5
    v = pts[..., 1] * h - 0.5
    mu = (u > 0.0) & (u < w - 1.0)
    mv = (v > 0.0) & (v < h - 1.0)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    j0 = np.floor(uc).astype(np.int64)
    i0 = np.floor(vc).astype(np.int64)
    tu = uc - j0
    tv = vc - i0
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    return i0, i1, j0, j1, tu, tv, mu, mv


def deform_sample(maps: Tensor, points: Tensor) -> Tensor:
    """Batched multi-level bilinear sampling.

    maps: (B, L, H, W, M, C) value grids, one per batch/level, split by head.
    points: (B, N, M, L, K, 2) normalized (x, y) locations.
    Returns (B, N, M, L, K, C); differentiable in both maps and points.
    """
    if maps.ndim != 6 or points.ndim != 6 or points.shape[-1] != 2:
        raise ShapeError(f"deform_sample shapes: maps {maps.shape}, points {points.shape}")
    b, l, h, w, m, c = maps.shape
    if points.shape[0] != b or points.shape[2] != m or points.shape[3] != l:
        raise ShapeError(f"deform_sample shapes: maps {maps.shape}, points {points.shape}")
    i0, i1, j0, j1, tu, tv, mu, mv = _bilinear_parts(points.data, h, w)

    # Flat row indices into the (B*L*H*W*M, C) view, one array per corner;
    # built with in-place integer ops and reused by the backward scatter.
    bi = np.arange(b)[:, None, None, None, None]
    li = np.arange(l)[None, None, None, :, None]
    mi = np.arange(m)[None, None, :, None, None]
    base = np.broadcast_to((bi * l + li) * h, i0.shape)

    def flat_rows(ii, jj):
        f = base + ii
        f *= w
        f += jj
        f *= m
        f += mi
        return f

    rows = (flat_rows(i0, j0), flat_rows(i0, j1), flat_rows(i1, j0), flat_rows(i1, j1))
    v2 = maps.data.reshape(-1, c)
    v00 = np.take(v2, rows[0], axis=0)
    v01 = np.take(v2, rows[1], axis=0)
    v10 = np.take(v2, rows[2], axis=0)
    v11 = np.take(v2, rows[3], axis=0)
    wu1, wv1 = tu[..., None], tv[..., None]
    wu0, wv0 = 1.0 - wu1, 1.0 - wv1
    out = (v00 * wu0 + v01 * wu1) * wv0 + (v10 * wu0 + v11 * wu1) * wv1
    _bump(12 * out.size)

    def back(g):
        gv0 = g * wv0
        gv1 = g * wv1
        corner_grads = (gv0 * wu0, gv0 * wu1, gv1 * wu0, gv1 * wu1)
        if maps.requires_grad:
            ncells = b * l * h * w * m
            flat_all = np.concatenate([r.reshape(-1) for r in rows])
            dflat = np.empty((ncells, c))
            for ch in range(c):
                wts = np.concatenate([cg[..., ch].reshape(-1) for cg in corner_grads])
                dflat[:, ch] = np.bincount(flat_all, weights=wts, minlength=ncells)
            dmaps = dflat.reshape(maps.shape)
        else:
            dmaps = None
        if points.requires_grad:
            du = ((v01 - v00) * wv0 + (v11 - v10) * wv1) * g
            dv = ((v10 - v00) * wu0 + (v11 - v01) * wu1) * g
            dpts = np.zeros(points.shape)
            dpts[..., 0] = du.sum(axis=-1) * mu * w
            dpts[..., 1] = dv.sum(axis=-1) * mv * h
        else:
            dpts = None
        return dmaps, dpts

    return _emit(out, (maps, points), back)


def bilinear_sample(fmap: Tensor, points: Tensor) -> Tensor:
    """Sample an (H, W, C) grid at P normalized (x, y) points -> (P, C)."""
    if fmap.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample shapes: map {fmap.shape}, points {points.shape}")
    h, w, c = fmap.shape
    p = points.shape[0]
    m6 = reshape(fmap, (1, 1, h, w, 1, c))
    p6 = reshape(points, (1, p, 1, 1, 1, 2))
    out = deform_sample(m6, p6)
    return reshape(out, (p, c))


def deform_attend(maps: Tensor, points: Tensor, weights: Tensor) -> Tensor:
    """Fused weighted multi-level sampling: sum_{l,k} w * bilinear(maps, pts).

    maps: (B, L, H, W, M, C); points: (B, N, M, L, K, 2);
    weights: (B, N, M, L, K). Returns (B, N, M, C). Equivalent to
    deform_sample followed by a weighted (l, k) reduction, without
    materializing the per-sample gradient tensors.
    """
    if maps.ndim != 6 or points.ndim != 6 or points.shape[-1] != 2:
        raise ShapeError(f"deform_attend shapes: maps {maps.shape}, points {points.shape}")
    b, l, h, w, m, c = maps.shape
    n, k = points.shape[1], points.shape[4]
    if points.shape != (b, n, m, l, k, 2) or weights.shape != (b, n, m, l, k):
        raise ShapeError(
            f"deform_attend shapes: maps {maps.shape}, points {points.shape}, "
            f"weights {weights.shape}"
        )
    i0, i1, j0, j1, tu, tv, mu, mv = _bilinear_parts(points.data, h, w)
    bi = np.arange(b)[:, None, None, None, None]
    li = np.arange(l)[None, None, None, :, None]
    mi = np.arange(m)[None, None, :, None, None]
    base = np.broadcast_to((bi * l + li) * h, i0.shape)

    def flat_rows(ii, jj):
        f = base + ii
        f *= w
        f += jj
        f *= m
        f += mi
        return f

    rows = (flat_rows(i0, j0), flat_rows(i0, j1), flat_rows(i1, j0), flat_rows(i1, j1))
    v2 = maps.data.reshape(-1, c)
    v00 = np.take(v2, rows[0], axis=0)
    v01 = np.take(v2, rows[1], axis=0)
    v10 = np.take(v2, rows[2], axis=0)
    v11 = np.take(v2, rows[3], axis=0)
    wu1, wv1 = tu[..., None], tv[..., None]
    wu0, wv0 = 1.0 - wu1, 1.0 - wv1
    sampled = (v00 * wu0 + v01 * wu1) * wv0 + (v10 * wu0 + v11 * wu1) * wv1
    out = np.einsum("bnmlkc,bnmlk->bnmc", sampled, weights.data, optimize=True)
    _bump(16 * sampled.size)

    def back(g):
        gb = g[:, :, :, None, None, :]  # broadcast over (l, k)
        dweights = (sampled * gb).sum(axis=-1) if weights.requires_grad else None
        wg = weights.data[..., None] * gb  # (B,N,M,L,K,C) grad into samples
        if maps.requires_grad:
            gv0 = wg * wv0
            gv1 = wg * wv1
            corner_grads = (gv0 * wu0, gv0 * wu1, gv1 * wu0, gv1 * wu1)
            ncells = b * l * h * w * m
            flat_all = np.concatenate([r.reshape(-1) for r in rows])
            dflat = np.empty((ncells, c))
            for ch in range(c):
                wts = np.concatenate([cg[..., ch].reshape(-1) for cg in corner_grads])
                dflat[:, ch] = np.bincount(flat_all, weights=wts, minlength=ncells)
            dmaps = dflat.reshape(maps.shape)
        else:
            dmaps = None
        if points.requires_grad:
            du = (v01 - v00) * wv0
            du += (v11 - v10) * wv1
            du *= wg
            dv = (v10 - v00) * wu0
            dv += (v11 - v01) * wu1
            dv *= wg
            dpts = np.empty(points.shape)
            dpts[..., 0] = du.sum(axis=-1) * mu * w
            dpts[..., 1] = dv.sum(axis=-1) * mv * h
        else:
            dpts = None
        return dmaps, dpts, dweights

    return _emit(out, (maps, points, weights), back)
