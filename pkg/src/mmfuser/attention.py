"""Three interchangeable attention mechanisms behind one contract.

Queries are token rows (N, D) — or batched (B, N, D) — attending to key/value
tokens that live on a spatial grid. Variants:

  * global: standard multi-head scaled dot-product attention, O(N_q * N_k).
  * sra: keys/values average-pooled per level before global attention,
    linear in N_k for a fixed pooled size.
  * deformable: each query bilinearly samples K learned offset locations per
    level per head; linear in key count.

No positional encodings are added here (`pos_embed=none`): encoder features
already carry position from their own embeddings. No dropout; runs are
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .tensor import (
    Param,
    ShapeError,
    Tensor,
    add,
    bmm,
    concat,
    constant,
    deform_attend,
    lmatmul,
    matmul,
    mul,
    reshape,
    scale,
    softmax_last,
    split,
    swap_axes,
)

__all__ = [
    "AttnVariant",
    "MultiHeadParams",
    "DeformableParams",
    "ReferenceGrid",
    "make_reference_grid",
    "global_attention",
    "multi_head_attention",
    "linear_sra_attention",
    "deformable_attention",
    "avg_pool_matrix",
]


class AttnVariant(str, Enum):
    GLOBAL = "global"
    LINEAR_SRA = "sra"
    DEFORMABLE = "deformable"


@dataclass(frozen=True)
class ReferenceGrid:
    """Token grid with per-token normalized center coordinates.

    Token order is row-major; token (i, j) sits at ((j+0.5)/W, (i+0.5)/H).
    """

    h: int
    w: int
    coords: np.ndarray = field(repr=False)  # (H*W, 2) as (x, y)

    @property
    def n(self) -> int:
        return self.h * self.w


def make_reference_grid(h: int, w: int) -> ReferenceGrid:
    if h < 1 or w < 1:
        raise ValueError(f"grid dims must be positive, got {h}x{w}")
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    coords = np.stack([(jj + 0.5) / w, (ii + 0.5) / h], axis=-1).reshape(-1, 2)
    return ReferenceGrid(h=h, w=w, coords=coords)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class MultiHeadParams:
    """Separate query/key/value projections plus output projection, no biases."""

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.wq = Param(f"{name}.wq", _xavier(rng, dim, dim))
        self.wk = Param(f"{name}.wk", _xavier(rng, dim, dim))
        self.wv = Param(f"{name}.wv", _xavier(rng, dim, dim))
        self.wo = Param(f"{name}.wo", _xavier(rng, dim, dim))

    def params(self) -> list[Param]:
        return [self.wq, self.wk, self.wv, self.wo]


def _ring_offsets(heads: int, levels: int, points: int) -> np.ndarray:
    # K distinct unit directions per head, rotated per head so heads start
    # asymmetric; identical across levels. Units are key-grid cells.
    bias = np.zeros((heads, levels, points, 2))
    for m in range(heads):
        for k in range(points):
            theta = 2.0 * math.pi * (k + m / heads) / points
            bias[m, :, k, 0] = math.cos(theta)
            bias[m, :, k, 1] = math.sin(theta)
    return bias.reshape(-1)


class DeformableParams:
    """Value/offset/weight/output projections for multi-level deformable attention.

    Offset and weight projections start at zero weights; the offset bias is a
    ring of unit-cell directions and the weight bias is zero, so attention is
    uniform over (level, point) at init.
    """

    def __init__(
        self,
        name: str,
        dim: int,
        levels: int,
        rng: np.random.Generator,
        heads: int = 16,
        points: int = 4,
    ):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.levels = levels
        self.points = points
        mlk = heads * levels * points
        self.value_proj = Param(f"{name}.value", _xavier(rng, dim, dim))
        self.offset_w = Param(f"{name}.offset_w", np.zeros((dim, mlk * 2)))
        self.offset_b = Param(f"{name}.offset_b", _ring_offsets(heads, levels, points))
        self.weight_w = Param(f"{name}.weight_w", np.zeros((dim, mlk)))
        self.weight_b = Param(f"{name}.weight_b", np.zeros(mlk))
        self.out_proj = Param(f"{name}.out", _xavier(rng, dim, dim))

    def params(self) -> list[Param]:
        return [
            self.value_proj,
            self.offset_w,
            self.offset_b,
            self.weight_w,
            self.weight_b,
            self.out_proj,
        ]


def _as_batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 2:
        return reshape(t, (1,) + t.shape), True
    if t.ndim == 3:
        return t, False
    raise ShapeError(f"expected (N,D) or (B,N,D) tokens, got {t.shape}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    x = reshape(x, (b, n, heads, d // heads))
    x = swap_axes(x, 1, 2)
    return reshape(x, (b * heads, n, d // heads))


def _merge_heads(x: Tensor, b: int, heads: int) -> Tensor:
    _, n, dh = x.shape
    x = reshape(x, (b, heads, n, dh))
    x = swap_axes(x, 1, 2)
    return reshape(x, (b, n, heads * dh))


def multi_head_attention(q: Tensor, kv: Tensor, params: MultiHeadParams) -> Tensor:
    """Batched multi-head scaled dot-product attention, (B,Nq,D) x (B,Nk,D)."""
    b = q.shape[0]
    dh = params.dim // params.heads
    qh = _split_heads(matmul(q, params.wq.value), params.heads)
    kh = _split_heads(matmul(kv, params.wk.value), params.heads)
    vh = _split_heads(matmul(kv, params.wv.value), params.heads)
    scores = scale(bmm(qh, swap_axes(kh, 1, 2)), 1.0 / math.sqrt(dh))
    ctx = bmm(softmax_last(scores), vh)
    return matmul(_merge_heads(ctx, b, params.heads), params.wo.value)


def global_attention(q: Tensor, kv: Tensor, params: MultiHeadParams) -> Tensor:
    """Standard multi-head attention on unbatched (N, D) token rows."""
    qb, was2d = _as_batched(q)
    kb, _ = _as_batched(kv)
    if qb.shape[0] != kb.shape[0]:
        raise ShapeError(f"batch mismatch: q {q.shape} vs kv {kv.shape}")
    out = multi_head_attention(qb, kb, params)
    return reshape(out, out.shape[1:]) if was2d else out


def avg_pool_matrix(h: int, w: int, pool: int) -> np.ndarray:
    """(Hp*Wp, H*W) averaging matrix over pool x pool blocks; ragged edge
    blocks average their actual cells."""
    hp = -(-h // pool)
    wp = -(-w // pool)
    p = np.zeros((hp * wp, h * w))
    for bi in range(hp):
        for bj in range(wp):
            rows = range(bi * pool, min((bi + 1) * pool, h))
            cols = range(bj * pool, min((bj + 1) * pool, w))
            cells = [i * w + j for i in rows for j in cols]
            p[bi * wp + bj, cells] = 1.0 / len(cells)
    return p


def linear_sra_attention(
    q: Tensor,
    kv: Tensor,
    grid: ReferenceGrid,
    pool: int,
    params: MultiHeadParams,
) -> Tensor:
    """Spatial-reduction attention: pool keys/values per level, then attend.

    kv holds one or more levels of grid tokens stacked along the token axis
    (N_k must be a multiple of grid.n). pool=1 is bit-identical to
    global_attention on the same inputs.
    """
    if pool < 1:
        raise ValueError(f"pool must be >= 1, got {pool}")
    if pool == 1:
        return global_attention(q, kv, params)
    nk = kv.shape[-2]
    if nk % grid.n != 0:
        raise ShapeError(f"kv token count {nk} not a multiple of grid {grid.h}x{grid.w}")
    nlevels = nk // grid.n
    pmat = constant(avg_pool_matrix(grid.h, grid.w, pool))
    levels = split(kv, [grid.n] * nlevels, axis=-2)
    pooled = concat([lmatmul(pmat, lv) for lv in levels], axis=-2)
    return global_attention(q, pooled, params)


def deformable_attention(
    q: Tensor,
    levels: Sequence[Tensor],
    grid: ReferenceGrid,
    params: DeformableParams,
) -> Tensor:
    """Multi-level deformable attention.

    Each query token at reference point p samples K offset locations per head
    per level (offsets predicted from the query, in key-grid cell units, then
    normalized by (W, H)); attention weights are a softmax over the joint
    (level, point) axis per head. Differentiable through the sampling
    locations.
    """
    if len(levels) != params.levels:
        raise ShapeError(f"got {len(levels)} levels, params expect {params.levels}")
    qb, was2d = _as_batched(q)
    b, n, d = qb.shape
    m, l, k = params.heads, params.levels, params.points
    dh = d // m
    if n != grid.n:
        raise ShapeError(f"query count {n} != grid {grid.h}x{grid.w}")
    maps = []
    for lv in levels:
        lvb, _ = _as_batched(lv)
        if lvb.shape != (b, grid.n, d):
            raise ShapeError(
                f"level shape {lv.shape} incompatible with grid {grid.h}x{grid.w}, dim {d}"
            )
        v = matmul(lvb, params.value_proj.value)
        maps.append(reshape(v, (b, 1, grid.h, grid.w, m, dh)))
    vmaps = maps[0] if l == 1 else concat(maps, axis=1)

    off = add(matmul(qb, params.offset_w.value), params.offset_b.value)
    off = reshape(off, (b, n, m, l, k, 2))
    ref = constant(grid.coords.reshape(1, n, 1, 1, 1, 2))
    inv_wh = constant(np.array([1.0 / grid.w, 1.0 / grid.h]))
    locs = add(ref, mul(off, inv_wh))

    wts = add(matmul(qb, params.weight_w.value), params.weight_b.value)
    wts = softmax_last(reshape(wts, (b, n, m, l * k)))
    wts = reshape(wts, (b, n, m, l, k))

    per_head = deform_attend(vmaps, locs, wts)  # (B,N,M,dh)
    out = matmul(reshape(per_head, (b, n, d)), params.out_proj.value)
    return reshape(out, (n, d)) if was2d else out
