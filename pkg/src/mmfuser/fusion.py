"""Multi-layer feature fusion: the gated query-guided fuser and four naive
baselines, all mapping a stack of per-layer token grids to one N x D map.

The fuser uses the deepest selected map as attention queries over the shallow
maps, so detail extraction cannot disturb the deep map's semantics: the output
is query + gamma1 * branch with gamma1 initialized to zero, making the block an
exact identity at init.

Token tensors are (N, D) or batched (..., N, D); the trailing two axes carry
the spec'd shape contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .attention import (
    AttnVariant,
    DeformableParams,
    MultiHeadParams,
    ReferenceGrid,
    deformable_attention,
    linear_sra_attention,
    make_reference_grid,
    multi_head_attention,
    global_attention,
)
from .tensor import (
    Param,
    ShapeError,
    Tensor,
    add,
    concat,
    constant,
    layer_norm,
    lmatmul,
    matmul,
    mul,
    narrow,
    reshape,
    scale,
)

__all__ = [
    "FeatureMap",
    "FeatureStack",
    "LayerSelection",
    "FusionMethod",
    "MMFuserParams",
    "WeightedAvgParams",
    "ConcatParams",
    "FpnParams",
    "ConfigurationError",
    "select_layers",
    "mmfuser_forward",
    "fuse_concat",
    "fuse_average",
    "fuse_weighted_average",
    "fuse_fpn",
    "fuse",
]


class ConfigurationError(ValueError):
    pass


class FusionMethod(str, Enum):
    LAST_LAYER_ONLY = "last"
    CONCAT = "concat"
    AVERAGE = "average"
    WEIGHTED_AVERAGE = "weighted"
    FPN = "fpn"
    MMFUSER = "mmfuser"


@dataclass
class FeatureMap:
    """Token grid from one encoder depth: tokens (..., N, D), N = H * W,
    row-major over the grid."""

    tokens: Tensor
    grid: tuple[int, int]
    layer_index: int

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.ndim < 2 or self.tokens.shape[-2] != h * w:
            raise ShapeError(
                f"tokens shape {self.tokens.shape} does not match grid {h}x{w}"
            )

    @property
    def n(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class FeatureStack:
    """Ordered maps by strictly increasing layer_index, sharing N, D and grid."""

    maps: list[FeatureMap]

    def __post_init__(self):
        if not self.maps:
            raise ShapeError("feature stack must hold at least one map")
        ref = self.maps[0]
        for m in self.maps[1:]:
            if m.grid != ref.grid or m.dim != ref.dim or m.tokens.shape != ref.tokens.shape:
                raise ShapeError(
                    f"stack maps disagree: {m.tokens.shape}/{m.grid} vs "
                    f"{ref.tokens.shape}/{ref.grid}"
                )
        idx = [m.layer_index for m in self.maps]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ShapeError(f"layer indices must strictly increase, got {idx}")

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def grid(self) -> tuple[int, int]:
        return self.maps[0].grid

    @property
    def dim(self) -> int:
        return self.maps[0].dim


@dataclass(frozen=True)
class LayerSelection:
    """Which encoder layer feeds the query and which layers form the key/value
    stack. Indices are 1-based block outputs."""

    q_index: int
    kv_indices: tuple[int, ...]
    allow_q_in_kv: bool = False

    def __post_init__(self):
        kv = self.kv_indices
        if not kv:
            raise ConfigurationError("kv_indices must be non-empty")
        if len(set(kv)) != len(kv) or any(b <= a for a, b in zip(kv, kv[1:])):
            raise ConfigurationError(f"kv_indices must strictly increase, got {list(kv)}")
        if self.q_index in kv and not self.allow_q_in_kv:
            raise ConfigurationError(
                f"query layer {self.q_index} duplicated in kv_indices {list(kv)}"
            )


def select_layers(
    all_outputs: Sequence[FeatureMap], sel: LayerSelection
) -> tuple[FeatureMap, FeatureStack]:
    by_index = {m.layer_index: m for m in all_outputs}
    for idx in (sel.q_index, *sel.kv_indices):
        if idx not in by_index:
            raise ConfigurationError(
                f"layer {idx} not among encoder outputs {sorted(by_index)}"
            )
    query = by_index[sel.q_index]
    stack = FeatureStack([by_index[i] for i in sel.kv_indices])
    return query, stack


# ---------------------------------------------------------------------------
# fuser parameters


class _NormAffine:
    def __init__(self, name: str, dim: int):
        self.gain = Param(f"{name}.gain", np.ones(dim))
        self.bias = Param(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor, eps: float) -> Tensor:
        return layer_norm(x, self.gain.value, self.bias.value, eps)

    def params(self) -> list[Param]:
        return [self.gain, self.bias]


class MMFuserParams:
    """All learnable state of the fusion block.

    gamma1 gates the whole branch against the query map, gamma2 gates the
    self-attention refinement inside the branch; both start at zero so the
    block is an identity at init. `self_enabled=False` drops the
    self-attention stage entirely (the cross-attention-only ablation).
    """

    def __init__(
        self,
        dim: int,
        kv_levels: int,
        rng: np.random.Generator,
        variant: AttnVariant = AttnVariant.DEFORMABLE,
        heads: int = 16,
        points: int = 4,
        sra_pool: int = 2,
        gamma_init: float = 0.0,
        self_enabled: bool = True,
        ln_eps: float = 1e-5,
        name: str = "fuser",
    ):
        self.dim = dim
        self.kv_levels = kv_levels
        self.variant = variant
        self.sra_pool = sra_pool
        self.self_enabled = self_enabled
        self.ln_eps = ln_eps
        self.gamma1 = Param(f"{name}.gamma1", np.full(dim, gamma_init))
        self.norm_q = _NormAffine(f"{name}.norm_q", dim)
        self.norm_kv = _NormAffine(f"{name}.norm_kv", dim)
        if variant == AttnVariant.DEFORMABLE:
            self.cross = DeformableParams(
                f"{name}.cross", dim, kv_levels, rng, heads=heads, points=points
            )
        else:
            self.cross = MultiHeadParams(f"{name}.cross", dim, heads, rng)
        if self_enabled:
            self.gamma2 = Param(f"{name}.gamma2", np.full(dim, gamma_init))
            self.norm_sa = _NormAffine(f"{name}.norm_sa", dim)
            if variant == AttnVariant.DEFORMABLE:
                self.self_attn = DeformableParams(
                    f"{name}.self", dim, 1, rng, heads=heads, points=points
                )
            else:
                self.self_attn = MultiHeadParams(f"{name}.self", dim, heads, rng)
        else:
            self.gamma2 = None
            self.norm_sa = None
            self.self_attn = None

    def params(self) -> list[Param]:
        out = [self.gamma1, *self.norm_q.params(), *self.norm_kv.params()]
        out += self.cross.params()
        if self.self_enabled:
            out += [self.gamma2, *self.norm_sa.params(), *self.self_attn.params()]
        return out


class WeightedAvgParams:
    """Unconstrained per-level mixing weights, initialized to 1/L."""

    def __init__(self, levels: int, name: str = "wavg"):
        self.w = Param(f"{name}.w", np.full(levels, 1.0 / levels))

    def params(self) -> list[Param]:
        return [self.w]


class ConcatParams:
    """Projection from channel-concatenated width L*D back to D."""

    def __init__(self, levels: int, dim: int, rng: np.random.Generator, name: str = "concat"):
        a = np.sqrt(6.0 / (levels * dim + dim))
        self.proj = Param(f"{name}.proj", rng.uniform(-a, a, size=(levels * dim, dim)))

    def params(self) -> list[Param]:
        return [self.proj]


class FpnParams:
    """Per-level lateral projections, 3x3 smoothing kernels, and mix weights."""

    def __init__(self, levels: int, dim: int, rng: np.random.Generator, name: str = "fpn"):
        a = np.sqrt(6.0 / (2 * dim))
        a9 = np.sqrt(6.0 / (9 * dim + dim))
        self.lateral_w = [
            Param(f"{name}.lat{i}.w", rng.uniform(-a, a, size=(dim, dim)))
            for i in range(levels)
        ]
        self.lateral_b = [Param(f"{name}.lat{i}.b", np.zeros(dim)) for i in range(levels)]
        self.smooth_w = [
            Param(f"{name}.smooth{i}.w", rng.uniform(-a9, a9, size=(9 * dim, dim)))
            for i in range(levels)
        ]
        self.smooth_b = [Param(f"{name}.smooth{i}.b", np.zeros(dim)) for i in range(levels)]
        self.mix = WeightedAvgParams(levels, name=f"{name}.mix")

    def params(self) -> list[Param]:
        out = []
        for i in range(len(self.lateral_w)):
            out += [self.lateral_w[i], self.lateral_b[i], self.smooth_w[i], self.smooth_b[i]]
        out += self.mix.params()
        return out


# ---------------------------------------------------------------------------
# fusion operations


def _check_compatible(query: FeatureMap, stack: FeatureStack) -> None:
    if query.grid != stack.grid or query.dim != stack.dim:
        raise ShapeError(
            f"query {query.tokens.shape}/{query.grid} incompatible with "
            f"stack {stack.maps[0].tokens.shape}/{stack.grid}"
        )


def mmfuser_forward(
    query: FeatureMap, stack: FeatureStack, params: MMFuserParams
) -> FeatureMap:
    """Gated two-stage fusion.

    Cross stage: normalized query tokens attend over the normalized stack
    (levels kept separate for deformable addressing, flattened token-wise for
    the global/SRA variants). Self stage: the cross output attends over itself,
    gated by gamma2. The whole branch is gated by gamma1 against the query.
    """
    _check_compatible(query, stack)
    h, w = query.grid
    grid = make_reference_grid(h, w)
    eps = params.ln_eps

    nq = params.norm_q(query.tokens, eps)
    normed = [params.norm_kv(m.tokens, eps) for m in stack.maps]
    if params.variant == AttnVariant.DEFORMABLE:
        f_ca = deformable_attention(nq, normed, grid, params.cross)
    else:
        x = concat(normed, axis=-2)
        if params.variant == AttnVariant.GLOBAL:
            f_ca = global_attention(nq, x, params.cross)
        else:
            f_ca = linear_sra_attention(nq, x, grid, params.sra_pool, params.cross)

    if params.self_enabled:
        ns = params.norm_sa(f_ca, eps)
        if params.variant == AttnVariant.DEFORMABLE:
            f_sa_raw = deformable_attention(ns, [ns], grid, params.self_attn)
        elif params.variant == AttnVariant.GLOBAL:
            f_sa_raw = global_attention(ns, ns, params.self_attn)
        else:
            f_sa_raw = linear_sra_attention(ns, ns, grid, params.sra_pool, params.self_attn)
        f_sa = add(f_ca, mul(f_sa_raw, params.gamma2.value))
    else:
        f_sa = f_ca

    out = add(query.tokens, mul(f_sa, params.gamma1.value))
    return FeatureMap(tokens=out, grid=query.grid, layer_index=query.layer_index)


def fuse_concat(stack: FeatureStack, proj: Tensor) -> FeatureMap:
    """Channel-wise concat followed by a learnable (L*D) -> D projection."""
    l, d = len(stack), stack.dim
    if proj.shape != (l * d, d):
        raise ShapeError(f"concat proj shape {proj.shape} != ({l * d}, {d})")
    cat = concat([m.tokens for m in stack.maps], axis=-1)
    out = matmul(cat, proj)
    return FeatureMap(tokens=out, grid=stack.grid, layer_index=stack.maps[-1].layer_index)


def fuse_average(stack: FeatureStack) -> FeatureMap:
    total = stack.maps[0].tokens
    for m in stack.maps[1:]:
        total = add(total, m.tokens)
    out = scale(total, 1.0 / len(stack))
    return FeatureMap(tokens=out, grid=stack.grid, layer_index=stack.maps[-1].layer_index)


def fuse_weighted_average(stack: FeatureStack, params: WeightedAvgParams) -> FeatureMap:
    if params.w.value.shape != (len(stack),):
        raise ShapeError(
            f"weight count {params.w.value.shape} != stack depth {len(stack)}"
        )
    out = None
    for i, m in enumerate(stack.maps):
        term = mul(m.tokens, narrow(params.w.value, 0, i, 1))
        out = term if out is None else add(out, term)
    return FeatureMap(tokens=out, grid=stack.grid, layer_index=stack.maps[-1].layer_index)


_NEIGHBOR_MATRICES: dict[tuple[int, int], np.ndarray] = {}


def _neighbor_matrix(h: int, w: int) -> np.ndarray:
    # (9N, N) 0/1 selection: row (token*9 + tap) picks the tap's neighbor,
    # all-zero rows implement zero padding at the grid border.
    key = (h, w)
    if key not in _NEIGHBOR_MATRICES:
        n = h * w
        sel = np.zeros((9 * n, n))
        taps = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)]
        for i in range(h):
            for j in range(w):
                for t, (di, dj) in enumerate(taps):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        sel[(i * w + j) * 9 + t, ii * w + jj] = 1.0
        _NEIGHBOR_MATRICES[key] = sel
    return _NEIGHBOR_MATRICES[key]


def _conv3x3(tokens: Tensor, grid: tuple[int, int], weight: Tensor, bias: Tensor) -> Tensor:
    h, w = grid
    n, d = tokens.shape[-2], tokens.shape[-1]
    neigh = lmatmul(constant(_neighbor_matrix(h, w)), tokens)  # (..., 9N, D)
    flat = reshape(neigh, neigh.shape[:-2] + (n, 9 * d))
    return add(matmul(flat, weight), bias)


def fuse_fpn(stack: FeatureStack, params: FpnParams) -> FeatureMap:
    """Top-down pyramid adapted to equal-resolution maps.

    Lateral 1x1 projections per level; the top-down pathway degenerates to
    addition (no upsampling needed); per-level 3x3 smoothing; learnable
    weighted average of the refined maps.
    """
    l = len(stack)
    if l < 2:
        raise ShapeError("fpn fusion needs at least two levels")
    laterals = [
        add(matmul(stack.maps[i].tokens, params.lateral_w[i].value), params.lateral_b[i].value)
        for i in range(l)
    ]
    pathway = [None] * l
    pathway[l - 1] = laterals[l - 1]
    for i in range(l - 2, -1, -1):
        pathway[i] = add(laterals[i], pathway[i + 1])
    refined = [
        _conv3x3(pathway[i], stack.grid, params.smooth_w[i].value, params.smooth_b[i].value)
        for i in range(l)
    ]
    out = None
    for i in range(l):
        term = mul(refined[i], narrow(params.mix.w.value, 0, i, 1))
        out = term if out is None else add(out, term)
    return FeatureMap(tokens=out, grid=stack.grid, layer_index=stack.maps[-1].layer_index)


def fuse(
    method: FusionMethod,
    query: FeatureMap,
    stack: FeatureStack | None,
    params=None,
) -> FeatureMap:
    """Dispatch over fusion methods.

    The naive baselines fuse the full selected set — kv stack plus the query
    map — so every method consumes the same information; the fuser splits them
    into query vs key/value roles.
    """
    if method == FusionMethod.LAST_LAYER_ONLY:
        return query
    if stack is None:
        raise ConfigurationError(f"method {method.value} requires a feature stack")
    if method == FusionMethod.MMFUSER:
        if not isinstance(params, MMFuserParams):
            raise ConfigurationError("mmfuser fusion requires MMFuserParams")
        return mmfuser_forward(query, stack, params)
    _check_compatible(query, stack)
    full = FeatureStack(stack.maps + [query])
    if method == FusionMethod.AVERAGE:
        return fuse_average(full)
    if method == FusionMethod.CONCAT:
        if not isinstance(params, ConcatParams):
            raise ConfigurationError("concat fusion requires ConcatParams")
        return fuse_concat(full, params.proj.value)
    if method == FusionMethod.WEIGHTED_AVERAGE:
        if not isinstance(params, WeightedAvgParams):
            raise ConfigurationError("weighted fusion requires WeightedAvgParams")
        return fuse_weighted_average(full, params)
    if method == FusionMethod.FPN:
        if not isinstance(params, FpnParams):
            raise ConfigurationError("fpn fusion requires FpnParams")
        return fuse_fpn(full, params)
    raise ConfigurationError(f"unknown fusion method {method!r}")
