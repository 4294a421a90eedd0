"""Frozen-encoder training of fusion modules and readout heads, evaluation
metrics, the gradient-check suite, and the ablation grids.

The encoder never enters an optimizer here; its weight hash is asserted
unchanged around every training run. All randomness flows from explicit seeds,
and every ablation cell at a given seed consumes the identical batch order, so
rows are comparable across the grid and bit-reproducible across reruns.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .attention import (
    AttnVariant,
    DeformableParams,
    MultiHeadParams,
    deformable_attention,
    global_attention,
    linear_sra_attention,
    make_reference_grid,
)
from .featuregen import (
    DataConfig,
    Dataset,
    ToyViT,
    TrainingDiverged,
    encoder_weight_hash,
    map_encoder_layer,
    scene_cell_labels,
)
from .fusion import (
    ConcatParams,
    FeatureMap,
    FeatureStack,
    FpnParams,
    FusionMethod,
    LayerSelection,
    MMFuserParams,
    WeightedAvgParams,
    fuse,
)
from .optim import cosine_lr, make_optimizer
from .tensor import Param, Tape, Tensor, backward, finite_diff_grad

__all__ = [
    "TrainConfig",
    "AttnConfig",
    "FusionSpec",
    "Metrics",
    "ReadoutHead",
    "FusionModel",
    "EncodedSplit",
    "AblationCell",
    "AblationSpec",
    "encode_dataset",
    "train_readout",
    "evaluate",
    "compute_metrics",
    "train_detail_probe",
    "detail_erasure_probe",
    "gradcheck_suite",
    "GRADCHECK_CASES",
    "relative_error",
    "build_grid",
    "run_ablation",
    "toy_layer_selection",
    "REFERENCE_LAYER_COMBOS",
    "CSV_HEADER",
    "metrics_csv_rows",
    "format_csv",
]

_SEED_FUSION_INIT = 10
_SEED_BATCH = 11
_SEED_PROBE = 12


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 3e-4
    steps: int = 2000
    batch: int = 32
    seed: int = 0
    global_loss_weight: float = 1.0
    detail_loss_weight: float = 1.0
    empty_cell_weight: float = 0.1
    eval_batch: int = 256


@dataclass(frozen=True)
class AttnConfig:
    variant: AttnVariant = AttnVariant.DEFORMABLE
    heads: int = 16
    points: int = 4
    sra_pool: int = 2


@dataclass(frozen=True)
class FusionSpec:
    """One trainable fusion configuration: method, layer roles, attention."""

    method: FusionMethod
    selection: LayerSelection
    attn: AttnConfig = AttnConfig()
    gamma_init: float = 0.0
    self_enabled: bool = True
    ln_eps: float = 1e-5

    @property
    def layers_needed(self) -> tuple[int, ...]:
        if self.method == FusionMethod.LAST_LAYER_ONLY:
            return (self.selection.q_index,)
        return tuple(sorted({*self.selection.kv_indices, self.selection.q_index}))


@dataclass
class Metrics:
    global_acc: float
    detail_acc: float
    detail_f1: float
    loss_curve: list[float] = field(default_factory=list)
    wall_s: float = 0.0


@dataclass
class EncodedSplit:
    """Frozen-encoder features for one split, keyed by layer index."""

    features: dict[int, np.ndarray]  # layer -> (n, N, D)
    global_labels: np.ndarray  # (n,)
    cell_labels: np.ndarray  # (n, N), glyph id or C_d for empty
    grid: tuple[int, int]

    def __len__(self) -> int:
        return len(self.global_labels)


def encode_dataset(
    vit: ToyViT,
    scenes,
    data_cfg: DataConfig,
    layers: tuple[int, ...],
    chunk: int = 256,
) -> EncodedSplit:
    """Run the frozen encoder over scenes, caching only the requested layers."""
    feats: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    for lo in range(0, len(scenes), chunk):
        imgs = np.stack([s.image for s in scenes[lo : lo + chunk]])
        for m in vit.forward_features(imgs):
            if m.layer_index in feats:
                feats[m.layer_index].append(m.tokens.data)
    return EncodedSplit(
        features={l: np.concatenate(parts) for l, parts in feats.items()},
        global_labels=np.array([s.global_label for s in scenes], dtype=np.int64),
        cell_labels=np.stack([scene_cell_labels(s, data_cfg) for s in scenes]),
        grid=data_cfg.grid,
    )


class ReadoutHead:
    """Linear global head on mean-pooled tokens plus a per-token detail head."""

    def __init__(self, dim: int, n_global: int, n_detail: int, rng: np.random.Generator):
        ag = math.sqrt(6.0 / (dim + n_global))
        ad = math.sqrt(6.0 / (dim + n_detail))
        self.global_w = Param("head.global.w", rng.uniform(-ag, ag, size=(dim, n_global)))
        self.global_b = Param("head.global.b", np.zeros(n_global))
        self.detail_w = Param("head.detail.w", rng.uniform(-ad, ad, size=(dim, n_detail)))
        self.detail_b = Param("head.detail.b", np.zeros(n_detail))

    def params(self) -> list[Param]:
        return [self.global_w, self.global_b, self.detail_w, self.detail_b]

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        pooled = tt.tmean(tokens, axis=-2)
        g = tt.add(tt.matmul(pooled, self.global_w.value), self.global_b.value)
        d = tt.add(tt.matmul(tokens, self.detail_w.value), self.detail_b.value)
        return g, d


class FusionModel:
    """Fusion params plus readout heads over frozen encoder features."""

    def __init__(self, spec: FusionSpec, dim: int, n_global: int, n_detail: int, seed: int):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence((seed, _SEED_FUSION_INIT)))
        kv_levels = len(spec.selection.kv_indices)
        m = spec.method
        if m == FusionMethod.MMFUSER:
            self.fusion_params = MMFuserParams(
                dim,
                kv_levels,
                rng,
                variant=spec.attn.variant,
                heads=spec.attn.heads,
                points=spec.attn.points,
                sra_pool=spec.attn.sra_pool,
                gamma_init=spec.gamma_init,
                self_enabled=spec.self_enabled,
                ln_eps=spec.ln_eps,
            )
        elif m == FusionMethod.CONCAT:
            self.fusion_params = ConcatParams(kv_levels + 1, dim, rng)
        elif m == FusionMethod.WEIGHTED_AVERAGE:
            self.fusion_params = WeightedAvgParams(kv_levels + 1)
        elif m == FusionMethod.FPN:
            self.fusion_params = FpnParams(kv_levels + 1, dim, rng)
        else:
            self.fusion_params = None
        self.head = ReadoutHead(dim, n_global, n_detail, rng)

    def params(self) -> list[Param]:
        out = [] if self.fusion_params is None else list(self.fusion_params.params())
        return out + self.head.params()

    def fused_map(self, batch: dict[int, np.ndarray], grid: tuple[int, int]) -> FeatureMap:
        sel = self.spec.selection
        query = FeatureMap(tt.constant(batch[sel.q_index]), grid, sel.q_index)
        stack = None
        if self.spec.method != FusionMethod.LAST_LAYER_ONLY:
            stack = FeatureStack(
                [FeatureMap(tt.constant(batch[i]), grid, i) for i in sel.kv_indices]
            )
        return fuse(self.spec.method, query, stack, self.fusion_params)

    def forward(self, batch: dict[int, np.ndarray], grid: tuple[int, int]):
        fused = self.fused_map(batch, grid)
        return self.head(fused.tokens)


def _weighted_detail_ce(d_logits: Tensor, cells: np.ndarray, empty_class: int, empty_w: float) -> Tensor:
    logp = tt.log_softmax_last(d_logits)
    picked = tt.gather_last(logp, cells)
    w = np.where(cells == empty_class, empty_w, 1.0)
    w = w / w.sum()
    return tt.scale(tt.tsum(tt.mul(picked, tt.constant(w))), -1.0)


def _global_ce(g_logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = tt.log_softmax_last(g_logits)
    picked = tt.gather_last(logp, labels)
    return tt.scale(tt.tsum(picked), -1.0 / labels.size)


def compute_metrics(
    g_pred: np.ndarray,
    d_pred: np.ndarray,
    g_labels: np.ndarray,
    cell_labels: np.ndarray,
    n_glyph_classes: int,
) -> tuple[float, float, float]:
    """(global_acc, detail_acc, detail_f1) from hard predictions.

    detail_acc counts only ground-truth-occupied cells. detail_f1 is the macro
    F1 over glyph classes with counts taken over all cells; 0/0 classes score 0.
    """
    empty = n_glyph_classes
    global_acc = float((g_pred == g_labels).mean())
    occupied = cell_labels != empty
    if occupied.any():
        detail_acc = float((d_pred[occupied] == cell_labels[occupied]).mean())
    else:
        detail_acc = 0.0
    f1s = []
    for g in range(n_glyph_classes):
        tp = int(((d_pred == g) & (cell_labels == g)).sum())
        fp = int(((d_pred == g) & (cell_labels != g)).sum())
        fn = int(((d_pred != g) & (cell_labels == g)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return global_acc, detail_acc, float(np.mean(f1s))


def evaluate(model: FusionModel, split: EncodedSplit, n_glyph_classes: int, batch: int = 256) -> Metrics:
    """Held-out metrics, accumulated over batches by exact counting so the
    result is invariant to the evaluation batch size."""
    if len(split) == 0:
        raise ValueError("evaluate on empty split")
    t0 = time.perf_counter()
    g_preds, d_preds = [], []
    for lo in range(0, len(split), batch):
        sl = {l: a[lo : lo + batch] for l, a in split.features.items()}
        g_logits, d_logits = model.forward(sl, split.grid)
        g_preds.append(g_logits.data.argmax(axis=-1))
        d_preds.append(d_logits.data.argmax(axis=-1))
    ga, da, f1 = compute_metrics(
        np.concatenate(g_preds),
        np.concatenate(d_preds),
        split.global_labels,
        split.cell_labels,
        n_glyph_classes,
    )
    return Metrics(global_acc=ga, detail_acc=da, detail_f1=f1, wall_s=time.perf_counter() - t0)


def train_readout(
    spec: FusionSpec,
    train_split: EncodedSplit,
    test_split: EncodedSplit,
    cfg: TrainConfig,
    n_global: int,
    n_glyph_classes: int,
) -> tuple[FusionModel, Metrics]:
    """Optimize fusion params + heads on the joint loss over frozen features.

    Deterministic given (spec, cfg): init and batch order draw from tagged
    seed streams. Raises TrainingDiverged on NaN loss, carrying the params
    from the last completed step.
    """
    dim = next(iter(train_split.features.values())).shape[-1]
    model = FusionModel(spec, dim, n_global, n_glyph_classes + 1, cfg.seed)
    params = model.params()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    order_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _SEED_BATCH)))
    n = len(train_split)
    order = order_rng.permutation(n)
    cursor = 0
    losses: list[float] = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        if cursor + cfg.batch > n:
            order = order_rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch]
        cursor += cfg.batch
        batch = {l: a[idx] for l, a in train_split.features.items()}
        opt.zero_grad()
        try:
            with Tape() as tape:
                g_logits, d_logits = model.forward(batch, train_split.grid)
                loss = tt.add(
                    tt.scale(_global_ce(g_logits, train_split.global_labels[idx]), cfg.global_loss_weight),
                    tt.scale(
                        _weighted_detail_ce(
                            d_logits, train_split.cell_labels[idx], n_glyph_classes, cfg.empty_cell_weight
                        ),
                        cfg.detail_loss_weight,
                    ),
                )
        except ValueError as exc:
            raise TrainingDiverged(
                f"non-finite forward at step {step}: {exc}", last_good=params
            ) from exc
        lv = loss.item()
        if not math.isfinite(lv):
            raise TrainingDiverged(f"loss non-finite at step {step}", last_good=params)
        backward(loss, tape)
        opt.step(cosine_lr(cfg.lr, step, cfg.steps))
        losses.append(lv)
    metrics = evaluate(model, test_split, n_glyph_classes, batch=cfg.eval_batch)
    metrics.loss_curve = losses
    metrics.wall_s = time.perf_counter() - t0
    return model, metrics


# ---------------------------------------------------------------------------
# linear probes (the detail-erasure measurement)


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.02
    steps: int = 200
    batch_tokens: int = 8192
    empty_cell_weight: float = 0.1


def train_detail_probe(
    features: np.ndarray,
    cell_labels: np.ndarray,
    n_glyph_classes: int,
    cfg: ProbeConfig = ProbeConfig(),
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic probe per token; returns (W, b)."""
    dim = features.shape[-1]
    x = features.reshape(-1, dim)
    y = cell_labels.reshape(-1)
    w_param = Param("probe.w", np.zeros((dim, n_glyph_classes + 1)))
    b_param = Param("probe.b", np.zeros(n_glyph_classes + 1))
    opt = make_optimizer("adam", [w_param, b_param], cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SEED_PROBE)))
    order = rng.permutation(x.shape[0])
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_tokens > x.shape[0]:
            order = rng.permutation(x.shape[0])
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_tokens]
        cursor += cfg.batch_tokens
        opt.zero_grad()
        with Tape() as tape:
            logits = tt.add(tt.matmul(tt.constant(x[idx]), w_param.value), b_param.value)
            loss = _weighted_detail_ce(logits, y[idx], n_glyph_classes, cfg.empty_cell_weight)
        backward(loss, tape)
        opt.step(cosine_lr(cfg.lr, step, cfg.steps))
    return w_param.value.data, b_param.value.data


def probe_detail_acc(
    wb: tuple[np.ndarray, np.ndarray],
    features: np.ndarray,
    cell_labels: np.ndarray,
    n_glyph_classes: int,
) -> float:
    w, b = wb
    pred = (features.reshape(-1, w.shape[0]) @ w + b).argmax(axis=-1)
    y = cell_labels.reshape(-1)
    mask = y != n_glyph_classes
    return float((pred[mask] == y[mask]).mean())


def detail_erasure_probe(
    vit: ToyViT,
    dataset: Dataset,
    early_layer: int = 1,
    probe_cfg: ProbeConfig = ProbeConfig(),
    seed: int = 0,
) -> dict:
    """Fixed probe protocol: identical linear probes on an early layer and the
    final layer; reports the early-minus-final detail accuracy gap."""
    final_layer = vit.cfg.depth
    layers = (early_layer, final_layer)
    tr = encode_dataset(vit, dataset.train, dataset.config, layers)
    te = encode_dataset(vit, dataset.test, dataset.config, layers)
    accs = {}
    for layer in layers:
        wb = train_detail_probe(
            tr.features[layer], tr.cell_labels, dataset.config.glyph_classes, probe_cfg, seed
        )
        accs[layer] = probe_detail_acc(
            wb, te.features[layer], te.cell_labels, dataset.config.glyph_classes
        )
    return {
        "early_layer": early_layer,
        "final_layer": final_layer,
        "early_acc": accs[early_layer],
        "final_acc": accs[final_layer],
        "gap": accs[early_layer] - accs[final_layer],
    }


# ---------------------------------------------------------------------------
# gradient-check suite


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def _safe_points(rng: np.random.Generator, shape, h: int, w: int) -> np.ndarray:
    """Sample normalized points at least 2e-3 cells away from bilinear kinks
    (lattice lines and the clamp border), so finite differences stay on one
    smooth piece."""
    while True:
        pts = rng.uniform(0.08, 0.92, size=shape)
        u = pts[..., 0] * w - 0.5
        v = pts[..., 1] * h - 0.5
        du = np.abs(u - np.round(u))
        dv = np.abs(v - np.round(v))
        if du.min() > 2e-3 and dv.min() > 2e-3:
            return pts


def _loss_of(out: Tensor, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    w = rng.normal(size=out.shape)
    return tt.tsum(tt.mul(out, tt.constant(w))), w


def _check(build, params: list[Param], h: float = 1e-5) -> float:
    for p in params:
        p.zero_grad()
    loss, tape = build()
    backward(loss, tape)
    analytic = {id(p): p.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        fd = finite_diff_grad(lambda: build()[0].item(), p, h)
        worst = max(worst, relative_error(analytic[id(p)], fd))
    return worst


def _dims(rng: np.random.Generator, lo: int = 2, hi: int = 8) -> int:
    return int(rng.integers(lo, hi + 1))


def _case_matmul(rng):
    a = Param("a", rng.normal(size=(_dims(rng), _dims(rng))))
    b = Param("b", rng.normal(size=(a.value.shape[1], _dims(rng))))
    wl = rng.normal(size=(a.value.shape[0], b.value.shape[1]))

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(tt.matmul(a.value, b.value), tt.constant(wl)))
        return loss, tape

    return build, [a, b]


def _case_bmm(rng):
    bsz, m, k, n = 2, _dims(rng, 2, 4), _dims(rng, 2, 4), _dims(rng, 2, 4)
    a = Param("a", rng.normal(size=(bsz, m, k)))
    b = Param("b", rng.normal(size=(bsz, k, n)))
    wl = rng.normal(size=(bsz, m, n))

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(tt.bmm(a.value, b.value), tt.constant(wl)))
        return loss, tape

    return build, [a, b]


def _case_lmatmul(rng):
    p = Param("p", rng.normal(size=(_dims(rng, 2, 4), _dims(rng, 2, 4))))
    x = Param("x", rng.normal(size=(2, p.value.shape[1], _dims(rng, 2, 4))))
    wl = rng.normal(size=(2, p.value.shape[0], x.value.shape[-1]))

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(tt.lmatmul(p.value, x.value), tt.constant(wl)))
        return loss, tape

    return build, [p, x]


def _case_elementwise(rng):
    a = Param("a", rng.normal(size=(3, _dims(rng))))
    b = Param("b", rng.normal(size=(a.value.shape[-1],)))  # broadcast add/mul
    wl = rng.normal(size=a.value.shape)

    def build():
        with Tape() as tape:
            y = tt.add(tt.mul(a.value, b.value), tt.neg(tt.scale(a.value, 0.7)))
            y = tt.sub(y, b.value)
            loss = tt.tsum(tt.mul(y, tt.constant(wl)))
        return loss, tape

    return build, [a, b]


def _case_reductions(rng):
    a = Param("a", rng.normal(size=(_dims(rng), _dims(rng))))
    wl = rng.normal(size=(a.value.shape[1],))

    def build():
        with Tape() as tape:
            y = tt.tsum(a.value, axis=0)
            z = tt.tmean(a.value, axis=0)
            loss = tt.add(
                tt.tsum(tt.mul(y, tt.constant(wl))), tt.tmean(tt.mul(z, tt.constant(wl)))
            )
        return loss, tape

    return build, [a]


def _case_softmax(rng):
    a = Param("a", rng.normal(size=(3, _dims(rng))))
    wl = rng.normal(size=a.value.shape)

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(tt.softmax_last(a.value), tt.constant(wl)))
        return loss, tape

    return build, [a]


def _case_log_softmax(rng):
    a = Param("a", rng.normal(size=(3, _dims(rng))))
    idx = rng.integers(0, a.value.shape[-1], size=(3,))

    def build():
        with Tape() as tape:
            loss = tt.tmean(tt.gather_last(tt.log_softmax_last(a.value), idx))
        return loss, tape

    return build, [a]


def _case_layer_norm(rng):
    d = _dims(rng)
    x = Param("x", rng.normal(size=(3, d)))
    g = Param("g", rng.normal(size=(d,)))
    b = Param("b", rng.normal(size=(d,)))
    wl = rng.normal(size=(3, d))

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(tt.layer_norm(x.value, g.value, b.value, 1e-5), tt.constant(wl)))
        return loss, tape

    return build, [x, g, b]


def _case_gelu(rng):
    a = Param("a", rng.normal(size=(2, _dims(rng))))
    wl = rng.normal(size=a.value.shape)

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(tt.gelu(a.value), tt.constant(wl)))
        return loss, tape

    return build, [a]


def _case_shapes(rng):
    # concat, narrow, swap_axes, reshape, expand_batch composed into one loss
    a = Param("a", rng.normal(size=(2, 3)))
    b = Param("b", rng.normal(size=(2, 3)))
    wl = rng.normal(size=(2, 2, 3))

    def build():
        with Tape() as tape:
            cat = tt.concat([a.value, b.value], axis=0)  # (4,3)
            sl = tt.narrow(cat, 0, 1, 2)  # (2,3)
            sw = tt.swap_axes(tt.reshape(cat, (2, 2, 3)), 0, 1)
            y = tt.add(tt.expand_batch(sl, 2), sw)
            loss = tt.tsum(tt.mul(y, tt.constant(wl)))
        return loss, tape

    return build, [a, b]


def _case_bilinear(rng):
    h, w, c = _dims(rng, 2, 4), _dims(rng, 2, 4), 2
    m = Param("m", rng.normal(size=(h, w, c)))
    pts = Param("pts", _safe_points(rng, (5, 2), h, w))
    wl = rng.normal(size=(5, c))

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(tt.bilinear_sample(m.value, pts.value), tt.constant(wl)))
        return loss, tape

    return build, [m, pts]


def _case_deform_sample(rng):
    b, l, h, w, m, k, n, c = 2, 2, 3, 3, 2, 2, 2, 2
    maps = Param("maps", rng.normal(size=(b, l, h, w, m, c)))
    pts = Param("pts", _safe_points(rng, (b, n, m, l, k, 2), h, w))
    wl = rng.normal(size=(b, n, m, l, k, c))

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(tt.deform_sample(maps.value, pts.value), tt.constant(wl)))
        return loss, tape

    return build, [maps, pts]


def _case_global_attention(rng):
    d, heads = 4, 2
    p = MultiHeadParams("ga", d, heads, rng)
    q = Param("q", rng.normal(size=(3, d)))
    kv = Param("kv", rng.normal(size=(5, d)))
    wl = rng.normal(size=(3, d))

    def build():
        with Tape() as tape:
            loss = tt.tsum(tt.mul(global_attention(q.value, kv.value, p), tt.constant(wl)))
        return loss, tape

    return build, [q, kv, *p.params()]


def _case_sra_attention(rng):
    d, heads = 4, 2
    grid = make_reference_grid(2, 2)
    p = MultiHeadParams("sra", d, heads, rng)
    q = Param("q", rng.normal(size=(4, d)))
    kv = Param("kv", rng.normal(size=(8, d)))  # two levels on a 2x2 grid
    wl = rng.normal(size=(4, d))

    def build():
        with Tape() as tape:
            out = linear_sra_attention(q.value, kv.value, grid, 2, p)
            loss = tt.tsum(tt.mul(out, tt.constant(wl)))
        return loss, tape

    return build, [q, kv, *p.params()]


def _case_deformable_attention(rng):
    d, heads, points, levels = 4, 2, 2, 2
    grid = make_reference_grid(2, 2)
    p = DeformableParams("da", d, levels, rng, heads=heads, points=points)
    # Nudge projections off their zero init so gradients flow everywhere,
    # keeping offsets small enough to stay clear of sampling kinks.
    p.offset_w.assign(rng.normal(size=p.offset_w.value.shape) * 0.05)
    p.weight_w.assign(rng.normal(size=p.weight_w.value.shape) * 0.3)
    p.offset_b.assign(p.offset_b.value.data * 0.37)
    q = Param("q", rng.normal(size=(4, d)))
    lv = [Param(f"lv{i}", rng.normal(size=(4, d))) for i in range(levels)]
    wl = rng.normal(size=(4, d))

    def build():
        with Tape() as tape:
            out = deformable_attention(q.value, [x.value for x in lv], grid, p)
            loss = tt.tsum(tt.mul(out, tt.constant(wl)))
        return loss, tape

    return build, [q, *lv, *p.params()]


def _case_mmfuser_block(rng):
    d = 4
    grid_hw = (2, 2)
    params = MMFuserParams(
        d, 2, rng, variant=AttnVariant.DEFORMABLE, heads=2, points=1, gamma_init=0.37
    )
    params.cross.offset_w.assign(rng.normal(size=params.cross.offset_w.value.shape) * 0.05)
    params.cross.weight_w.assign(rng.normal(size=params.cross.weight_w.value.shape) * 0.3)
    params.self_attn.offset_w.assign(rng.normal(size=params.self_attn.offset_w.value.shape) * 0.05)
    q = Param("q", rng.normal(size=(4, d)))
    s1 = Param("s1", rng.normal(size=(4, d)))
    s2 = Param("s2", rng.normal(size=(4, d)))
    wl = rng.normal(size=(4, d))

    def build():
        with Tape() as tape:
            query = FeatureMap(q.value, grid_hw, 9)
            stack = FeatureStack([FeatureMap(s1.value, grid_hw, 2), FeatureMap(s2.value, grid_hw, 5)])
            out = fuse(FusionMethod.MMFUSER, query, stack, params)
            loss = tt.tsum(tt.mul(out.tokens, tt.constant(wl)))
        return loss, tape

    return build, [q, s1, s2, *params.params()]


def _case_fusion_baselines(rng):
    d = 3
    grid_hw = (2, 2)
    cp = ConcatParams(2, d, rng)
    wp = WeightedAvgParams(2)
    fp = FpnParams(2, d, rng)
    a = Param("a", rng.normal(size=(4, d)))
    b = Param("b", rng.normal(size=(4, d)))
    wl = rng.normal(size=(4, d))

    def build():
        with Tape() as tape:
            query = FeatureMap(b.value, grid_hw, 7)
            stack = FeatureStack([FeatureMap(a.value, grid_hw, 2)])
            y1 = fuse(FusionMethod.CONCAT, query, stack, cp)
            y2 = fuse(FusionMethod.WEIGHTED_AVERAGE, query, stack, wp)
            y3 = fuse(FusionMethod.FPN, query, stack, fp)
            y4 = fuse(FusionMethod.AVERAGE, query, stack, None)
            tot = tt.add(tt.add(y1.tokens, y2.tokens), tt.add(y3.tokens, y4.tokens))
            loss = tt.tsum(tt.mul(tot, tt.constant(wl)))
        return loss, tape

    return build, [a, b, *cp.params(), *wp.params(), *fp.params()]


GRADCHECK_CASES = {
    "matmul": _case_matmul,
    "bmm": _case_bmm,
    "lmatmul": _case_lmatmul,
    "elementwise": _case_elementwise,
    "reductions": _case_reductions,
    "softmax_last": _case_softmax,
    "log_softmax_last": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "gelu": _case_gelu,
    "shape_ops": _case_shapes,
    "bilinear_sample": _case_bilinear,
    "deform_sample": _case_deform_sample,
    "global_attention": _case_global_attention,
    "linear_sra_attention": _case_sra_attention,
    "deformable_attention": _case_deformable_attention,
    "mmfuser_block": _case_mmfuser_block,
    "fusion_baselines": _case_fusion_baselines,
}

# The composed block and attention variants are costlier per instance; the
# per-op cases stay at the full instance count.
_EXPENSIVE_CASES = {"mmfuser_block", "deformable_attention", "linear_sra_attention"}


def gradcheck_suite(
    tolerance: float = 1e-5,
    seed: int = 0,
    instances: int = 50,
    h: float = 1e-5,
    cases: dict | None = None,
) -> dict:
    """Finite-difference checks for every differentiable op and the composed
    fusion block. Returns a report with per-case max relative error; failures
    are report entries, not exceptions."""
    cases = GRADCHECK_CASES if cases is None else cases
    report: dict = {"tolerance": tolerance, "seed": seed, "instances": instances, "cases": {}}
    ok = True
    for name, case in cases.items():
        n_inst = max(10, instances // 2) if name in _EXPENSIVE_CASES else instances
        rng = np.random.default_rng(np.random.SeedSequence((seed, hash(name) % (2**32))))
        worst = 0.0
        for _ in range(n_inst):
            build, params = case(rng)
            worst = max(worst, _check(build, params, h))
        passed = worst < tolerance
        ok = ok and passed
        report["cases"][name] = {"max_rel_err": worst, "instances": n_inst, "pass": passed}
    report["pass"] = ok
    return report


# ---------------------------------------------------------------------------
# ablation grids

CSV_HEADER = [
    "run_id",
    "method",
    "q_layer",
    "kv_layers",
    "attn",
    "seed",
    "steps",
    "global_acc",
    "detail_acc",
    "detail_f1",
    "wall_s",
    "config_hash",
]

# Layer combinations at the reference encoder depth (24 blocks, query 23);
# a proportional floor mapping rescales them to the toy depth.
REFERENCE_LAYER_COMBOS = {
    "shallow": (23, (1, 3, 5, 7)),
    "middle": (23, (9, 11, 13, 15)),
    "deep": (23, (17, 19, 21, 24)),
    "nonuniform": (23, (5, 8, 11, 20)),
    "uniform": (23, (3, 8, 13, 18)),
}


def toy_layer_selection(combo: str, depth: int) -> LayerSelection:
    """Rescale a reference-depth layer combo to `depth` encoder blocks.

    Mapping is floor(i * depth / 24) clamped to >= 1; collisions bump later
    entries upward so the selection stays strictly increasing.
    """
    q_ref, kv_ref = REFERENCE_LAYER_COMBOS[combo]
    q = map_encoder_layer(q_ref, depth)
    kv: list[int] = []
    for i in kv_ref:
        v = map_encoder_layer(i, depth)
        while v in kv:
            v += 1
        if v > depth:
            raise ValueError(f"combo {combo} does not fit depth {depth}")
        kv.append(v)
    return LayerSelection(q_index=q, kv_indices=tuple(kv))


@dataclass(frozen=True)
class AblationCell:
    name: str
    spec: FusionSpec


@dataclass(frozen=True)
class AblationSpec:
    name: str
    cells: tuple[AblationCell, ...]
    seeds: tuple[int, ...]


def build_grid(
    name: str,
    depth: int,
    attn: AttnConfig,
    seeds: tuple[int, ...],
    selection: LayerSelection | None = None,
) -> AblationSpec:
    """The four named grids: fusion methods, attention variants, layer
    combinations, and internal module composition."""
    sel = selection or toy_layer_selection("uniform", depth)
    cells: list[AblationCell]
    if name == "table1":
        cells = [
            AblationCell(m.value, FusionSpec(method=m, selection=sel, attn=attn))
            for m in (
                FusionMethod.LAST_LAYER_ONLY,
                FusionMethod.CONCAT,
                FusionMethod.AVERAGE,
                FusionMethod.WEIGHTED_AVERAGE,
                FusionMethod.FPN,
                FusionMethod.MMFUSER,
            )
        ]
    elif name == "table5":
        cells = [
            AblationCell(
                v.value,
                FusionSpec(
                    method=FusionMethod.MMFUSER, selection=sel, attn=replace(attn, variant=v)
                ),
            )
            for v in (AttnVariant.GLOBAL, AttnVariant.LINEAR_SRA, AttnVariant.DEFORMABLE)
        ]
    elif name == "table6":
        cells = [
            AblationCell(
                "baseline", FusionSpec(method=FusionMethod.LAST_LAYER_ONLY, selection=sel, attn=attn)
            )
        ]
        cells += [
            AblationCell(
                combo,
                FusionSpec(
                    method=FusionMethod.MMFUSER,
                    selection=toy_layer_selection(combo, depth),
                    attn=attn,
                ),
            )
            for combo in ("shallow", "middle", "deep", "nonuniform", "uniform")
        ]
    elif name == "table7":
        cells = [
            AblationCell(
                "baseline", FusionSpec(method=FusionMethod.LAST_LAYER_ONLY, selection=sel, attn=attn)
            ),
            AblationCell(
                "cross_attn",
                FusionSpec(
                    method=FusionMethod.MMFUSER, selection=sel, attn=attn, self_enabled=False
                ),
            ),
            AblationCell(
                "cross_self",
                FusionSpec(method=FusionMethod.MMFUSER, selection=sel, attn=attn, self_enabled=True),
            ),
        ]
    else:
        raise ValueError(f"unknown ablation grid {name!r}")
    return AblationSpec(name=name, cells=tuple(cells), seeds=tuple(seeds))


# Worker context is inherited by forked ablation workers; one grid at a time.
_ABLATION_CTX: dict | None = None


def _ablation_cell_worker(item: tuple[int, int]):
    ci, si = item
    ctx = _ABLATION_CTX
    cell = ctx["cells"][ci]
    seed = ctx["seeds"][si]
    try:
        _, metrics = train_readout(
            cell.spec,
            ctx["train_split"],
            ctx["test_split"],
            replace(ctx["cfg"], seed=seed),
            ctx["n_global"],
            ctx["n_glyph"],
        )
        metrics.loss_curve = []  # keep worker payloads small
        return ci, si, metrics, None
    except Exception as exc:  # cell failures recorded, grid continues
        return ci, si, None, repr(exc)


def run_ablation(
    spec: AblationSpec,
    dataset: Dataset,
    vit: ToyViT,
    cfg: TrainConfig,
    config_hash: str = "",
    jobs: int = 1,
) -> tuple[list[dict], list[dict]]:
    """One row per (cell, seed) plus a per-cell seed-mean row.

    Encodes the frozen features once for the union of layers the grid needs.
    With jobs > 1, cells run in forked worker processes; rows are merged in
    grid order regardless of completion order, so output is identical to a
    serial run. A failing cell lands in the error list and the grid continues.
    """
    global _ABLATION_CTX
    before = encoder_weight_hash(vit)
    layers = tuple(sorted({l for c in spec.cells for l in c.spec.layers_needed}))
    train_split = encode_dataset(vit, dataset.train, dataset.config, layers)
    test_split = encode_dataset(vit, dataset.test, dataset.config, layers)
    _ABLATION_CTX = {
        "cells": spec.cells,
        "seeds": spec.seeds,
        "train_split": train_split,
        "test_split": test_split,
        "cfg": cfg,
        "n_global": dataset.config.bg_classes,
        "n_glyph": dataset.config.glyph_classes,
    }
    work = [(ci, si) for ci in range(len(spec.cells)) for si in range(len(spec.seeds))]
    results: dict[tuple[int, int], tuple[Metrics | None, str | None]] = {}
    try:
        if jobs > 1:
            import multiprocessing as mp
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(
                max_workers=jobs, mp_context=mp.get_context("fork")
            ) as ex:
                for ci, si, metrics, err in ex.map(_ablation_cell_worker, work):
                    results[(ci, si)] = (metrics, err)
        else:
            for item in work:
                ci, si, metrics, err = _ablation_cell_worker(item)
                results[(ci, si)] = (metrics, err)
    finally:
        _ABLATION_CTX = None

    rows: list[dict] = []
    errors: list[dict] = []
    for ci, cell in enumerate(spec.cells):
        per_seed: list[Metrics] = []
        for si, seed in enumerate(spec.seeds):
            metrics, err = results[(ci, si)]
            if err is not None:
                errors.append({"run_id": f"{spec.name}-{cell.name}-s{seed}", "error": err})
                continue
            per_seed.append(metrics)
            rows.append(_row(f"{spec.name}-{cell.name}-s{seed}", cell, seed, cfg.steps, metrics, config_hash))
        if per_seed:
            mean = Metrics(
                global_acc=float(np.mean([m.global_acc for m in per_seed])),
                detail_acc=float(np.mean([m.detail_acc for m in per_seed])),
                detail_f1=float(np.mean([m.detail_f1 for m in per_seed])),
                wall_s=float(np.mean([m.wall_s for m in per_seed])),
            )
            rows.append(
                _row(f"{spec.name}-{cell.name}-mean", cell, "mean", cfg.steps, mean, config_hash)
            )
    after = encoder_weight_hash(vit)
    if before != after:
        raise RuntimeError("frozen encoder weights changed during ablation")
    return rows, errors


def _row(run_id: str, cell: AblationCell, seed, steps: int, m: Metrics, config_hash: str) -> dict:
    s = cell.spec
    kv = (
        ""
        if s.method == FusionMethod.LAST_LAYER_ONLY
        else "|".join(str(i) for i in s.selection.kv_indices)
    )
    return {
        "run_id": run_id,
        "method": s.method.value if s.self_enabled else f"{s.method.value}-cross-only",
        "q_layer": str(s.selection.q_index),
        "kv_layers": kv,
        "attn": s.attn.variant.value if s.method == FusionMethod.MMFUSER else "",
        "seed": str(seed),
        "steps": str(steps),
        "global_acc": repr(m.global_acc),
        "detail_acc": repr(m.detail_acc),
        "detail_f1": repr(m.detail_f1),
        "wall_s": repr(round(m.wall_s, 3)),
        "config_hash": config_hash,
    }


def metrics_csv_rows(metrics: Metrics, run_id: str, cell: AblationCell, seed: int, steps: int, config_hash: str) -> dict:
    return _row(run_id, cell, seed, steps, metrics, config_hash)


def format_csv(rows: list[dict]) -> str:
    lines = [",".join(CSV_HEADER)]
    for r in rows:
        lines.append(",".join(r[k] for k in CSV_HEADER))
    return "\n".join(lines) + "\n"
