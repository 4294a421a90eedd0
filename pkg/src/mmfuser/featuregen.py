"""Synthetic glyph scenes and a small vision transformer trained on global
labels only.

Scenes pair a global class (an oriented low-frequency background texture)
with a few tiny glyphs stamped inside single patches. Pretraining the encoder
on the global label alone pushes deep layers toward global semantics and away
from per-patch glyph detail — measured, not assumed, by the probe protocol in
the harness. That gap is what fusion is asked to close.

Everything here is a pure function of (seed, config); rerenders and reruns
are bit-identical.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .attention import MultiHeadParams, multi_head_attention
from .fusion import FeatureMap
from .optim import Adam, cosine_lr
from .tensor import Param, Tape, Tensor, backward

__all__ = [
    "DataConfig",
    "ToyViTConfig",
    "GlyphScene",
    "Dataset",
    "ToyViT",
    "TrainingDiverged",
    "glyph_atlas",
    "render_scene",
    "make_dataset",
    "dataset_manifest",
    "scene_cell_labels",
    "pretrain_toy_vit",
    "cosine_similarity_map",
    "encoder_weight_hash",
    "map_encoder_layer",
]

# SeedSequence tags so the per-purpose streams never collide.
_SEED_TRAIN_SPLIT = 0
_SEED_TEST_SPLIT = 1
_SEED_VIT_INIT = 2
_SEED_BATCH_ORDER = 3

_GLYPH_ATLAS_SEED = 1315423911


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 64
    patch: int = 8
    bg_classes: int = 8
    glyph_classes: int = 16
    max_glyphs: int = 3
    glyph_amp: float = 0.22
    bg_amp: float = 0.18
    noise: float = 0.02
    train_scenes: int = 4096
    test_scenes: int = 1024

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError("image_size must be divisible by patch")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return (g, g)

    @property
    def tokens(self) -> int:
        g = self.image_size // self.patch
        return g * g


@dataclass(frozen=True)
class ToyViTConfig:
    image_size: int = 64
    patch: int = 8
    embed_dim: int = 64
    depth: int = 12
    heads: int = 4
    mlp_ratio: float = 2.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError("image_size must be divisible by patch")

    @property
    def tokens(self) -> int:
        g = self.image_size // self.patch
        return g * g

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return (g, g)


@dataclass
class GlyphScene:
    image: np.ndarray  # (S, S) float64 in [0, 1]
    global_label: int
    glyphs: list[tuple[int, tuple[int, int]]]  # (glyph_id, (cell_i, cell_j))


@dataclass
class Dataset:
    train: list[GlyphScene]
    test: list[GlyphScene]
    seed: int
    config: DataConfig


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


def glyph_atlas(cfg: DataConfig) -> np.ndarray:
    """(C_d, g, g) binary glyph rasters, g = patch - 2, from a fixed seed.

    Patterns are resampled until pairwise Hamming distance is at least a
    quarter of the raster, so classes stay linearly distinguishable.
    """
    g = cfg.patch - 2
    rng = np.random.default_rng(_GLYPH_ATLAS_SEED)
    min_dist = (g * g) // 4
    atlas: list[np.ndarray] = []
    while len(atlas) < cfg.glyph_classes:
        cand = (rng.random((g, g)) < 0.5).astype(np.float64)
        if all(np.sum(cand != a) >= min_dist for a in atlas):
            atlas.append(cand)
    return np.stack(atlas)


def render_scene(cfg: DataConfig, seed) -> GlyphScene:
    """Deterministic raster: class texture background plus glyph stamps.

    Backgrounds are sinusoidal gratings — orientation and wavelength encode
    the class, phase is random per scene — plus clipped pixel noise. Glyphs
    are signed stamps centered in distinct patch cells; amplitudes are chosen
    so no pixel ever clips, which keeps stamped glyphs exactly recoverable by
    subtracting a glyph-free rerender.
    """
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    label = int(rng.integers(cfg.bg_classes))
    orientations = max(1, cfg.bg_classes // 2)
    theta = math.pi * (label % orientations) / orientations
    wavelength = 24.0 if label < orientations else 40.0
    phase = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    carrier = np.sin(2.0 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / wavelength + phase)
    noise = np.clip(rng.normal(0.0, cfg.noise, size=(s, s)), -3.5 * cfg.noise, 3.5 * cfg.noise)
    image = 0.5 + cfg.bg_amp * carrier + noise

    atlas = glyph_atlas(cfg)
    g = atlas.shape[1]
    gh, gw = cfg.grid
    n_glyphs = int(rng.integers(0, cfg.max_glyphs + 1))
    cells = rng.choice(gh * gw, size=n_glyphs, replace=False)
    glyphs: list[tuple[int, tuple[int, int]]] = []
    for cell in cells:
        gid = int(rng.integers(cfg.glyph_classes))
        ci, cj = int(cell) // gw, int(cell) % gw
        top = ci * cfg.patch + (cfg.patch - g) // 2
        left = cj * cfg.patch + (cfg.patch - g) // 2
        image[top : top + g, left : left + g] += cfg.glyph_amp * (atlas[gid] - 0.5) * 2.0
        glyphs.append((gid, (ci, cj)))
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("scene amplitudes exceed [0,1]; lower bg_amp/glyph_amp/noise")
    return GlyphScene(image=image, global_label=label, glyphs=glyphs)


def make_dataset(cfg: DataConfig, seed: int) -> Dataset:
    """Train/test scene lists from disjoint per-scene seed streams."""

    def gen(split_tag: int, count: int) -> list[GlyphScene]:
        return [
            render_scene(cfg, np.random.SeedSequence((seed, split_tag, i)))
            for i in range(count)
        ]

    return Dataset(
        train=gen(_SEED_TRAIN_SPLIT, cfg.train_scenes),
        test=gen(_SEED_TEST_SPLIT, cfg.test_scenes),
        seed=seed,
        config=cfg,
    )


def dataset_manifest(ds: Dataset) -> dict:
    spec = {k: getattr(ds.config, k) for k in ds.config.__dataclass_fields__}
    spec_hash = hashlib.sha256(repr(sorted(spec.items())).encode()).hexdigest()
    return {
        "seed": ds.seed,
        "train_scenes": len(ds.train),
        "test_scenes": len(ds.test),
        "spec": spec,
        "spec_hash": spec_hash,
    }


def scene_cell_labels(scene: GlyphScene, cfg: DataConfig) -> np.ndarray:
    """(N,) per-cell glyph ids; cells without a glyph get the empty class C_d."""
    gh, gw = cfg.grid
    labels = np.full(gh * gw, cfg.glyph_classes, dtype=np.int64)
    for gid, (ci, cj) in scene.glyphs:
        labels[ci * gw + cj] = gid
    return labels


# ---------------------------------------------------------------------------
# toy vision transformer


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S) -> (B, N, patch*patch) row-major patches."""
    b, s, _ = images.shape
    g = s // patch
    x = images.reshape(b, g, patch, g, patch)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4)).reshape(b, g * g, patch * patch)


class _Block:
    def __init__(self, name: str, cfg: ToyViTConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        hid = int(d * cfg.mlp_ratio)
        a1 = math.sqrt(6.0 / (d + hid))
        self.ln1_g = Param(f"{name}.ln1.gain", np.ones(d))
        self.ln1_b = Param(f"{name}.ln1.bias", np.zeros(d))
        self.attn = MultiHeadParams(f"{name}.attn", d, cfg.heads, rng)
        self.ln2_g = Param(f"{name}.ln2.gain", np.ones(d))
        self.ln2_b = Param(f"{name}.ln2.bias", np.zeros(d))
        self.mlp_w1 = Param(f"{name}.mlp.w1", rng.uniform(-a1, a1, size=(d, hid)))
        self.mlp_b1 = Param(f"{name}.mlp.b1", np.zeros(hid))
        self.mlp_w2 = Param(f"{name}.mlp.w2", rng.uniform(-a1, a1, size=(hid, d)))
        self.mlp_b2 = Param(f"{name}.mlp.b2", np.zeros(d))

    def params(self) -> list[Param]:
        return [
            self.ln1_g, self.ln1_b, *self.attn.params(),
            self.ln2_g, self.ln2_b,
            self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
        ]

    def __call__(self, x: Tensor, eps: float) -> Tensor:
        h = tt.layer_norm(x, self.ln1_g.value, self.ln1_b.value, eps)
        x = tt.add(x, multi_head_attention(h, h, self.attn))
        h = tt.layer_norm(x, self.ln2_g.value, self.ln2_b.value, eps)
        h = tt.add(tt.matmul(h, self.mlp_w1.value), self.mlp_b1.value)
        h = tt.gelu(h)
        h = tt.add(tt.matmul(h, self.mlp_w2.value), self.mlp_b2.value)
        return tt.add(x, h)


class ToyViT:
    """Pre-norm ViT over patch tokens plus a CLS token.

    `forward_features` returns every block's patch-token map (CLS stripped),
    tagged with 1-based layer_index. The classifier head mean-pools the final
    block's patch tokens; it exists for pretraining only.
    """

    def __init__(self, cfg: ToyViTConfig, n_classes: int, seed: int):
        self.cfg = cfg
        self.n_classes = n_classes
        rng = np.random.default_rng(np.random.SeedSequence((seed, _SEED_VIT_INIT)))
        d = cfg.embed_dim
        pdim = cfg.patch * cfg.patch
        ap = math.sqrt(6.0 / (pdim + d))
        self.patch_w = Param("vit.patch.w", rng.uniform(-ap, ap, size=(pdim, d)))
        self.patch_b = Param("vit.patch.b", np.zeros(d))
        self.cls = Param("vit.cls", rng.normal(0.0, 0.02, size=(1, d)))
        self.pos = Param("vit.pos", rng.normal(0.0, 0.02, size=(cfg.tokens + 1, d)))
        self.blocks = [_Block(f"vit.block{i + 1}", cfg, rng) for i in range(cfg.depth)]
        ah = math.sqrt(6.0 / (d + n_classes))
        self.head_w = Param("vit.head.w", rng.uniform(-ah, ah, size=(d, n_classes)))
        self.head_b = Param("vit.head.b", np.zeros(n_classes))

    def params(self) -> list[Param]:
        out = [self.patch_w, self.patch_b, self.cls, self.pos]
        for blk in self.blocks:
            out += blk.params()
        out += [self.head_w, self.head_b]
        return out

    def _embed(self, images: np.ndarray) -> Tensor:
        b = images.shape[0]
        patches = tt.constant(patchify(images, self.cfg.patch))
        tok = tt.add(tt.matmul(patches, self.patch_w.value), self.patch_b.value)
        cls = tt.expand_batch(self.cls.value, b)
        x = tt.concat([cls, tok], axis=-2)
        return tt.add(x, self.pos.value)

    def forward_features(self, images: np.ndarray) -> list[FeatureMap]:
        x = self._embed(images)
        maps = []
        for i, blk in enumerate(self.blocks):
            x = blk(x, self.cfg.ln_eps)
            patches = tt.narrow(x, -2, 1, self.cfg.tokens)
            maps.append(FeatureMap(tokens=patches, grid=self.cfg.grid, layer_index=i + 1))
        return maps

    def forward_logits(self, images: np.ndarray) -> Tensor:
        x = self._embed(images)
        for blk in self.blocks:
            x = blk(x, self.cfg.ln_eps)
        pooled = tt.tmean(tt.narrow(x, -2, 1, self.cfg.tokens), axis=-2)
        return tt.add(tt.matmul(pooled, self.head_w.value), self.head_b.value)


def encoder_weight_hash(vit: ToyViT) -> str:
    h = hashlib.sha256()
    for p in vit.params():
        h.update(p.name.encode())
        h.update(p.value.data.tobytes())
    return h.hexdigest()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = tt.log_softmax_last(logits)
    picked = tt.gather_last(logp, labels)
    return tt.scale(tt.tsum(picked), -1.0 / labels.size)


def pretrain_toy_vit(
    dataset: Dataset,
    cfg: ToyViTConfig,
    seed: int,
    lr: float = 1e-3,
    steps: int = 500,
    batch: int = 32,
) -> tuple[ToyViT, dict]:
    """Train the encoder on global labels only; returns model + training log.

    Downstream fusion training treats the returned weights as frozen: they
    never enter another optimizer. Raises TrainingDiverged on NaN loss.
    """
    vit = ToyViT(cfg, dataset.config.bg_classes, seed)
    images = np.stack([s.image for s in dataset.train])
    labels = np.array([s.global_label for s in dataset.train], dtype=np.int64)
    order_rng = np.random.default_rng(np.random.SeedSequence((seed, _SEED_BATCH_ORDER)))
    opt = Adam(vit.params(), lr)
    log: dict = {"loss": [], "lr": lr, "steps": steps, "batch": batch, "seed": seed}
    cursor = 0
    order = order_rng.permutation(len(images))
    for step in range(steps):
        if cursor + batch > len(order):
            order = order_rng.permutation(len(images))
            cursor = 0
        idx = order[cursor : cursor + batch]
        cursor += batch
        opt.zero_grad()
        with Tape() as tape:
            logits = vit.forward_logits(images[idx])
            loss = cross_entropy(logits, labels[idx])
        lv = loss.item()
        if not math.isfinite(lv):
            raise TrainingDiverged(f"pretraining loss non-finite at step {step}")
        backward(loss, tape)
        opt.step(cosine_lr(lr, step, steps))
        log["loss"].append(lv)

    test_images = np.stack([s.image for s in dataset.test])
    test_labels = np.array([s.global_label for s in dataset.test], dtype=np.int64)
    correct = 0
    for lo in range(0, len(test_images), 256):
        logits = vit.forward_logits(test_images[lo : lo + 256])
        correct += int((logits.data.argmax(axis=-1) == test_labels[lo : lo + 256]).sum())
    log["holdout_global_acc"] = correct / len(test_images)
    log["chance"] = 1.0 / dataset.config.bg_classes
    return vit, log


def cosine_similarity_map(stack: list[FeatureMap], ref: FeatureMap) -> list[np.ndarray]:
    """Per-token cosine similarity of each map against the reference map,
    reshaped to (H, W). Zero-vector tokens yield similarity 0."""
    h, w = ref.grid
    rdat = ref.tokens.data
    out = []
    for m in stack:
        if m.grid != ref.grid or m.dim != ref.dim:
            raise ValueError(f"map grid/dim {m.grid}/{m.dim} != ref {ref.grid}/{ref.dim}")
        num = (m.tokens.data * rdat).sum(axis=-1)
        den = np.linalg.norm(m.tokens.data, axis=-1) * np.linalg.norm(rdat, axis=-1)
        sim = np.divide(num, den, out=np.zeros_like(num), where=den != 0.0)
        out.append(sim.reshape(sim.shape[:-1] + (h, w)))
    return out


def map_encoder_layer(paper_index: int, depth: int, reference_depth: int = 24) -> int:
    """Proportional depth mapping floor(i * depth / reference), clamped to 1."""
    return max(1, (paper_index * depth) // reference_depth)
