"""Run configuration: one merged, strictly-validated view of every module's
settings, loaded from JSON with dotted command-line overrides and hashed over
its fully resolved content."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .attention import AttnVariant
from .featuregen import DataConfig, ToyViTConfig
from .fusion import FusionMethod
from .harness import AttnConfig, ProbeConfig, TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "config_hash", "apply_overrides"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VitSection:
    embed_dim: int = 64
    depth: int = 12
    heads: int = 4
    mlp_ratio: float = 2.0


@dataclass(frozen=True)
class AttnSection:
    variant: str = "deformable"
    heads: int = 16
    points: int = 4
    sra_pool: int = 2
    pos_embed: str = "none"


@dataclass(frozen=True)
class FusionSection:
    method: str = "mmfuser"
    q_layer: int = 11
    kv_layers: tuple[int, ...] = (1, 4, 6, 9)
    gamma_init: float = 0.0
    self_attn: bool = True
    allow_q_in_kv: bool = False


@dataclass(frozen=True)
class TrainSection:
    optimizer: str = "adam"
    lr: float = 3e-4
    steps: int = 2000
    batch: int = 32
    global_loss_weight: float = 1.0
    detail_loss_weight: float = 1.0
    empty_cell_weight: float = 0.1
    eval_batch: int = 256
    encoder_checkpoint: str | None = None


@dataclass(frozen=True)
class PretrainSection:
    lr: float = 1e-3
    steps: int = 300
    batch: int = 32


@dataclass(frozen=True)
class AblationSection:
    grid: str = "table1"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    jobs: int = 1


@dataclass(frozen=True)
class VizSection:
    fusion_checkpoint: str | None = None
    scene_index: int = 0
    ref_layer: int = 12


@dataclass(frozen=True)
class ProbeSection:
    lr: float = 0.02
    steps: int = 200
    batch_tokens: int = 8192
    empty_cell_weight: float = 0.1
    early_layer: int = 1


@dataclass(frozen=True)
class DataSection:
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


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    ln_eps: float = 1e-5
    checkpoint_dtype: str = "f64"
    data: DataSection = field(default_factory=DataSection)
    vit: VitSection = field(default_factory=VitSection)
    attn: AttnSection = field(default_factory=AttnSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    viz: VizSection = field(default_factory=VizSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    # --- bridges into module-level configs ---

    def data_config(self) -> DataConfig:
        return DataConfig(**dataclasses.asdict(self.data))

    def vit_config(self) -> ToyViTConfig:
        return ToyViTConfig(
            image_size=self.data.image_size,
            patch=self.data.patch,
            embed_dim=self.vit.embed_dim,
            depth=self.vit.depth,
            heads=self.vit.heads,
            mlp_ratio=self.vit.mlp_ratio,
            ln_eps=self.ln_eps,
        )

    def attn_config(self) -> AttnConfig:
        return AttnConfig(
            variant=AttnVariant(self.attn.variant),
            heads=self.attn.heads,
            points=self.attn.points,
            sra_pool=self.attn.sra_pool,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            optimizer=self.train.optimizer,
            lr=self.train.lr,
            steps=self.train.steps,
            batch=self.train.batch,
            seed=self.seed,
            global_loss_weight=self.train.global_loss_weight,
            detail_loss_weight=self.train.detail_loss_weight,
            empty_cell_weight=self.train.empty_cell_weight,
            eval_batch=self.train.eval_batch,
        )

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            lr=self.probe.lr,
            steps=self.probe.steps,
            batch_tokens=self.probe.batch_tokens,
            empty_cell_weight=self.probe.empty_cell_weight,
        )

    def fusion_method(self) -> FusionMethod:
        return FusionMethod(self.fusion.method)

    def validate(self) -> None:
        if self.checkpoint_dtype not in ("f64", "f32"):
            raise ConfigError(f"checkpoint_dtype must be f64|f32, got {self.checkpoint_dtype!r}")
        if self.attn.pos_embed != "none":
            raise ConfigError("attn.pos_embed: only 'none' is implemented")
        try:
            AttnVariant(self.attn.variant)
        except ValueError:
            raise ConfigError(f"unknown attn.variant {self.attn.variant!r}") from None
        try:
            FusionMethod(self.fusion.method)
        except ValueError:
            raise ConfigError(f"unknown fusion.method {self.fusion.method!r}") from None
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")
        if self.fusion.q_layer > self.vit.depth or any(
            i > self.vit.depth or i < 1 for i in self.fusion.kv_layers
        ):
            raise ConfigError(
                f"fusion layers q={self.fusion.q_layer} kv={list(self.fusion.kv_layers)} "
                f"exceed encoder depth {self.vit.depth}"
            )
        self.data_config()
        self.vit_config()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "data": DataSection,
    "vit": VitSection,
    "attn": AttnSection,
    "fusion": FusionSection,
    "train": TrainSection,
    "pretrain": PretrainSection,
    "ablation": AblationSection,
    "viz": VizSection,
    "probe": ProbeSection,
}


def _build_section(cls, d: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys under {path}: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad values under {path}: {exc}") from None


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - top_fields
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for k, v in d.items():
        if k in _SECTION_TYPES:
            if not isinstance(v, dict):
                raise ConfigError(f"section {k!r} must be an object")
            kwargs[k] = _build_section(_SECTION_TYPES[k], v, k)
        else:
            kwargs[k] = v
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad top-level values: {exc}") from None
    cfg.validate()
    return cfg


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply `a.b.c=value` overrides; values parse as JSON, else raw strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return d


def load_config(path: str | Path | None, overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if overrides:
        d = apply_overrides(d, overrides)
    if seed is not None:
        d["seed"] = seed
    return config_from_dict(d)


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()
