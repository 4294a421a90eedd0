"""Command-line entry point.

Subcommands: gradcheck, pretrain, train, ablate, viz, dump-weights. Artifacts
land in a run directory named by the config hash under ./runs (or
$MMFUSER_RUNS_DIR). Exit codes: 0 success, 1 check failure, 2 usage error,
3 missing artifact, 4 idempotence guard.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import harness
from .checkpoint import CheckpointError, Checkpoint, load_into_params, save_params
from .config import ConfigError, RunConfig, config_hash, load_config
from .featuregen import (
    Dataset,
    ToyViT,
    cosine_similarity_map,
    dataset_manifest,
    make_dataset,
    pretrain_toy_vit,
)
from .fusion import FeatureMap, FeatureStack, FusionMethod, LayerSelection
from .harness import (
    AblationSpec,
    CSV_HEADER,
    FusionSpec,
    build_grid,
    format_csv,
    run_ablation,
    train_readout,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_GUARD = 4


class MissingArtifact(RuntimeError):
    pass


class IdempotenceGuard(RuntimeError):
    pass


def runs_root() -> Path:
    return Path(os.environ.get("MMFUSER_RUNS_DIR", "runs"))


def _prepare_run_dir(cfg: RunConfig, chash: str, command: str, force: bool) -> Path:
    rd = runs_root() / chash[:12]
    marker = rd / f".done-{command}"
    if marker.exists() and not force:
        raise IdempotenceGuard(
            f"{rd} already holds a completed {command!r} run; pass --force to redo"
        )
    rd.mkdir(parents=True, exist_ok=True)
    (rd / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return rd


def _mark_done(rd: Path, command: str, chash: str) -> None:
    (rd / f".done-{command}").write_text(chash + "\n")


def _build_dataset(cfg: RunConfig, rd: Path) -> Dataset:
    ds = make_dataset(cfg.data_config(), cfg.seed)
    (rd / "manifest.json").write_text(json.dumps(dataset_manifest(ds), indent=2, sort_keys=True) + "\n")
    return ds


def _load_encoder(cfg: RunConfig) -> ToyViT:
    path = cfg.train.encoder_checkpoint
    if not path:
        raise MissingArtifact("train.encoder_checkpoint is not set; run `pretrain` first")
    if not Path(path).exists():
        raise MissingArtifact(f"encoder checkpoint not found: {path}")
    vit = ToyViT(cfg.vit_config(), cfg.data.bg_classes, seed=cfg.seed)
    load_into_params(path, vit.params())
    return vit


def _fusion_spec(cfg: RunConfig) -> FusionSpec:
    return FusionSpec(
        method=cfg.fusion_method(),
        selection=LayerSelection(
            q_index=cfg.fusion.q_layer,
            kv_indices=tuple(cfg.fusion.kv_layers),
            allow_q_in_kv=cfg.fusion.allow_q_in_kv,
        ),
        attn=cfg.attn_config(),
        gamma_init=cfg.fusion.gamma_init,
        self_enabled=cfg.fusion.self_attn,
        ln_eps=cfg.ln_eps,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(args, cfg: RunConfig, chash: str) -> int:
    rd = _prepare_run_dir(cfg, chash, "gradcheck", args.force)
    report = harness.gradcheck_suite(tolerance=args.tol, seed=cfg.seed)
    report["config_hash"] = chash
    (rd / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, entry in sorted(report["cases"].items()):
        status = "pass" if entry["pass"] else "FAIL"
        print(f"{status}  {name}: max rel err {entry['max_rel_err']:.3e}")
    _mark_done(rd, "gradcheck", chash)
    print(f"report: {rd / 'gradcheck.json'}")
    return EXIT_OK if report["pass"] else EXIT_CHECK_FAILED


def cmd_pretrain(args, cfg: RunConfig, chash: str) -> int:
    rd = _prepare_run_dir(cfg, chash, "pretrain", args.force)
    ds = _build_dataset(cfg, rd)
    t0 = time.perf_counter()
    vit, log = pretrain_toy_vit(
        ds,
        cfg.vit_config(),
        seed=cfg.seed,
        lr=cfg.pretrain.lr,
        steps=cfg.pretrain.steps,
        batch=cfg.pretrain.batch,
    )
    wall = time.perf_counter() - t0
    save_params(rd / "checkpoint.mmfz", vit.params(), cfg.checkpoint_dtype)
    (rd / "checkpoint.mmfz.meta.json").write_text(
        json.dumps({"config_hash": chash, "kind": "encoder"}, sort_keys=True) + "\n"
    )
    (rd / "pretrain_log.json").write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    row = {
        "run_id": "pretrain",
        "method": "pretrain",
        "q_layer": "",
        "kv_layers": "",
        "attn": "",
        "seed": str(cfg.seed),
        "steps": str(cfg.pretrain.steps),
        "global_acc": repr(log["holdout_global_acc"]),
        "detail_acc": "nan",
        "detail_f1": "nan",
        "wall_s": repr(round(wall, 3)),
        "config_hash": chash,
    }
    (rd / "metrics.csv").write_text(format_csv([row]))
    _mark_done(rd, "pretrain", chash)
    print(f"holdout global acc {log['holdout_global_acc']:.4f} (chance {log['chance']:.4f})")
    print(f"artifacts: {rd}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, chash: str) -> int:
    vit = _load_encoder(cfg)
    rd = _prepare_run_dir(cfg, chash, "train", args.force)
    ds = _build_dataset(cfg, rd)
    spec = _fusion_spec(cfg)
    tr = harness.encode_dataset(vit, ds.train, ds.config, spec.layers_needed)
    te = harness.encode_dataset(vit, ds.test, ds.config, spec.layers_needed)
    model, metrics = train_readout(
        spec, tr, te, cfg.train_config(), ds.config.bg_classes, ds.config.glyph_classes
    )
    save_params(rd / "checkpoint.mmfz", model.params(), cfg.checkpoint_dtype)
    (rd / "checkpoint.mmfz.meta.json").write_text(
        json.dumps({"config_hash": chash, "kind": "fusion"}, sort_keys=True) + "\n"
    )
    cell = harness.AblationCell(spec.method.value, spec)
    row = harness.metrics_csv_rows(metrics, f"train-{spec.method.value}-s{cfg.seed}", cell, cfg.seed, cfg.train.steps, chash)
    (rd / "metrics.csv").write_text(format_csv([row]))
    _mark_done(rd, "train", chash)
    print(
        f"{spec.method.value}: global_acc {metrics.global_acc:.4f} "
        f"detail_acc {metrics.detail_acc:.4f} detail_f1 {metrics.detail_f1:.4f}"
    )
    print(f"artifacts: {rd}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, chash: str) -> int:
    vit = _load_encoder(cfg)
    rd = _prepare_run_dir(cfg, chash, "ablate", args.force)
    ds = _build_dataset(cfg, rd)
    sel = LayerSelection(
        q_index=cfg.fusion.q_layer,
        kv_indices=tuple(cfg.fusion.kv_layers),
        allow_q_in_kv=cfg.fusion.allow_q_in_kv,
    )
    spec = build_grid(
        cfg.ablation.grid, cfg.vit.depth, cfg.attn_config(), tuple(cfg.ablation.seeds), sel
    )
    jobs = args.jobs if args.jobs else cfg.ablation.jobs
    rows, errors = run_ablation(
        spec, ds, vit, cfg.train_config(), config_hash=chash, jobs=jobs
    )
    (rd / "metrics.csv").write_text(format_csv(rows))
    if errors:
        (rd / "errors.json").write_text(json.dumps(errors, indent=2, sort_keys=True) + "\n")
    _mark_done(rd, "ablate", chash)
    print(f"{len(rows)} rows -> {rd / 'metrics.csv'}" + (f" ({len(errors)} failed cells)" if errors else ""))
    return EXIT_OK


def _norm_map(tokens: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    h, w = grid
    return np.linalg.norm(tokens, axis=-1).reshape(h, w)


def write_pgm(path: Path, values: np.ndarray) -> None:
    """P5 graymap, maxval 255, min-max scaled; constant maps render white."""
    h, w = values.shape
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.full(values.shape, 255, dtype=np.uint8)
    header = f"P5\n{w} {h}\n255\n".encode()
    path.write_bytes(header + scaled.tobytes())


def _write_value_csv(path: Path, values: np.ndarray, chash: str) -> None:
    lines = ["row,col,value,config_hash"]
    h, w = values.shape
    for i in range(h):
        for j in range(w):
            lines.append(f"{i},{j},{values[i, j]!r},{chash}")
    path.write_text("\n".join(lines) + "\n")


def cmd_viz(args, cfg: RunConfig, chash: str) -> int:
    vit = _load_encoder(cfg)
    fusion_path = cfg.viz.fusion_checkpoint
    if not fusion_path:
        raise MissingArtifact("viz.fusion_checkpoint is not set; run `train` first")
    if not Path(fusion_path).exists():
        raise MissingArtifact(f"fusion checkpoint not found: {fusion_path}")
    rd = _prepare_run_dir(cfg, chash, "viz", args.force)
    ds = _build_dataset(cfg, rd)
    spec = _fusion_spec(cfg)
    model = harness.FusionModel(
        spec,
        cfg.vit.embed_dim,
        cfg.data.bg_classes,
        cfg.data.glyph_classes + 1,
        cfg.seed,
    )
    load_into_params(fusion_path, model.params())
    scene = ds.test[cfg.viz.scene_index]
    maps = vit.forward_features(scene.image[None])
    viz_dir = rd / "viz"
    viz_dir.mkdir(exist_ok=True)

    ref = maps[cfg.viz.ref_layer - 1]
    sims = cosine_similarity_map(maps, ref)
    for m, sim in zip(maps, sims):
        values = sim[0]
        write_pgm(viz_dir / f"sim_layer{m.layer_index:02d}.pgm", values)
        _write_value_csv(viz_dir / f"sim_layer{m.layer_index:02d}.csv", values, chash)

    sel = spec.selection
    kv_mean = np.mean([maps[i - 1].tokens.data[0] for i in sel.kv_indices], axis=0)
    query = maps[sel.q_index - 1].tokens.data[0]
    batch = {i: maps[i - 1].tokens.data for i in spec.layers_needed}
    fused = model.fused_map(batch, ds.config.grid).tokens.data[0]
    for name, tokens in (("kv_mean", kv_mean), ("query", query), ("fused", fused)):
        values = _norm_map(tokens, ds.config.grid)
        write_pgm(viz_dir / f"{name}.pgm", values)
        _write_value_csv(viz_dir / f"{name}.csv", values, chash)
    _mark_done(rd, "viz", chash)
    print(f"wrote {len(maps)} similarity maps and the kv/query/fused triptych to {viz_dir}")
    return EXIT_OK


def cmd_dump_weights(args, cfg: RunConfig, chash: str) -> int:
    path = Path(args.path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    ckpt = Checkpoint.load(path)
    print(f"{path}: {len(ckpt.entries)} tensors")
    for e in ckpt.entries:
        d = e.data
        print(
            f"  {e.name:40s} {str(tuple(d.shape)):16s} {e.dtype}  "
            f"min {d.min():+.4e}  mean {d.mean():+.4e}  max {d.max():+.4e}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmfuser", description=__doc__)
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--jobs", type=int, default=0, help="parallel workers for ablate")
    p.add_argument("--force", action="store_true", help="overwrite an existing run")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY.PATH=VALUE",
        dest="overrides",
        help="config override, repeatable",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference checks for all ops")
    g.add_argument("--tol", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    sub.add_parser("pretrain", help="train the encoder on global labels").set_defaults(
        func=cmd_pretrain
    )

    t = sub.add_parser("train", help="train one fusion method + readout heads")
    t.add_argument("--fusion", type=str, default=None, help="override fusion.method")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", type=str, default=None, help="table1|table5|table6|table7")
    a.set_defaults(func=cmd_ablate)

    sub.add_parser("viz", help="similarity heatmaps and fusion triptych").set_defaults(
        func=cmd_viz
    )

    d = sub.add_parser("dump-weights", help="list checkpoint contents")
    d.add_argument("path", type=str)
    d.set_defaults(func=cmd_dump_weights)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if getattr(args, "fusion", None):
        overrides.append(f"fusion.method={args.fusion}")
    if getattr(args, "grid", None):
        overrides.append(f"ablation.grid={args.grid}")
    try:
        cfg = load_config(args.config, overrides, seed=args.seed)
        chash = config_hash(cfg)
        return args.func(args, cfg, chash)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except IdempotenceGuard as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GUARD


if __name__ == "__main__":
    sys.exit(main())
