"""Command-line entry point: generate, train, predict, score, visualize."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import shapely
import torch

from . import __version__
from .config import RunConfig
from .fusion import FUSION_KINDS, load_ensemble
from .overlay import OverlaySpec, render_overlay
from .pipeline import (
    build_dataset,
    eval_ids,
    experiment_summary,
    make_split,
    polygons_for,
    predict_maps,
    run_experiment,
    save_report,
    score_kinds,
    score_table,
)
from .polygonize import PolygonSet
from .scorer import MatchReport, RunReport
from .tilestore import DatasetSplit, load_dataset, save_dataset
from .trainer import TrainingDivergedError, train_pipeline

log = logging.getLogger("buildfuse")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _versions() -> dict:
    return {
        "buildfuse": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "scipy": scipy.__version__,
        "shapely": shapely.__version__,
    }


def write_provenance(cfg: RunConfig, command: str, extra: dict | None = None) -> Path:
    path = cfg.runs_path / "provenance" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": _versions(),
        "config": cfg.to_dict(),
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: Path, stage: str, what: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"missing {what}: {path}")
    return path


def _kinds(cfg: RunConfig, fusion: str | None) -> list[str]:
    if fusion in (None, "all"):
        return [k for k in FUSION_KINDS if k in cfg.fusions]
    return [fusion]


def _load_split(cfg: RunConfig, stage: str) -> DatasetSplit:
    path = _require(cfg.data_path / "split.json", stage, "dataset split (run `generate` first)")
    return DatasetSplit(**json.loads(path.read_text()))


def _load_tiles(cfg: RunConfig, stage: str):
    _require(cfg.data_path / "index.json", stage, "dataset (run `generate` first)")
    return load_dataset(cfg.data_path)


# --- commands ---------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> Path:
    tiles = build_dataset(cfg)
    save_dataset(tiles, cfg.data_path)
    split = make_split(cfg, [t.id for t in tiles])
    (cfg.data_path / "split.json").write_text(
        json.dumps({"train_ids": split.train_ids, "val_ids": split.val_ids, "test_ids": split.test_ids}, indent=2)
        + "\n"
    )
    write_provenance(cfg, "generate", {"n_tiles": len(tiles)})
    log.info("wrote %d tiles to %s", len(tiles), cfg.data_path)
    return cfg.data_path


def cmd_train(cfg: RunConfig):
    tiles = _load_tiles(cfg, "train")
    split = _load_split(cfg, "train")
    try:
        artifacts = train_pipeline(tiles, split, cfg.pipeline_config(), cfg.runs_path / "train")
    except TrainingDivergedError as exc:
        raise StageError("train", str(exc)) from exc
    write_provenance(
        cfg,
        "train",
        {"best_epochs": {k: v.best_epoch for k, v in artifacts.logs.items()}},
    )
    return artifacts


def _ensembles(cfg: RunConfig, kinds: list[str]):
    ensembles = {}
    for kind in sorted(set(kinds) | {"average"}):
        manifest = _require(cfg.runs_path / "train" / f"ensemble-{kind}.json", "predict", "trained ensemble")
        ensembles[kind] = load_ensemble(manifest)
    return ensembles


def cmd_predict(cfg: RunConfig, fusion: str | None = None) -> Path:
    kinds = _kinds(cfg, fusion)
    tiles = _load_tiles(cfg, "predict")
    split = _load_split(cfg, "predict")
    ensembles = _ensembles(cfg, kinds)
    by_id = {t.id: t for t in tiles}
    selected = [by_id[i] for i in eval_ids(cfg, split)]
    maps, uncertainty = predict_maps(ensembles, selected, kinds, cfg.vote_threshold)
    out = cfg.runs_path / "predictions"
    for kind in kinds:
        kdir = out / kind
        kdir.mkdir(parents=True, exist_ok=True)
        polys = polygons_for(maps[kind], cfg)
        for tid, m in maps[kind].items():
            np.save(kdir / f"{tid}.npy", m.astype(np.float32))
            polys[tid].save(kdir / f"{tid}.polygons.json")
            if kind == "vote":
                np.save(kdir / f"{tid}.uncertainty.npy", uncertainty[tid])
        (kdir / "index.json").write_text(json.dumps({"ids": list(maps[kind])}, indent=2) + "\n")
    write_provenance(cfg, "predict", {"fusions": kinds})
    return out


def _load_predictions(cfg: RunConfig, kind: str, stage: str) -> dict[str, PolygonSet]:
    kdir = cfg.runs_path / "predictions" / kind
    index = _require(kdir / "index.json", stage, f"predictions for fusion '{kind}' (run `predict` first)")
    ids = json.loads(index.read_text())["ids"]
    return {tid: PolygonSet.load(_require(kdir / f"{tid}.polygons.json", stage, "predictions")) for tid in ids}


def cmd_score(cfg: RunConfig, fusion: str | None = None) -> str:
    kinds = _kinds(cfg, fusion)
    tiles = _load_tiles(cfg, "score")
    split = _load_split(cfg, "score")
    by_id = {t.id: t for t in tiles}
    selected = [by_id[i] for i in eval_ids(cfg, split)]
    polys = {kind: _load_predictions(cfg, kind, "score") for kind in kinds}
    for kind, per_tile in polys.items():
        missing = [t.id for t in selected if t.id not in per_tile]
        if missing:
            raise StageError("score", f"missing predictions for fusion '{kind}', tiles {missing[:3]}")
    reports: dict[str, RunReport] = score_kinds(polys, selected, cfg)
    out = cfg.runs_path / "score"
    for kind, report in reports.items():
        save_report(report, out / f"report-{kind}.json")
    table = score_table(reports)
    (out / "score_table.txt").write_text(table)
    (out / "summary.json").write_text(
        json.dumps({k: r.aggregate.to_json() for k, r in reports.items()}, indent=2, sort_keys=True) + "\n"
    )
    write_provenance(cfg, "score", {"fusions": kinds})
    return table


def cmd_visualize(cfg: RunConfig, fusion: str | None = None) -> Path:
    kinds = _kinds(cfg, fusion)
    tiles = _load_tiles(cfg, "visualize")
    by_id = {t.id: t for t in tiles}
    spec = OverlaySpec(
        channels=tuple(cfg.overlay.get("channels", (0, 1, 2))),
        scale=cfg.overlay.get("scale", 4),
        line_width=cfg.overlay.get("line_width", 1),
    )
    out = cfg.runs_path / "overlays"
    for kind in kinds:
        report_path = _require(cfg.runs_path / "score" / f"report-{kind}.json", "visualize", "score report (run `score` first)")
        preds = _load_predictions(cfg, kind, "visualize")
        per_tile = json.loads(report_path.read_text())["per_tile"]
        for rec in per_tile:
            report = MatchReport(
                pairs=[tuple(p) for p in rec["pairs"]], fp_indices=rec["fp_indices"], fn_indices=rec["fn_indices"]
            )
            try:
                render_overlay(by_id[rec["tile_id"]], preds[rec["tile_id"]], report, spec, out / kind / f"{rec['tile_id']}.ppm")
            except ValueError as exc:
                raise StageError("visualize", str(exc)) from exc
    write_provenance(cfg, "visualize", {"fusions": kinds})
    return out


def cmd_experiment(cfg: RunConfig, seeds: list[int], workers: int | None) -> dict:
    results = run_experiment(cfg, seeds, workers)
    summary = experiment_summary(results)
    out = cfg.runs_path / "experiment.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="buildfuse", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, type=Path, help="run configuration JSON")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE")
        p.add_argument("-v", "--verbose", action="store_true")

    for name in ("generate", "train", "predict", "score", "visualize", "run"):
        p = sub.add_parser(name)
        common(p)
        if name in ("predict", "score", "visualize", "run"):
            p.add_argument("--fusion", choices=[*FUSION_KINDS, "all"], default="all")
            p.add_argument("--match-order", choices=["iou", "score"])
        if name in ("visualize", "run"):
            p.add_argument("--channels", metavar="R,G,B", help="channel triple for overlay base images")
    p = sub.add_parser("experiment", help="seed sweep comparing deep combiner and unweighted average")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--workers", type=int)
    p = sub.add_parser("init-config", help="write the reference configuration")
    p.add_argument("path", type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "init-config":
        RunConfig().dump(args.path)
        return 0
    stage = args.command
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if getattr(args, "match_order", None):
            overrides.append(f"match_order={args.match_order}")
        if getattr(args, "channels", None):
            try:
                triple = [int(c) for c in args.channels.split(",")]
            except ValueError as exc:
                raise StageError("config", f"--channels expects R,G,B integers, got {args.channels!r}") from exc
            overrides.append(f"overlay.channels={json.dumps(triple)}")
        try:
            cfg = RunConfig.load(args.config, overrides)
        except (OSError, ValueError, TypeError) as exc:
            raise StageError("config", str(exc)) from exc
        fusion = getattr(args, "fusion", None)
        if stage == "generate":
            print(cmd_generate(cfg))
        elif stage == "train":
            artifacts = cmd_train(cfg)
            for name, tl in artifacts.logs.items():
                print(f"{name}: best epoch {tl.best_epoch}, val Jaccard {tl.best_val:.4f}")
        elif stage == "predict":
            print(cmd_predict(cfg, fusion))
        elif stage == "score":
            sys.stdout.write(cmd_score(cfg, fusion))
        elif stage == "visualize":
            print(cmd_visualize(cfg, fusion))
        elif stage == "run":
            cmd_generate(cfg)
            stage = "train"
            cmd_train(cfg)
            stage = "predict"
            cmd_predict(cfg, fusion)
            stage = "score"
            sys.stdout.write(cmd_score(cfg, fusion))
            stage = "visualize"
            cmd_visualize(cfg, fusion)
        elif stage == "experiment":
            summary = cmd_experiment(cfg, args.seeds, args.workers)
            for r in summary["seeds"]:
                vj = r["val_jaccard"]
                print(
                    f"seed {r['seed']}: val J average {vj['average']:.4f} deep {vj['deep']:.4f} "
                    f"F average {r['f_score']['average']:.4f} deep {r['f_score']['deep']:.4f} "
                    f"gain {100 * r['gain_deep_vs_average']:+.2f}%"
                )
            print(
                f"deep >= average (Jaccard): {summary['deep_ge_average_jaccard']}/{summary['n']}; "
                f"gain > 0: {summary['deep_gain_positive']}/{summary['n']}"
            )
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced with the failing stage
        print(f"error: [{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
