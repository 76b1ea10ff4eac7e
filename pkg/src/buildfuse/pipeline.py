"""In-memory orchestration shared by the CLI and the seed-sweep experiment."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .fusion import FUSION_KINDS, Ensemble, fuse_vote
from .jaccard import gain, jaccard_image
from .polygonize import PolygonSet, extract_polygons
from .scorer import RunReport, format_table, score_run
from .tilestore import DatasetSplit, Tile, generate_scene, split_dataset
from .trainer import derive_seed, train_pipeline

log = logging.getLogger(__name__)


def build_dataset(cfg: RunConfig) -> list[Tile]:
    return [
        generate_scene(cfg.scene_spec(derive_seed(cfg.seed, 10, i)), tile_id=f"tile-{i:04d}")
        for i in range(cfg.n_tiles)
    ]


def make_split(cfg: RunConfig, ids: Sequence[str]) -> DatasetSplit:
    return split_dataset(ids, cfg.split, derive_seed(cfg.seed, 11))


def eval_ids(cfg: RunConfig, split: DatasetSplit) -> list[str]:
    if cfg.eval_split == "train":
        return list(split.train_ids)
    if cfg.eval_split == "val":
        return list(split.val_ids)
    if cfg.eval_split == "test":
        return list(split.test_ids)
    return list(split.train_ids) + list(split.val_ids) + list(split.test_ids)


def predict_maps(
    ensembles: dict[str, Ensemble], tiles: Sequence[Tile], kinds: Sequence[str], vote_threshold: float = 0.5
) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, np.ndarray]]:
    """Fused maps per kind and tile, plus vote uncertainty maps per tile.

    Member maps are computed once per tile and shared by every fusion kind.
    """
    any_ens = next(iter(ensembles.values()))
    maps: dict[str, dict[str, np.ndarray]] = {k: {} for k in kinds}
    uncertainty: dict[str, np.ndarray] = {}
    for tile in tiles:
        member_maps = any_ens.member_maps(tile.channels)
        for kind in kinds:
            if kind == "vote":
                result = fuse_vote(member_maps, vote_threshold)
                maps[kind][tile.id] = result.votes
                uncertainty[tile.id] = result.uncertainty
            else:
                maps[kind][tile.id] = ensembles[kind].fuse(member_maps, tile.channels)
    return maps, uncertainty


def polygons_for(maps: dict[str, np.ndarray], cfg: RunConfig) -> dict[str, PolygonSet]:
    return {tid: extract_polygons(m, cfg.threshold, cfg.min_area) for tid, m in maps.items()}


def score_kinds(
    polys: dict[str, dict[str, PolygonSet]], tiles: Sequence[Tile], cfg: RunConfig
) -> dict[str, RunReport]:
    ids = [t.id for t in tiles]
    gts = [PolygonSet.from_rings(t.polygons) for t in tiles]
    return {
        kind: score_run([per_tile[i] for i in ids], gts, cfg.iou_threshold, cfg.match_order, tile_ids=ids)
        for kind, per_tile in polys.items()
    }


def score_table(reports: dict[str, RunReport]) -> str:
    return format_table({k: r.aggregate for k, r in reports.items()}, baseline="average")


# --- direction-of-effect sweep ----------------------------------------------


@dataclass
class SeedResult:
    seed: int
    val_jaccard: dict[str, float]
    f_score: dict[str, float]
    gain_deep_vs_average: float
    best_epochs: dict[str, int]
    table: str

    @property
    def deep_beats_average_jaccard(self) -> bool:
        return self.val_jaccard["deep"] >= self.val_jaccard["average"]

    @property
    def deep_gain_positive(self) -> bool:
        return self.gain_deep_vs_average > 0


def run_seed(cfg: RunConfig, seed: int) -> SeedResult:
    """Generate, split, train, fuse and score one seed entirely in memory."""
    try:
        import torch

        torch.set_num_threads(1)
    except Exception:  # pragma: no cover
        pass
    cfg = replace(cfg, seed=seed)
    tiles = build_dataset(cfg)
    split = make_split(cfg, [t.id for t in tiles])
    artifacts = train_pipeline(tiles, split, cfg.pipeline_config())
    by_id = {t.id: t for t in tiles}
    val_tiles = [by_id[i] for i in split.val_ids]
    maps, _ = predict_maps(artifacts.ensembles, val_tiles, FUSION_KINDS, cfg.vote_threshold)
    val_j = {
        k: float(np.mean([jaccard_image(t.mask, maps[k][t.id]) for t in val_tiles])) for k in FUSION_KINDS
    }
    reports = score_kinds({k: polygons_for(maps[k], cfg) for k in FUSION_KINDS}, val_tiles, cfg)
    f = {k: r.aggregate.f_score for k, r in reports.items()}
    g = gain(f["deep"], f["average"]) if f["average"] > 0 else float("inf") if f["deep"] > 0 else 0.0
    return SeedResult(
        seed=seed,
        val_jaccard=val_j,
        f_score=f,
        gain_deep_vs_average=g,
        best_epochs={k: v.best_epoch for k, v in artifacts.logs.items()},
        table=score_table(reports),
    )


def run_experiment(cfg: RunConfig, seeds: Sequence[int], workers: int | None = None) -> list[SeedResult]:
    """Run ``run_seed`` for every seed, in parallel processes when cores allow."""
    workers = workers or min(len(seeds), os.cpu_count() or 1)
    if workers <= 1:
        return [run_seed(cfg, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_seed, [cfg] * len(seeds), seeds))


def experiment_summary(results: Sequence[SeedResult]) -> dict:
    return {
        "seeds": [asdict(r) for r in results],
        "deep_ge_average_jaccard": sum(r.deep_beats_average_jaccard for r in results),
        "deep_gain_positive": sum(r.deep_gain_positive for r in results),
        "n": len(results),
    }


def save_report(report: RunReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=1) + "\n")

