"""Building-level scoring: polygon IoU, greedy IoU matching, micro-averaged F-score."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import shapely
from shapely.geometry import Polygon as ShapelyPolygon

from .geometry import split_polygon
from .jaccard import gain


def to_shape(poly) -> ShapelyPolygon:
    outer, holes = split_polygon(poly)
    shape = ShapelyPolygon(outer, holes)
    if not shape.is_valid:
        # Pixel-corner rings touch themselves at diagonal pinch vertices.
        shape = shapely.make_valid(shape)
    if shape.area <= 0:
        raise ValueError("degenerate (zero-area) polygon")
    return shape


def polygon_iou(a, b) -> float:
    """Exact area(a & b) / area(a | b)."""
    sa = a if isinstance(a, shapely.Geometry) else to_shape(a)
    sb = b if isinstance(b, shapely.Geometry) else to_shape(b)
    inter = sa.intersection(sb).area
    if inter == 0.0:
        return 0.0
    return float(inter / (sa.area + sb.area - inter))


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F; an all-empty comparison scores 1, 1, 1."""
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


@dataclass
class MatchReport:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    fp_indices: list[int] = field(default_factory=list)
    fn_indices: list[int] = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f_score: float = 0.0
    tile_id: str | None = None

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, **kw) -> "MatchReport":
        p, r, f = prf(tp, fp, fn)
        return cls(tp=tp, fp=fp, fn=fn, precision=p, recall=r, f_score=f, **kw)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["pairs"] = [list(p) for p in self.pairs]
        return doc


def _items(polys) -> list:
    return list(polys.polygons if hasattr(polys, "polygons") else polys)


def _score_of(poly) -> float:
    if isinstance(poly, dict):
        return float(poly.get("score", 1.0))
    return float(getattr(poly, "score", 1.0))


def iou_matrix(preds: Sequence, gts: Sequence) -> dict[tuple[int, int], float]:
    """Sparse IoU values for every overlapping (pred, gt) pair."""
    ps = [to_shape(p) for p in preds]
    gs = [to_shape(g) for g in gts]
    if not ps or not gs:
        return {}
    tree = shapely.STRtree(gs)
    out = {}
    for i, p in enumerate(ps):
        for j in sorted(int(k) for k in tree.query(p)):
            iou = polygon_iou(p, gs[j])
            if iou > 0.0:
                out[(i, j)] = iou
    return out


def match_polygons(preds, gts, iou_threshold: float = 0.5, order: str = "iou") -> MatchReport:
    """Greedy one-to-one matching of pairs with IoU strictly above the threshold.

    ``order="iou"`` accepts candidate pairs by descending IoU (ties: lower pred
    index, then lower gt index).  ``order="score"`` visits predictions by
    descending confidence and gives each its best still-unmatched ground truth.
    """
    preds, gts = _items(preds), _items(gts)
    ious = {k: v for k, v in iou_matrix(preds, gts).items() if v > iou_threshold}
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    if order == "iou":
        for (i, j), v in sorted(ious.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1])):
            if i not in used_p and j not in used_g:
                used_p.add(i)
                used_g.add(j)
                pairs.append((i, j, v))
    elif order == "score":
        by_pred: dict[int, list[tuple[int, float]]] = {}
        for (i, j), v in ious.items():
            by_pred.setdefault(i, []).append((j, v))
        for i in sorted(range(len(preds)), key=lambda k: (-_score_of(preds[k]), k)):
            options = [(j, v) for j, v in by_pred.get(i, []) if j not in used_g]
            if options:
                j, v = min(options, key=lambda jv: (-jv[1], jv[0]))
                used_p.add(i)
                used_g.add(j)
                pairs.append((i, j, v))
    else:
        raise ValueError(f"unknown match order {order!r}")
    fp = [i for i in range(len(preds)) if i not in used_p]
    fn = [j for j in range(len(gts)) if j not in used_g]
    return MatchReport.from_counts(len(pairs), len(fp), len(fn), pairs=pairs, fp_indices=fp, fn_indices=fn)


@dataclass
class RunReport:
    per_tile: list[MatchReport]
    aggregate: MatchReport

    def to_json(self) -> dict:
        return {"per_tile": [r.to_json() for r in self.per_tile], "aggregate": self.aggregate.to_json()}


def aggregate(reports: Iterable[MatchReport]) -> MatchReport:
    """Micro-average: sum TP/FP/FN over tiles, then compute P, R, F."""
    tp = fp = fn = 0
    for r in reports:
        tp += r.tp
        fp += r.fp
        fn += r.fn
    return MatchReport.from_counts(tp, fp, fn)


def score_run(
    pred_sets: Sequence,
    gt_sets: Sequence,
    iou_threshold: float = 0.5,
    order: str = "iou",
    tile_ids: Sequence[str] | None = None,
) -> RunReport:
    if len(pred_sets) != len(gt_sets):
        raise ValueError(f"{len(pred_sets)} prediction sets for {len(gt_sets)} ground-truth sets")
    per_tile = []
    for k, (p, g) in enumerate(zip(pred_sets, gt_sets)):
        report = match_polygons(p, g, iou_threshold, order)
        report.tile_id = tile_ids[k] if tile_ids is not None else None
        per_tile.append(report)
    return RunReport(per_tile, aggregate(per_tile))


def format_table(reports: dict[str, MatchReport], baseline: str = "average") -> str:
    """Fixed-width table of P, R, F per fusion with relative F gain over ``baseline``."""
    base = reports.get(baseline)
    lines = [f"{'fusion':<8} {'TP':>5} {'FP':>5} {'FN':>5} {'precision':>9} {'recall':>7} {'F-score':>7} {'gain':>8}"]
    for name, r in reports.items():
        if name == baseline or base is None or base.f_score <= 0:
            g = "-"
        else:
            g = f"{100 * gain(r.f_score, base.f_score):+.2f}%"
        lines.append(
            f"{name:<8} {r.tp:>5d} {r.fp:>5d} {r.fn:>5d} {r.precision:>9.4f} {r.recall:>7.4f} {r.f_score:>7.4f} {g:>8}"
        )
    return "\n".join(lines) + "\n"
