"""Probability map to building polygons: threshold, 8-connected components,
pixel-corner contour tracing, small-object filtering."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Ring, canonical_ring, signed_area

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class Polygon:
    ring: Ring
    area: float
    component_id: int
    score: float
    holes: list[Ring] = field(default_factory=list)


@dataclass
class PolygonSet:
    polygons: list[Polygon] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.polygons)

    def __iter__(self):
        return iter(self.polygons)

    def __getitem__(self, i: int) -> Polygon:
        return self.polygons[i]

    def to_json(self) -> list[dict]:
        return [asdict(p) for p in self.polygons]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json()) + "\n")
        return path

    @classmethod
    def from_json(cls, doc: list) -> "PolygonSet":
        """Accepts records, or bare rings as stored in a tile's ``polygons.json``."""
        polys = []
        for i, item in enumerate(doc):
            if isinstance(item, dict):
                polys.append(
                    Polygon(
                        ring=item["ring"],
                        area=float(item.get("area", 0.0)),
                        component_id=int(item.get("component_id", i + 1)),
                        score=float(item.get("score", 1.0)),
                        holes=item.get("holes", []),
                    )
                )
            else:
                polys.append(Polygon(ring=item, area=abs(signed_area(item)), component_id=i + 1, score=1.0))
        return cls(polys)

    @classmethod
    def load(cls, path: str | Path) -> "PolygonSet":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def from_rings(cls, rings) -> "PolygonSet":
        return cls.from_json(list(rings))


def binarize(seg_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(seg_map) >= threshold).astype(np.uint8)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Dense labels 1..K for 8-connected foreground regions, 0 for background."""
    labels, count = ndimage.label(np.asarray(mask) != 0, structure=EIGHT_CONNECTED)
    return labels.astype(np.int32), int(count)


def _boundary_edges(pixels: np.ndarray):
    """Directed unit edges with the component on the left-hand turn side.

    Yields ``((x0, y0), (x1, y1), background_pixel)``; walking every outer
    boundary this way gives a positive shoelace area.
    """
    padded = np.pad(pixels, 1)
    rows, cols = np.nonzero(pixels)
    edges = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        pr, pc = r + 1, c + 1
        if not padded[pr - 1, pc]:
            edges.append(((c, r), (c + 1, r), (r - 1, c)))
        if not padded[pr, pc + 1]:
            edges.append(((c + 1, r), (c + 1, r + 1), (r, c + 1)))
        if not padded[pr + 1, pc]:
            edges.append(((c + 1, r + 1), (c, r + 1), (r + 1, c)))
        if not padded[pr, pc - 1]:
            edges.append(((c, r + 1), (c, r), (r, c - 1)))
    return edges


def _link_cycles(edges) -> list[list[tuple[int, int]]]:
    outgoing: dict[tuple[int, int], list[int]] = {}
    for k, (start, _, _) in enumerate(edges):
        outgoing.setdefault(start, []).append(k)
    used = [False] * len(edges)
    cycles = []
    for first in sorted(range(len(edges)), key=lambda k: (edges[k][0][1], edges[k][0][0])):
        if used[first]:
            continue
        cycle = []
        k = first
        while not used[k]:
            used[k] = True
            start, end, bg = edges[k]
            cycle.append(start)
            options = [j for j in outgoing[end] if not used[j]]
            if not options:
                break
            if len(options) > 1:
                # Pinch vertex: stay along the same background pixel so that
                # diagonal foreground neighbours end up on one ring.
                same = [j for j in options if edges[j][2] == bg]
                options = same or options
            k = options[0]
        cycles.append(cycle)
    return cycles


def _simplify(points: list[tuple[int, int]]) -> list[list[float]]:
    n = len(points)
    keep = []
    for i in range(n):
        px, py = points[i - 1]
        cx, cy = points[i]
        nx, ny = points[(i + 1) % n]
        if (cx - px, cy - py) != (nx - cx, ny - cy):
            keep.append([float(cx), float(cy)])
    return keep + [list(keep[0])]


def trace_component(labels: np.ndarray, component_id: int) -> tuple[Ring, list[Ring]]:
    """Outer ring and hole rings (pixel corners) of one labelled component."""
    pixels = np.asarray(labels) == component_id
    if component_id <= 0 or not pixels.any():
        raise KeyError(f"unknown component id {component_id}")
    outer = None
    holes = []
    for cycle in _link_cycles(_boundary_edges(pixels)):
        ring = _simplify(cycle)
        if signed_area(ring) > 0:
            if outer is not None:
                raise AssertionError("component has more than one outer boundary")
            outer = canonical_ring(ring, positive=True)
        else:
            holes.append(canonical_ring(ring, positive=False))
    holes.sort(key=lambda h: (h[0][1], h[0][0]))
    return outer, holes


def trace_contour(labels: np.ndarray, component_id: int) -> Ring:
    return trace_component(labels, component_id)[0]


def extract_polygons(seg_map: np.ndarray, threshold: float = 0.5, min_area: float = 0) -> PolygonSet:
    seg_map = np.asarray(seg_map)
    labels, count = connected_components(binarize(seg_map, threshold))
    if count == 0:
        return PolygonSet()
    index = np.arange(1, count + 1)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index)
    scores = ndimage.mean(seg_map.astype(np.float64), labels, index)
    polys = []
    for k, area, score in zip(index.tolist(), areas.tolist(), scores.tolist()):
        if area < min_area:
            continue
        outer, holes = trace_component(labels, k)
        polys.append(Polygon(ring=outer, area=float(area), component_id=k, score=float(score), holes=holes))
    return PolygonSet(polys)
