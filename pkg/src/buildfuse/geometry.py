"""Ring helpers shared by the tile store, the polygonizer and the scorer.

Rings are lists of ``[x, y]`` pairs in pixel-corner coordinates: ``x`` grows
to the right along columns, ``y`` grows downward along rows, and the pixel at
``(row, col)`` covers ``[col, col + 1] x [row, row + 1]``.  Rings are closed
(first point repeated at the end).
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence

import numpy as np

Ring = list[list[float]]


def close_ring(points: Sequence[Sequence[float]]) -> Ring:
    ring = [[float(x), float(y)] for x, y in points]
    if not ring:
        raise ValueError("empty ring")
    if ring[0] != ring[-1]:
        ring.append(list(ring[0]))
    return ring


def is_closed(ring: Sequence[Sequence[float]]) -> bool:
    return len(ring) >= 4 and list(ring[0]) == list(ring[-1])


def signed_area(ring: Sequence[Sequence[float]]) -> float:
    """Shoelace area; positive when the top edge is walked with x increasing."""
    pts = np.asarray(ring, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def ring_area(ring: Sequence[Sequence[float]]) -> float:
    return abs(signed_area(ring))


def canonical_ring(ring: Sequence[Sequence[float]], *, positive: bool = True) -> Ring:
    """Orient a closed ring and start it at its top-most, then left-most vertex.

    Outer rings use ``positive=True``; holes use the opposite orientation.
    """
    pts = [[float(x), float(y)] for x, y in ring]
    if pts and pts[0] == pts[-1]:
        pts = pts[:-1]
    if (signed_area(pts + pts[:1]) > 0) != positive:
        pts.reverse()
    start = min(range(len(pts)), key=lambda i: (pts[i][1], pts[i][0]))
    pts = pts[start:] + pts[:start]
    return pts + [list(pts[0])]


def _even_odd(ring: np.ndarray, height: int, width: int) -> np.ndarray:
    inside = np.zeros((height, width), dtype=bool)
    if len(ring) < 4:
        return inside
    xs, ys = ring[:, 0], ring[:, 1]
    r0 = max(int(np.floor(ys.min() - 0.5)), 0)
    r1 = min(int(np.ceil(ys.max() + 0.5)), height)
    c0 = max(int(np.floor(xs.min() - 0.5)), 0)
    c1 = min(int(np.ceil(xs.max() + 0.5)), width)
    if r0 >= r1 or c0 >= c1:
        return inside
    py = (np.arange(r0, r1, dtype=np.float64) + 0.5)[:, None]
    px = (np.arange(c0, c1, dtype=np.float64) + 0.5)[None, :]
    acc = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    for (x0, y0), (x1, y1) in zip(ring[:-1], ring[1:]):
        if y0 == y1:
            continue
        crosses = (y0 > py) != (y1 > py)
        x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        acc ^= crosses & (px < x_cross)
    inside[r0:r1, c0:c1] = acc
    return inside


def rasterize_polygon(
    outer: Sequence[Sequence[float]],
    holes: Iterable[Sequence[Sequence[float]]] = (),
    *,
    height: int,
    width: int,
) -> np.ndarray:
    """Pixels whose centers fall inside ``outer`` minus ``holes`` (even-odd rule)."""
    inside = _even_odd(np.asarray(outer, dtype=np.float64), height, width)
    for hole in holes:
        inside ^= _even_odd(np.asarray(hole, dtype=np.float64), height, width)
    return inside


def rasterize(polygons: Iterable, height: int, width: int) -> np.ndarray:
    """Union of rasterized polygons as a uint8 mask.

    Each entry is either a bare ring or a mapping with ``ring`` and optional
    ``holes`` keys.
    """
    mask = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        outer, holes = split_polygon(poly)
        mask |= rasterize_polygon(outer, holes, height=height, width=width)
    return mask.astype(np.uint8)


def split_polygon(poly) -> tuple[Ring, list[Ring]]:
    if isinstance(poly, dict):
        return poly["ring"], list(poly.get("holes", []))
    if hasattr(poly, "ring"):
        return poly.ring, list(getattr(poly, "holes", []))
    return poly, []


def transform_ring(ring: Sequence[Sequence[float]], fn) -> Ring:
    return [list(map(float, fn(x, y))) for x, y in ring]
