"""Match-status overlays written as binary PPM (P6) images."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import split_polygon
from .scorer import MatchReport

WHITE = (255, 255, 255)
YELLOW = (255, 255, 0)
BLUE = (0, 0, 255)


@dataclass
class OverlaySpec:
    channels: tuple[int, int, int] = (0, 1, 2)
    matched: tuple[int, int, int] = WHITE
    false_positive: tuple[int, int, int] = YELLOW
    false_negative: tuple[int, int, int] = BLUE
    line_width: int = 1
    scale: int = 4


def base_image(channels: np.ndarray, spec: OverlaySpec) -> np.ndarray:
    """Min-max stretched channel triple, upscaled; one extra row and column so
    that corner coordinates on the far edges stay inside the canvas."""
    c = channels.shape[0]
    if len(spec.channels) != 3 or any(not 0 <= i < c for i in spec.channels):
        raise ValueError(f"channel triple {spec.channels} out of range for {c} channels")
    planes = []
    for i in spec.channels:
        band = channels[i].astype(np.float64)
        lo, hi = band.min(), band.max()
        planes.append(np.zeros_like(band) if hi <= lo else (band - lo) / (hi - lo))
    rgb = np.rint(np.stack(planes, axis=-1) * 255.0).astype(np.uint8)
    s = spec.scale
    rgb = np.repeat(np.repeat(rgb, s, axis=0), s, axis=1)
    return np.pad(rgb, ((0, 1), (0, 1), (0, 0)), mode="edge")


def _line(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Bresenham pixels from (x0, y0) to (x1, y1), inclusive."""
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def outline_pixels(poly, scale: int) -> set[tuple[int, int]]:
    """Canvas pixels (row, col) on the outline of a polygon and its holes."""
    outer, holes = split_polygon(poly)
    pixels: set[tuple[int, int]] = set()
    for ring in [outer, *holes]:
        pts = [(int(round(x * scale)), int(round(y * scale))) for x, y in ring]
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            pixels.update((y, x) for x, y in _line(x0, y0, x1, y1))
    return pixels


def _stroke(img: np.ndarray, pixels: set[tuple[int, int]], color, width: int) -> None:
    h, w = img.shape[:2]
    lo = -((width - 1) // 2)
    for r, c in pixels:
        for dr in range(lo, lo + width):
            for dc in range(lo, lo + width):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    img[rr, cc] = color


def render(channels: np.ndarray, preds, gts, report: MatchReport, spec: OverlaySpec | None = None) -> np.ndarray:
    spec = spec or OverlaySpec()
    preds = list(getattr(preds, "polygons", preds))
    gts = list(getattr(gts, "polygons", gts))
    img = base_image(channels, spec)
    matched = [preds[i] for i, _, _ in report.pairs] + [gts[j] for _, j, _ in report.pairs]
    layers = [
        (matched, spec.matched),
        ([gts[j] for j in report.fn_indices], spec.false_negative),
        ([preds[i] for i in report.fp_indices], spec.false_positive),
    ]
    for polys, color in layers:
        for poly in polys:
            _stroke(img, outline_pixels(poly, spec.scale), color, spec.line_width)
    return img


def write_ppm(img: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape[:2]
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if header is None:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(header.group(1)), int(header.group(2))
    pixels = np.frombuffer(data[header.end() :], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3)


def render_overlay(tile, preds, report: MatchReport, spec: OverlaySpec | None = None, path: str | Path | None = None):
    """Render ``tile`` with its ground truth and ``preds`` coloured by match status."""
    img = render(tile.channels, preds, tile.polygons, report, spec)
    if path is not None:
        return write_ppm(img, path)
    return img
