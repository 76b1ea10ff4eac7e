"""Tile data model, synthetic scene generator, on-disk container and splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    Ring,
    canonical_ring,
    is_closed,
    rasterize,
    rasterize_polygon,
    transform_ring,
)

SCHEMA_VERSION = 1
DEFAULT_CHANNELS = 8

# Per-channel reflectance of roofs and of background.  Channels 0, 1, 2, 6, 7
# separate the classes well (some inverted); 3, 4, 5 only weakly, so a model
# fed that subset is the ensemble's weak member.
BUILDING_PALETTE = (0.85, 0.30, 0.75, 0.58, 0.45, 0.60, 0.20, 0.80)
BACKGROUND_PALETTE = (0.15, 0.70, 0.35, 0.42, 0.57, 0.46, 0.65, 0.30)
# Paved areas: roof-like in channels 0-5, background-like in 6 and 7.
DISTRACTOR_PALETTE = BUILDING_PALETTE[:6] + BACKGROUND_PALETTE[6:]

AUGMENTATIONS = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")


class TileFormatError(ValueError):
    """Tile container on disk is unreadable or inconsistent."""


class PayloadLengthError(TileFormatError):
    pass


class ShapeMismatchError(TileFormatError):
    pass


class CapacityError(RuntimeError):
    """Requested buildings do not fit in the scene."""


@dataclass(eq=False)
class Tile:
    id: str
    channels: np.ndarray  # (C, H, W) float32
    mask: np.ndarray  # (H, W) uint8
    polygons: list[Ring] = field(default_factory=list)
    meta: list[str] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.channels.shape)  # type: ignore[return-value]

    def validate(self) -> None:
        if self.channels.ndim != 3:
            raise ShapeMismatchError(f"channels must be C x H x W, got {self.channels.shape}")
        c, h, w = self.channels.shape
        if self.mask.shape != (h, w):
            raise ShapeMismatchError(f"mask shape {self.mask.shape} != {(h, w)}")
        if not np.all(np.isfinite(self.channels)):
            raise TileFormatError("non-finite channel values")
        if self.channels.min(initial=0.0) < 0.0 or self.channels.max(initial=0.0) > 1.0:
            raise TileFormatError("channel values outside [0, 1]")
        if self.meta and len(self.meta) != c:
            raise ShapeMismatchError(f"{len(self.meta)} channel names for {c} channels")
        for ring in self.polygons:
            if not is_closed(ring):
                raise TileFormatError("polygon ring is not closed")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tile):
            return NotImplemented
        return (
            self.id == other.id
            and self.channels.dtype == other.channels.dtype
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.mask, other.mask)
            and self.polygons == other.polygons
            and self.meta == other.meta
        )


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    n_buildings: int = 6
    size_range: tuple[int, int] = (4, 12)
    adjacency_prob: float = 0.0
    channel_noise: float = 0.05
    seed: int = 0
    n_channels: int = DEFAULT_CHANNELS
    rotate_prob: float = 0.0
    n_distractors: int = 0
    max_attempts: int = 200

    def validate(self) -> None:
        if self.width < 32 or self.height < 32:
            raise ValueError("width and height must be >= 32")
        lo, hi = self.size_range
        if lo < 2 or hi < lo:
            raise ValueError(f"bad size_range {self.size_range}")
        if not 0.0 <= self.adjacency_prob <= 1.0:
            raise ValueError("adjacency_prob must lie in [0, 1]")
        if not 0.0 <= self.rotate_prob <= 1.0:
            raise ValueError("rotate_prob must lie in [0, 1]")
        if self.n_buildings < 0 or self.n_distractors < 0 or self.channel_noise < 0:
            raise ValueError("n_buildings, n_distractors and channel_noise must be non-negative")
        if not 1 <= self.n_channels <= len(BUILDING_PALETTE):
            raise ValueError(f"n_channels must be in 1..{len(BUILDING_PALETTE)}")


@dataclass
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


def channel_names(n: int) -> list[str]:
    return [f"mul{i + 1}" for i in range(n)]


def _rect_ring(x0: float, y0: float, x1: float, y1: float) -> Ring:
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


def _rotated_ring(cx: float, cy: float, w: int, h: int, angle_deg: float) -> Ring:
    t = math.radians(angle_deg)
    ct, st = math.cos(t), math.sin(t)
    corners = []
    for dx, dy in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)):
        corners.append([cx + dx * ct - dy * st, cy + dx * st + dy * ct])
    return canonical_ring(corners + corners[:1])


def _dilate(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dr in range(3):
        for dc in range(3):
            out |= padded[dr : dr + h, dc : dc + w]
    return out


def _propose_adjacent(rng, rects, spec: SceneSpec):
    """Axis-aligned rectangle sharing an edge run of >= 2 pixels with a prior one."""
    x0, y0, x1, y1 = rects[int(rng.integers(len(rects)))]
    lo, hi = spec.size_range
    w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    side = int(rng.integers(4))
    if side in (0, 1):  # left / right neighbour
        ny0 = int(rng.integers(y0 - h + 2, y1 - 2 + 1))
        nx0 = x1 if side == 1 else x0 - w
        return nx0, ny0, nx0 + w, ny0 + h
    nx0 = int(rng.integers(x0 - w + 2, x1 - 2 + 1))
    ny0 = y1 if side == 3 else y0 - h
    return nx0, ny0, nx0 + w, ny0 + h


def generate_scene(spec: SceneSpec, tile_id: str | None = None) -> Tile:
    """Deterministic rectangular-building scene; same spec gives identical bytes."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    lo, hi = spec.size_range
    mask = np.zeros((H, W), dtype=bool)
    polygons: list[Ring] = []
    rects: list[tuple[int, int, int, int]] = []

    for _ in range(spec.n_buildings):
        for _attempt in range(spec.max_attempts):
            adjacent = bool(rects) and rng.random() < spec.adjacency_prob
            if adjacent:
                x0, y0, x1, y1 = _propose_adjacent(rng, rects, spec)
                if x0 < 0 or y0 < 0 or x1 > W or y1 > H:
                    continue
                ring = _rect_ring(x0, y0, x1, y1)
                pix = rasterize_polygon(ring, height=H, width=W)
                if (pix & mask).any():
                    continue
                rects.append((x0, y0, x1, y1))
            else:
                w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
                if rng.random() < spec.rotate_prob:
                    angle = 15.0 * int(rng.integers(1, 12))
                    half = 0.5 * math.hypot(w, h)
                    if 2 * half >= min(W, H):
                        continue
                    cx = float(rng.uniform(half, W - half))
                    cy = float(rng.uniform(half, H - half))
                    ring = _rotated_ring(cx, cy, w, h, angle)
                    axis_rect = None
                else:
                    if w > W or h > H:
                        continue
                    x0 = int(rng.integers(0, W - w + 1))
                    y0 = int(rng.integers(0, H - h + 1))
                    ring = _rect_ring(x0, y0, x0 + w, y0 + h)
                    axis_rect = (x0, y0, x0 + w, y0 + h)
                pix = rasterize_polygon(ring, height=H, width=W)
                if not pix.any() or (pix & _dilate(mask)).any():
                    continue
                if axis_rect is not None:
                    rects.append(axis_rect)
            mask |= pix
            polygons.append(ring)
            break
        else:
            raise CapacityError(
                f"could not place building {len(polygons) + 1} of {spec.n_buildings} "
                f"after {spec.max_attempts} attempts"
            )

    paved = _place_distractors(rng, mask, spec)
    mask_u8 = mask.astype(np.uint8)
    channels = _render_channels(mask_u8, spec, rng, paved)
    return Tile(
        id=tile_id if tile_id is not None else f"scene-{spec.seed}",
        channels=channels,
        mask=mask_u8,
        polygons=polygons,
        meta=channel_names(spec.n_channels),
    )


def _place_distractors(rng, mask: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Unlabelled rectangles clear of every building and of each other."""
    H, W = mask.shape
    lo, hi = spec.size_range
    taken = mask.copy()
    paved = np.zeros_like(mask)
    for _ in range(spec.n_distractors):
        for _attempt in range(spec.max_attempts):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            if w > W or h > H:
                continue
            x0 = int(rng.integers(0, W - w + 1))
            y0 = int(rng.integers(0, H - h + 1))
            pix = np.zeros_like(mask)
            pix[y0 : y0 + h, x0 : x0 + w] = True
            if (pix & _dilate(taken)).any():
                continue
            taken |= pix
            paved |= pix
            break
        else:
            raise CapacityError(f"could not place {spec.n_distractors} distractors")
    return paved


def _render_channels(
    mask: np.ndarray, spec: SceneSpec, rng: np.random.Generator, paved: np.ndarray | None = None
) -> np.ndarray:
    c = spec.n_channels
    bld = np.asarray(BUILDING_PALETTE[:c], dtype=np.float64)[:, None, None]
    bkg = np.asarray(BACKGROUND_PALETTE[:c], dtype=np.float64)[:, None, None]
    base = bkg + (bld - bkg) * mask[None].astype(np.float64)
    if paved is not None and paved.any():
        dis = np.asarray(DISTRACTOR_PALETTE[:c], dtype=np.float64)[:, None, None]
        base = base + (dis - bkg) * paved[None].astype(np.float64)
    if spec.channel_noise > 0:
        base = base + rng.normal(0.0, spec.channel_noise, size=base.shape)
    return np.clip(base, 0.0, 1.0).astype(np.float32)


# --- augmentation -----------------------------------------------------------


def augment_array(arr: np.ndarray, name: str) -> np.ndarray:
    """Apply one of the six isometries to the last two axes of ``arr``."""
    if name == "identity":
        out = arr
    elif name == "rot90":
        out = np.rot90(arr, 1, axes=(-2, -1))
    elif name == "rot180":
        out = np.rot90(arr, 2, axes=(-2, -1))
    elif name == "rot270":
        out = np.rot90(arr, 3, axes=(-2, -1))
    elif name == "flip_h":
        out = np.flip(arr, axis=-1)
    elif name == "flip_v":
        out = np.flip(arr, axis=-2)
    else:
        raise KeyError(f"unknown augmentation {name!r}")
    return np.ascontiguousarray(out)


def augment_point(name: str, x: float, y: float, height: int, width: int) -> tuple[float, float]:
    if name == "identity":
        return x, y
    if name == "rot90":
        return y, width - x
    if name == "rot180":
        return width - x, height - y
    if name == "rot270":
        return height - y, x
    if name == "flip_h":
        return width - x, y
    if name == "flip_v":
        return x, height - y
    raise KeyError(f"unknown augmentation {name!r}")


def augment(tile: Tile) -> list[Tile]:
    """[identity, rot90, rot180, rot270, flip_h, flip_v] of a square tile."""
    _, h, w = tile.channels.shape
    if h != w:
        raise ShapeMismatchError(f"augmentation needs a square tile, got {h}x{w}")
    out = []
    for name in AUGMENTATIONS:
        polys = [
            canonical_ring(transform_ring(r, lambda x, y, n=name: augment_point(n, x, y, h, w)))
            for r in tile.polygons
        ]
        out.append(
            Tile(
                id=tile.id if name == "identity" else f"{tile.id}/{name}",
                channels=augment_array(tile.channels, name),
                mask=augment_array(tile.mask, name),
                polygons=polys if name != "identity" else [list(map(list, r)) for r in tile.polygons],
                meta=list(tile.meta),
            )
        )
    return out


# --- persistence ------------------------------------------------------------


def save_tile(tile: Tile, path: str | Path) -> Path:
    tile.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    c, h, w = tile.channels.shape
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "id": tile.id,
        "H": h,
        "W": w,
        "C": c,
        "channels": list(tile.meta) or channel_names(c),
        "dtype": "float32",
        "byte_order": "little-endian",
        "layout": "channel-major",
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (path / "channels.bin").write_bytes(tile.channels.astype("<f4", copy=False).tobytes(order="C"))
    (path / "mask.bin").write_bytes(tile.mask.astype(np.uint8, copy=False).tobytes(order="C"))
    (path / "polygons.json").write_text(json.dumps(tile.polygons) + "\n")
    return path


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise TileFormatError(f"{path / 'manifest.json'}: corrupt header ({exc})") from exc
    required = ("schema_version", "id", "H", "W", "C", "dtype", "byte_order", "layout")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise TileFormatError(f"{path / 'manifest.json'}: missing fields {missing}")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise TileFormatError(f"unsupported schema_version {manifest['schema_version']}")
    if (manifest["dtype"], manifest["byte_order"], manifest["layout"]) != (
        "float32",
        "little-endian",
        "channel-major",
    ):
        raise TileFormatError("unsupported dtype/byte_order/layout")
    for k in ("H", "W", "C"):
        if not isinstance(manifest[k], int) or manifest[k] <= 0:
            raise TileFormatError(f"bad dimension {k}={manifest[k]!r}")
    return manifest


def load_tile(path: str | Path) -> Tile:
    path = Path(path)
    manifest = _read_manifest(path)
    c, h, w = manifest["C"], manifest["H"], manifest["W"]
    raw = (path / "channels.bin").read_bytes()
    plane = h * w * 4
    if len(raw) != c * plane:
        if len(raw) % plane == 0:
            raise ShapeMismatchError(
                f"manifest declares C={c} but payload holds {len(raw) // plane} channels of {h}x{w}"
            )
        raise PayloadLengthError(f"channels.bin has {len(raw)} bytes, expected {c * plane}")
    channels = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float32)
    mask_raw = (path / "mask.bin").read_bytes()
    if len(mask_raw) != h * w:
        raise PayloadLengthError(f"mask.bin has {len(mask_raw)} bytes, expected {h * w}")
    mask = np.frombuffer(mask_raw, dtype=np.uint8).reshape(h, w).copy()
    if not np.all(np.isfinite(channels)):
        raise TileFormatError("non-finite values in channels.bin")
    try:
        polygons = json.loads((path / "polygons.json").read_text())
    except json.JSONDecodeError as exc:
        raise TileFormatError(f"corrupt polygons.json ({exc})") from exc
    names = manifest.get("channels") or channel_names(c)
    tile = Tile(id=manifest["id"], channels=channels, mask=mask, polygons=polygons, meta=list(names))
    tile.validate()
    return tile


def save_dataset(tiles: Sequence[Tile], root: str | Path) -> list[str]:
    root = Path(root)
    ids = []
    for tile in tiles:
        save_tile(tile, root / "tiles" / tile.id)
        ids.append(tile.id)
    (root / "index.json").write_text(json.dumps({"ids": ids}, indent=2) + "\n")
    return ids


def load_dataset(root: str | Path) -> list[Tile]:
    root = Path(root)
    ids = json.loads((root / "index.json").read_text())["ids"]
    return [load_tile(root / "tiles" / i) for i in ids]


# --- splits -----------------------------------------------------------------


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to ``ratios``."""
    raw = [n * r for r in ratios]
    sizes = [math.floor(v) for v in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(ids: Sequence[str], ratios: Sequence[float] = (0.7, 0.3, 0.0), seed: int = 0) -> DatasetSplit:
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    return DatasetSplit(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train : n_train + n_val],
        test_ids=shuffled[n_train + n_val :],
    )


def rasterize_tile_polygons(tile: Tile) -> np.ndarray:
    _, h, w = tile.channels.shape
    return rasterize(tile.polygons, h, w)
