"""Fusion rules for member segmentations: average, vote, linear and deep combiners."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .segnet import LinearCombiner, forward, load_checkpoint

FUSION_KINDS = ("average", "vote", "linear", "deep")


def _stack(maps: Sequence[np.ndarray]) -> np.ndarray:
    if len(maps) == 0:
        raise ValueError("no maps to fuse")
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"maps have different shapes: {sorted(shapes)}")
    return np.stack([np.asarray(m, dtype=np.float32) for m in maps])


def fuse_average(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted per-pixel mean (the baseline)."""
    return _stack(maps).astype(np.float64).mean(axis=0).astype(np.float32)


class VoteResult(NamedTuple):
    votes: np.ndarray
    uncertainty: np.ndarray
    meta: dict


def fuse_vote(maps: Sequence[np.ndarray], threshold: float = 0.5) -> VoteResult:
    """Fraction of members voting foreground, and 1 - |2 * fraction - 1|."""
    stack = _stack(maps)
    m = stack.shape[0]
    k = (stack >= threshold).sum(axis=0)
    votes = (k / m).astype(np.float32)
    uncertainty = (1.0 - np.abs(2.0 * k / m - 1.0)).astype(np.float32)
    meta = {"members": m, "threshold": threshold, "even_members": m % 2 == 0}
    return VoteResult(votes, uncertainty, meta)


def fuse_linear(maps: Sequence[np.ndarray], combiner: LinearCombiner, *, pre_squash: bool = False) -> np.ndarray:
    stack = _stack(maps)
    if stack.shape[0] != combiner.n_members:
        raise ValueError(f"combiner expects {combiner.n_members} maps, got {stack.shape[0]}")
    if not pre_squash:
        return forward(combiner, stack)
    with torch.no_grad():
        x = torch.from_numpy(stack).to(combiner.conv.weight.dtype).unsqueeze(0)
        return combiner.logits(x)[0, 0].numpy()


def stack_deep_inputs(maps: Sequence[np.ndarray], channels: np.ndarray) -> np.ndarray:
    """Member maps first (by member index), then the raw channels."""
    stack = _stack(maps)
    channels = np.asarray(channels, dtype=np.float32)
    if channels.ndim != 3 or channels.shape[1:] != stack.shape[1:]:
        raise ValueError(f"channels {channels.shape} do not match maps {stack.shape[1:]}")
    return np.concatenate([stack, channels], axis=0)


def fuse_deep(maps: Sequence[np.ndarray], channels: np.ndarray, combiner: nn.Module) -> np.ndarray:
    x = stack_deep_inputs(maps, channels)
    if x.shape[0] != combiner.in_channels:
        raise ValueError(
            f"combiner takes {combiner.in_channels} channels, got {len(maps)} maps + {channels.shape[0]} channels"
        )
    return forward(combiner, x)


@dataclass
class Member:
    model: nn.Module
    channels: list[int]
    checkpoint: str | None = None

    def predict(self, tile_channels: np.ndarray) -> np.ndarray:
        return forward(self.model, tile_channels[self.channels])


@dataclass
class Ensemble:
    members: list[Member]
    fusion: str = "average"
    combiner: nn.Module | None = None
    combiner_checkpoint: str | None = None
    vote_threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.fusion in ("linear", "deep") and self.combiner is None:
            raise ValueError(f"{self.fusion} fusion requires a combiner")

    def member_maps(self, tile_channels: np.ndarray) -> list[np.ndarray]:
        return [m.predict(tile_channels) for m in self.members]

    def fuse(self, maps: Sequence[np.ndarray], tile_channels: np.ndarray) -> np.ndarray:
        if self.fusion == "average":
            return fuse_average(maps)
        if self.fusion == "vote":
            return fuse_vote(maps, self.vote_threshold).votes
        if self.fusion == "linear":
            return fuse_linear(maps, self.combiner)
        return fuse_deep(maps, tile_channels, self.combiner)

    def predict(self, tile_channels: np.ndarray) -> np.ndarray:
        return self.fuse(self.member_maps(tile_channels), tile_channels)

    def save_manifest(self, path: str | Path) -> Path:
        path = Path(path)
        if any(m.checkpoint is None for m in self.members):
            raise ValueError("all members need checkpoint paths before saving a manifest")
        doc = {
            "members": [{"checkpoint": m.checkpoint, "channels": list(m.channels)} for m in self.members],
            "fusion": self.fusion,
            "combiner": self.combiner_checkpoint,
            "vote_threshold": self.vote_threshold,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path


def load_ensemble(path: str | Path) -> Ensemble:
    """Load an ``ensemble.json``; relative checkpoint paths resolve against its directory."""
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    members = [
        Member(load_checkpoint(resolve(m["checkpoint"])), list(m["channels"]), m["checkpoint"])
        for m in doc["members"]
    ]
    combiner = None
    if doc["fusion"] in ("linear", "deep"):
        if not doc.get("combiner"):
            raise FileNotFoundError(f"{path}: no {doc['fusion']} combiner checkpoint recorded")
        combiner = load_checkpoint(resolve(doc["combiner"]))
    return Ensemble(members, doc["fusion"], combiner, doc.get("combiner"), doc.get("vote_threshold", 0.5))
