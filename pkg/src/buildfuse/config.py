"""Run configuration: one JSON document, leaf overrides via dotted paths."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .fusion import FUSION_KINDS
from .segnet import UNetConfig
from .tilestore import SceneSpec
from .trainer import MemberSpec, PipelineConfig, TrainConfig


def _default_members() -> list[dict]:
    return [
        {"channels": [0, 1, 2], "depth": 3, "base_width": 16, "conv_per_block": 2},
        {"channels": [3, 4, 5], "depth": 3, "base_width": 16, "conv_per_block": 2},
        {"channels": [0, 6, 7], "depth": 3, "base_width": 16, "conv_per_block": 2},
    ]


@dataclass
class RunConfig:
    data_dir: str = "data"
    runs_dir: str = "runs"
    n_tiles: int = 200
    # Reference scene: moderate noise, some touching pairs and rotated footprints, one paved
    # lookalike per tile that only channels 6 and 7 give away.
    scene: dict = field(
        default_factory=lambda: {
            "channel_noise": 0.15,
            "adjacency_prob": 0.1,
            "rotate_prob": 0.2,
            "n_distractors": 1,
        }
    )
    split: list[float] = field(default_factory=lambda: [0.7, 0.3, 0.0])
    members: list[dict] = field(default_factory=_default_members)
    combiner: dict = field(default_factory=lambda: {"depth": 3, "base_width": 16, "conv_per_block": 2})
    train: dict = field(
        default_factory=lambda: {
            "base": {},
            "linear": {"learning_rate": 1e-2},
            "deep": {},
        }
    )
    stacking: str = "train"
    fusions: list[str] = field(default_factory=lambda: list(FUSION_KINDS))
    eval_split: str = "val"
    threshold: float = 0.5
    min_area: float = 0.0
    iou_threshold: float = 0.5
    match_order: str = "iou"
    vote_threshold: float = 0.5
    overlay: dict = field(default_factory=lambda: {"channels": [0, 1, 2], "scale": 4, "line_width": 1})
    seed: int = 0
    # Directory that relative paths resolve against; not serialized.
    base_dir: str = field(default=".", repr=False, compare=False)

    # --- construction ---

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | Path = ".") -> "RunConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(doc), base_dir=str(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        doc = apply_overrides(doc, overrides or [])
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("base_dir")
        return doc

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    # --- derived views ---

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def data_path(self) -> Path:
        return self.resolve(self.data_dir)

    @property
    def runs_path(self) -> Path:
        return self.resolve(self.runs_dir)

    def scene_spec(self, seed: int) -> SceneSpec:
        doc = dict(self.scene)
        if "size_range" in doc:
            doc["size_range"] = tuple(doc["size_range"])
        return SceneSpec(**doc, seed=seed)

    def train_config(self, stage: str) -> TrainConfig:
        doc = dict(self.train.get(stage, {}))
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        return TrainConfig(**doc)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            members=[MemberSpec(**m) for m in self.members],
            combiner_depth=self.combiner.get("depth", 3),
            combiner_base_width=self.combiner.get("base_width", 16),
            combiner_conv_per_block=self.combiner.get("conv_per_block", 2),
            base_train=self.train_config("base"),
            linear_train=self.train_config("linear"),
            deep_train=self.train_config("deep"),
            stacking=self.stacking,
            seed=self.seed,
        )

    def validate(self) -> None:
        if self.n_tiles < 1:
            raise ValueError("n_tiles must be >= 1")
        spec = self.scene_spec(0)
        spec.validate()
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be three numbers summing to 1, got {self.split}")
        if len(self.members) < 2:
            raise ValueError("at least two members are required")
        for m in self.members:
            if not m.get("channels") or max(m["channels"]) >= spec.n_channels or min(m["channels"]) < 0:
                raise ValueError(f"member channels {m.get('channels')} out of range for {spec.n_channels} channels")
            UNetConfig(len(m["channels"]), m.get("depth", 3), m.get("base_width", 16), m.get("conv_per_block", 2)).validate()
        for stage in ("base", "linear", "deep"):
            self.train_config(stage).validate()
        self.pipeline_config().validate()
        bad = [f for f in self.fusions if f not in FUSION_KINDS]
        if bad:
            raise ValueError(f"unknown fusion kinds {bad}")
        if self.eval_split not in ("train", "val", "test", "all"):
            raise ValueError(f"unknown eval_split {self.eval_split!r}")
        if self.match_order not in ("iou", "score"):
            raise ValueError(f"unknown match_order {self.match_order!r}")
        if not isinstance(self.seed, int):
            raise ValueError("seed must be an explicit integer")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node: Any = doc
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        if isinstance(node, list):
            node[int(parts[-1])] = _parse_value(value)
        else:
            node[parts[-1]] = _parse_value(value)
    return doc
