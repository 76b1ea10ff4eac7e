"""Deterministic training loop with per-epoch validation and best-epoch selection,
plus the end-to-end base-models-then-combiners pipeline."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .fusion import Ensemble, Member, stack_deep_inputs
from .jaccard import jaccard_image, soft_jaccard_loss
from .segnet import (
    LinearCombiner,
    UNetConfig,
    build_unet,
    forward,
    init_weights,
    save_checkpoint,
)
from .tilestore import AUGMENTATIONS, DatasetSplit, Tile

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 1
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    # Larger than the usual 1e-8: with the small uniform init, early gradients are tiny and a
    # near-zero denominator lets every weight take a full step at once; the output then
    # saturates and the member never recovers.
    eps: float = 1e-4
    seed: int = 0
    augment: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Sample:
    id: str
    inputs: np.ndarray  # (C, H, W)
    target: np.ndarray  # (H, W)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_jaccard: float
    seconds: float
    iterations: int


@dataclass
class TrainLog:
    stage: str
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: str | None = None
    optimizer: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def val_scores(self) -> list[float]:
        return [r.val_jaccard for r in self.records]

    @property
    def best_val(self) -> float:
        return self.records[self.best_epoch].val_jaccard

    def to_jsonl(self) -> str:
        lines = [json.dumps({"stage": self.stage, **asdict(r)}) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        summary = {
            "stage": self.stage,
            "best_epoch": self.best_epoch,
            "best_checkpoint": self.best_checkpoint,
            "optimizer": self.optimizer,
        }
        path.with_suffix(".summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        return path


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate)


def train_step(model: nn.Module, optimizer: torch.optim.Optimizer, x: torch.Tensor, y: torch.Tensor) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = soft_jaccard_loss(y, model(x))
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _augment_tensor(x: torch.Tensor, name: str) -> torch.Tensor:
    if name == "identity":
        return x
    if name.startswith("rot"):
        return torch.rot90(x, int(name[3:]) // 90, dims=(-2, -1))
    if name == "flip_h":
        return torch.flip(x, dims=(-1,))
    if name == "flip_v":
        return torch.flip(x, dims=(-2,))
    raise KeyError(name)


def evaluate(predictor: nn.Module | Callable[[np.ndarray], np.ndarray], samples: Sequence[Sample]) -> float:
    """Arithmetic mean of the per-sample Jaccard coefficient."""
    if not samples:
        raise ValueError("no samples to evaluate")
    predict = (lambda x: forward(predictor, x)) if isinstance(predictor, nn.Module) else predictor
    scores = [jaccard_image(s.target, predict(s.inputs)) for s in samples]
    return float(np.mean(np.asarray(scores, dtype=np.float64)))


def iterations_per_epoch(n_train: int, config: TrainConfig) -> int:
    n = n_train * (len(AUGMENTATIONS) if config.augment else 1)
    return math.ceil(n / config.batch_size)


def train(
    model: nn.Module,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    stage: str = "model",
) -> TrainLog:
    """Minimise the Jaccard loss; keep the weights of the best validation epoch.

    On return ``model`` holds the best-epoch weights.
    """
    config.validate()
    if not train_samples or not val_samples:
        raise ValueError(f"{stage}: train and validation sets must be non-empty")
    for s in list(train_samples) + list(val_samples):
        if s.inputs.shape[0] != model.in_channels:
            raise ValueError(f"{stage}: sample {s.id} has {s.inputs.shape[0]} channels, model takes {model.in_channels}")

    dtype = next(model.parameters()).dtype
    xs = [torch.from_numpy(np.ascontiguousarray(s.inputs)).to(dtype) for s in train_samples]
    ys = [torch.from_numpy(np.ascontiguousarray(s.target)).to(dtype)[None] for s in train_samples]
    augs = AUGMENTATIONS if config.augment else ("identity",)
    items = [(i, a) for i in range(len(xs)) for a in augs]

    optimizer = make_optimizer(model, config)
    trainlog = TrainLog(
        stage=stage,
        optimizer={
            "name": config.optimizer,
            "learning_rate": config.learning_rate,
            "betas": list(config.betas),
            "eps": config.eps,
            "note": "optimizer and learning rate are conventions, not taken from the source method",
        },
    )
    best_state = None
    ckpt_path = Path(checkpoint_dir) / "best" if checkpoint_dir is not None else None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(items))
        total = 0.0
        steps = 0
        for start in range(0, len(order), config.batch_size):
            batch = [items[k] for k in order[start : start + config.batch_size]]
            x = torch.stack([_augment_tensor(xs[i], a) for i, a in batch])
            y = torch.stack([_augment_tensor(ys[i], a) for i, a in batch])
            loss = train_step(model, optimizer, x, y)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"{stage}: non-finite train loss at epoch {epoch}, step {steps}")
            total += loss
            steps += 1
        val = evaluate(model, val_samples)
        record = EpochRecord(epoch, total / steps, val, time.perf_counter() - t0, steps)
        trainlog.records.append(record)
        log.info("%s epoch %d loss %.4f val_jaccard %.4f", stage, epoch, record.loss, val)
        if trainlog.best_epoch < 0 or val > trainlog.best_val:
            trainlog.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if ckpt_path is not None:
                save_checkpoint(model, ckpt_path, extra={"stage": stage, "epoch": epoch, "val_jaccard": val})

    model.load_state_dict(best_state)
    if ckpt_path is not None:
        trainlog.best_checkpoint = str(ckpt_path)
        trainlog.write(Path(checkpoint_dir) / "trainlog.jsonl")
    return trainlog


# --- pipeline ---------------------------------------------------------------


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


@dataclass
class MemberSpec:
    channels: list[int]
    depth: int = 3
    base_width: int = 16
    conv_per_block: int = 2


@dataclass
class PipelineConfig:
    members: list[MemberSpec] = field(
        default_factory=lambda: [MemberSpec([0, 1, 2]), MemberSpec([3, 4, 5]), MemberSpec([0, 6, 7])]
    )
    combiner_depth: int = 3
    combiner_base_width: int = 16
    combiner_conv_per_block: int = 2
    base_train: TrainConfig = field(default_factory=TrainConfig)
    linear_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-2))
    deep_train: TrainConfig = field(default_factory=TrainConfig)
    # "train": combiners learn from member predictions on the train tiles.
    # "crossfit": train-tile maps come from 2-fold out-of-fold member models.
    stacking: str = "train"
    seed: int = 0

    def validate(self) -> None:
        if len(self.members) < 2:
            raise ValueError("need at least two members")
        if self.stacking not in ("train", "crossfit"):
            raise ValueError(f"unknown stacking mode {self.stacking!r}")


@dataclass
class EnsembleArtifacts:
    member_checkpoints: list[str]
    combiner_checkpoints: dict[str, str]
    logs: dict[str, TrainLog]
    ensemble_manifests: dict[str, str]
    member_maps: dict[str, list[np.ndarray]]
    ensembles: dict[str, Ensemble]
    complete: bool = True


def _member_samples(tiles: Sequence[Tile], channels: list[int]) -> list[Sample]:
    return [Sample(t.id, t.channels[channels], t.mask.astype(np.float32)) for t in tiles]


def _train_member(spec: MemberSpec, index: int, train_tiles, val_tiles, cfg: PipelineConfig, out: Path | None, tag: str):
    model = build_unet(
        UNetConfig(len(spec.channels), spec.depth, spec.base_width, spec.conv_per_block)
    )
    init_weights(model, derive_seed(cfg.seed, 1, index, len(tag)))
    tcfg = TrainConfig(**{**asdict(cfg.base_train), "seed": derive_seed(cfg.seed, 2, index, len(tag))})
    trainlog = train(
        model,
        _member_samples(train_tiles, spec.channels),
        _member_samples(val_tiles, spec.channels),
        tcfg,
        out,
        stage=tag,
    )
    return model, trainlog


def train_pipeline(
    tiles: Sequence[Tile],
    split: DatasetSplit,
    config: PipelineConfig,
    out_dir: str | Path | None = None,
) -> EnsembleArtifacts:
    """Train the members on their channel subsets, then the linear and deep combiners.

    If any stage fails, ``out_dir/INCOMPLETE`` names it and the error propagates.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "INCOMPLETE").unlink(missing_ok=True)
    try:
        return _train_pipeline(tiles, split, config, out)
    except Exception as exc:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "INCOMPLETE").write_text(f"{type(exc).__name__}: {exc}\n")
        raise


def _train_pipeline(tiles, split, config: PipelineConfig, out: Path | None) -> EnsembleArtifacts:
    config.validate()
    by_id = {t.id: t for t in tiles}
    train_tiles = [by_id[i] for i in split.train_ids]
    val_tiles = [by_id[i] for i in split.val_ids]
    n_channels = tiles[0].channels.shape[0]
    for spec in config.members:
        if max(spec.channels) >= n_channels:
            raise ValueError(f"member channels {spec.channels} exceed tile channel count {n_channels}")

    logs: dict[str, TrainLog] = {}
    members: list[Member] = []
    for i, spec in enumerate(config.members):
        tag = f"member{i}"
        model, logs[tag] = _train_member(spec, i, train_tiles, val_tiles, config, out / "members" / tag if out else None, tag)
        ckpt = f"members/{tag}/best" if out else None
        members.append(Member(model, list(spec.channels), ckpt))

    maps = {t.id: [m.predict(t.channels) for m in members] for t in tiles}
    if config.stacking == "crossfit":
        maps.update(_crossfit_maps(train_tiles, val_tiles, config, out))

    def combiner_samples(ts, deep: bool) -> list[Sample]:
        return [
            Sample(
                t.id,
                stack_deep_inputs(maps[t.id], t.channels) if deep else np.stack(maps[t.id]),
                t.mask.astype(np.float32),
            )
            for t in ts
        ]

    m = len(members)
    linear = LinearCombiner(m)
    init_weights(linear, derive_seed(config.seed, 3))
    lcfg = TrainConfig(**{**asdict(config.linear_train), "seed": derive_seed(config.seed, 4)})
    logs["linear"] = train(
        linear,
        combiner_samples(train_tiles, False),
        combiner_samples(val_tiles, False),
        lcfg,
        out / "combiners" / "linear" if out else None,
        stage="linear",
    )
    deep = build_unet(
        UNetConfig(m + n_channels, config.combiner_depth, config.combiner_base_width, config.combiner_conv_per_block)
    )
    init_weights(deep, derive_seed(config.seed, 5))
    dcfg = TrainConfig(**{**asdict(config.deep_train), "seed": derive_seed(config.seed, 6)})
    logs["deep"] = train(
        deep,
        combiner_samples(train_tiles, True),
        combiner_samples(val_tiles, True),
        dcfg,
        out / "combiners" / "deep" if out else None,
        stage="deep",
    )

    combiner_ckpts = {"linear": "combiners/linear/best", "deep": "combiners/deep/best"} if out else {}
    manifests: dict[str, str] = {}
    ensembles = {
        "average": Ensemble(members, "average"),
        "vote": Ensemble(members, "vote"),
        "linear": Ensemble(members, "linear", linear, combiner_ckpts.get("linear")),
        "deep": Ensemble(members, "deep", deep, combiner_ckpts.get("deep")),
    }
    if out:
        for kind, ens in ensembles.items():
            manifests[kind] = str(ens.save_manifest(out / f"ensemble-{kind}.json"))
    return EnsembleArtifacts(
        member_checkpoints=[m.checkpoint for m in members] if out else [],
        combiner_checkpoints=combiner_ckpts,
        logs=logs,
        ensemble_manifests=manifests,
        member_maps=maps,
        ensembles=ensembles,
        complete=True,
    )


def _crossfit_maps(train_tiles, val_tiles, config: PipelineConfig, out: Path | None) -> dict[str, list[np.ndarray]]:
    """Out-of-fold member maps for the train tiles (two folds)."""
    order = np.random.default_rng(derive_seed(config.seed, 7)).permutation(len(train_tiles))
    folds = [[train_tiles[k] for k in order[f::2]] for f in range(2)]
    if min(len(f) for f in folds) == 0:
        raise ValueError("crossfit stacking needs at least two train tiles")
    maps: dict[str, list[np.ndarray]] = {t.id: [] for t in train_tiles}
    for i, spec in enumerate(config.members):
        for f in range(2):
            tag = f"member{i}-fold{f}"
            model, _ = _train_member(spec, i, folds[1 - f], val_tiles, config, out / "crossfit" / tag if out else None, tag)
            for t in folds[f]:
                maps[t.id].append(forward(model, t.channels[spec.channels]))
    return maps
