"""Parametric U-Net segmenter, the 1x1 linear combiner, and weight checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

INIT_BOUND = 0.05
# Keeps squashed outputs strictly inside (0, 1) even when float32 sigmoid saturates.
SQUASH_EPS = 1e-7

_ACTIVATIONS = {"relu": nn.ReLU, "elu": nn.ELU, "leaky_relu": nn.LeakyReLU}


def squash(logits: torch.Tensor) -> torch.Tensor:
    # Affine rescale rather than clamp: a clamp zeroes the gradient once a member saturates,
    # and a saturated member never recovers.
    return SQUASH_EPS + (1.0 - 2.0 * SQUASH_EPS) * torch.sigmoid(logits)


@dataclass
class UNetConfig:
    in_channels: int
    depth: int = 3
    base_width: int = 16
    conv_per_block: int = 2
    activation: str = "relu"
    bias: bool = True

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 1 or self.conv_per_block < 1:
            raise ValueError("base_width and conv_per_block must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def check_input(self, height: int, width: int) -> None:
        step = 2**self.depth
        if height % step or width % step:
            raise ValueError(f"input {height}x{width} not divisible by 2**depth = {step}")


def _block(cin: int, cout: int, cfg: UNetConfig) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(cfg.conv_per_block):
        layers.append(nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1, bias=cfg.bias))
        layers.append(_ACTIVATIONS[cfg.activation]())
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Encoder/decoder with max-pool downsampling, stride-2 transposed-conv
    upsampling, concatenated skips, and a 1x1 squashed output head."""

    kind = "unet"

    def __init__(self, config: UNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_width * 2**level for level in range(config.depth)]
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for w in widths:
            self.encoders.append(_block(cin, w, config))
            cin = w
        self.bottleneck = _block(cin, cin * 2, config)
        cin *= 2
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            self.upsamplers.append(nn.ConvTranspose2d(cin, w, 2, stride=2, bias=config.bias))
            self.decoders.append(_block(2 * w, w, config))
            cin = w
        self.head = nn.Conv2d(cin, 1, 1, bias=config.bias)

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self.config.check_input(x.shape[-2], x.shape[-1])
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec in zip(self.upsamplers, self.decoders):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return squash(self.logits(x))


class LinearCombiner(nn.Module):
    """Per-pixel weighted sum of m member maps plus bias, squashed."""

    kind = "linear"

    def __init__(self, n_members: int):
        super().__init__()
        if n_members < 1:
            raise ValueError("n_members must be >= 1")
        self.n_members = n_members
        self.conv = nn.Conv2d(n_members, 1, 1, bias=True)

    @property
    def in_channels(self) -> int:
        return self.n_members

    @property
    def config(self) -> dict:
        return {"n_members": self.n_members}

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return squash(self.conv(x))

    def set_weights(self, weights, bias: float = 0.0) -> None:
        w = torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=self.conv.weight.dtype)
        if w.numel() != self.n_members:
            raise ValueError(f"expected {self.n_members} weights, got {w.numel()}")
        with torch.no_grad():
            self.conv.weight.copy_(w.reshape(1, -1, 1, 1))
            self.conv.bias.fill_(bias)

    def member_weights(self) -> np.ndarray:
        return self.conv.weight.detach().cpu().numpy().reshape(-1).astype(np.float64)


def build_unet(config: UNetConfig) -> UNet:
    return UNet(config)


def init_weights(model: nn.Module, seed: int, bound: float = INIT_BOUND) -> nn.Module:
    """Draw every weight and bias i.i.d. from U(-bound, +bound)."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for p in model.parameters():
            sample = torch.rand(p.shape, generator=gen, dtype=torch.float64)
            p.copy_((2.0 * sample - 1.0) * bound)
    model.init_seed = int(seed)
    return model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def forward(model: nn.Module, inputs: np.ndarray) -> np.ndarray:
    """Run a C x H x W array through ``model``; returns an H x W map in (0, 1)."""
    arr = np.asarray(inputs)
    if arr.ndim != 3 or arr.shape[0] != model.in_channels:
        raise ValueError(f"expected ({model.in_channels}, H, W) input, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite input")
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        y = model(x)
    model.train(was_training)
    return y[0, 0].numpy()


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(model: nn.Module, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    config = asdict(model.config) if isinstance(model, UNet) else dict(model.config)
    manifest = {
        "kind": model.kind,
        "config": config,
        "seed": getattr(model, "init_seed", None),
        "dtype": "float32",
        "byte_order": "little-endian",
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    payload = b"".join(v.detach().cpu().numpy().astype("<f4").tobytes() for v in state.values())
    (path / "weights.bin").write_bytes(payload)
    (path / "weights.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> nn.Module:
    path = Path(path)
    manifest = json.loads((path / "weights.json").read_text())
    if manifest["kind"] == "unet":
        model: nn.Module = UNet(UNetConfig(**manifest["config"]))
    elif manifest["kind"] == "linear":
        model = LinearCombiner(manifest["config"]["n_members"])
    else:
        raise ValueError(f"unknown model kind {manifest['kind']!r}")
    raw = np.frombuffer((path / "weights.bin").read_bytes(), dtype="<f4")
    state = {}
    offset = 0
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if offset + n > raw.size:
            raise ValueError(f"{path / 'weights.bin'} is truncated")
        state[t["name"]] = torch.from_numpy(raw[offset : offset + n].reshape(t["shape"]).copy())
        offset += n
    if offset != raw.size:
        raise ValueError(f"{path / 'weights.bin'} has {raw.size - offset} trailing values")
    model.load_state_dict(state)
    if manifest.get("seed") is not None:
        model.init_seed = manifest["seed"]
    return model
