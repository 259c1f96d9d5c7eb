"""Encoder-decoder generator with skip connections and the PatchGAN discriminator.

The generator emits ``3 * T`` channels, one RGB-shaped image per task; for the
multitask schemes the mask image comes first, then the suppressed image. Batch
normalization always normalizes with the statistics of the current batch (no
running averages), so a forward pass depends only on weights and input.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

KERNEL = 4
MAX_DEPTH = 8
INIT_STD = 0.02
LEAK = 0.2
DROPOUT = 0.5
DROPOUT_LAYERS = 3

TASK_SEG, TASK_BONE = "seg", "bone"

# scheme -> (tasks, dilated)
SCHEMES = {
    "st-seg": ((TASK_SEG,), False),
    "st-bone": ((TASK_BONE,), False),
    "st-seg-d": ((TASK_SEG,), True),
    "st-bone-d": ((TASK_BONE,), True),
    "mt": ((TASK_SEG, TASK_BONE), False),
    "mtdg": ((TASK_SEG, TASK_BONE), True),
}


def encoder_depth(image_size: int) -> int:
    """Number of stride-2 encoder layers; the innermost feature map is never below 2x2."""
    if image_size < 8:
        raise ConfigError(f"image_size {image_size} too small")
    depth = min(MAX_DEPTH, int(math.floor(math.log2(image_size))) - 1)
    if image_size % (2 ** depth):
        raise ConfigError(f"image_size {image_size} must be divisible by {2 ** depth}")
    return depth


def disc_downsamplings(image_size: int) -> int:
    return max(1, min(3, int(math.floor(math.log2(image_size))) - 3))


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "mtdg"
    image_size: int = 512
    base_width: int = 64
    kernel: int = KERNEL

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {sorted(SCHEMES)}")
        if self.kernel != KERNEL:
            raise ConfigError("only 4x4 kernels are supported")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        encoder_depth(self.image_size)

    @property
    def tasks(self) -> tuple[str, ...]:
        return SCHEMES[self.scheme][0]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def dilated(self) -> bool:
        return SCHEMES[self.scheme][1]

    @property
    def out_channels(self) -> int:
        return 3 * self.n_tasks

    @property
    def depth(self) -> int:
        return encoder_depth(self.image_size)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "image_size": self.image_size,
                "base_width": self.base_width, "kernel": self.kernel}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "deconv"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    dilation: int
    padding: int
    norm: bool
    activation: str  # "lrelu" | "relu" | "tanh" | "sigmoid"
    dropout: float = 0.0
    skip_from: str | None = None  # encoder layer concatenated onto this layer's input


def _scale(width: int, base_width: int) -> int:
    return max(1, width * base_width // 64)


def generator_layout(cfg: SchemeConfig) -> tuple[list[LayerSpec], list[LayerSpec]]:
    depth = cfg.depth
    widths = [_scale(w, cfg.base_width) for w in (64, 128, 256, 512, 512, 512, 512, 512)[:depth]]
    enc = []
    prev = 3
    for i, w in enumerate(widths, start=1):
        # dilated layers are 2 .. depth-1 (2 through 7 at full depth)
        d = 2 if cfg.dilated and 2 <= i <= depth - 1 else 1
        enc.append(LayerSpec(f"enc{i}", "conv", prev, w, KERNEL, 2, d, 1 + (d - 1) * 2,
                             norm=i > 1, activation="lrelu"))
        prev = w
    dec = []
    for j in range(depth):
        last = j == depth - 1
        skip = None if j == 0 else f"enc{depth - j}"
        cin = prev if j == 0 else prev + widths[depth - 1 - j]
        cout = cfg.out_channels if last else widths[depth - 2 - j]
        dec.append(LayerSpec(f"dec{j + 1}", "deconv", cin, cout, KERNEL, 2, 1, 1,
                             norm=not last, activation="tanh" if last else "relu",
                             dropout=DROPOUT if (j < DROPOUT_LAYERS and not last) else 0.0,
                             skip_from=skip))
        prev = cout
    return enc, dec


def discriminator_layout(cfg: SchemeConfig) -> list[LayerSpec]:
    n_down = disc_downsamplings(cfg.image_size)
    widths = [_scale(64 * min(2 ** i, 8), cfg.base_width) for i in range(n_down + 1)] + [1]
    strides = [2] * n_down + [1, 1]
    layers = []
    prev = 3 * (1 + cfg.n_tasks)
    for i, (w, s) in enumerate(zip(widths, strides), start=1):
        last = i == len(widths)
        layers.append(LayerSpec(f"disc{i}", "conv", prev, w, KERNEL, s, 1, 1,
                                norm=1 < i < len(widths),
                                activation="sigmoid" if last else "lrelu"))
        prev = w
    return layers


def conv_output_size(size: int, spec: LayerSpec) -> int:
    if spec.kind == "deconv":
        return (size - 1) * spec.stride - 2 * spec.padding + spec.dilation * (spec.kernel - 1) + 1
    return (size + 2 * spec.padding - spec.dilation * (spec.kernel - 1) - 1) // spec.stride + 1


def patch_map_size(cfg: SchemeConfig) -> int:
    size = cfg.image_size
    for spec in discriminator_layout(cfg):
        size = conv_output_size(size, spec)
    return size


class _Block(nn.Module):
    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        Conv = nn.ConvTranspose2d if spec.kind == "deconv" else nn.Conv2d
        self.conv = Conv(spec.in_channels, spec.out_channels, spec.kernel, stride=spec.stride,
                         padding=spec.padding, dilation=spec.dilation)
        self.norm = (nn.BatchNorm2d(spec.out_channels, track_running_stats=False)
                     if spec.norm else None)

    def forward(self, x, training=False):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.spec.dropout:
            x = F.dropout(x, self.spec.dropout, training=training)
        act = self.spec.activation
        if act == "lrelu":
            return F.leaky_relu(x, LEAK)
        if act == "relu":
            return F.relu(x)
        if act == "tanh":
            return torch.tanh(x)
        return torch.sigmoid(x)


def _init_weights(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                m.bias.zero_()


class Generator(nn.Module):
    def __init__(self, cfg: SchemeConfig):
        super().__init__()
        self.cfg = cfg
        enc, dec = generator_layout(cfg)
        self.encoder = nn.ModuleList(_Block(s) for s in enc)
        self.decoder = nn.ModuleList(_Block(s) for s in dec)

    @property
    def layers(self) -> list[LayerSpec]:
        return [b.spec for b in self.encoder] + [b.spec for b in self.decoder]

    def encode(self, x) -> list[torch.Tensor]:
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, x, training: bool = False):
        feats = self.encode(x)
        h = feats[-1]
        n = len(feats)
        for j, block in enumerate(self.decoder):
            if j:
                h = torch.cat([h, feats[n - 1 - j]], dim=1)
            h = block(h, training=training)
        return h


class Discriminator(nn.Module):
    def __init__(self, cfg: SchemeConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(_Block(s) for s in discriminator_layout(cfg))

    @property
    def layers(self) -> list[LayerSpec]:
        return [b.spec for b in self.blocks]

    def forward(self, x, y):
        h = torch.cat([x, y], dim=1)
        for block in self.blocks:
            h = block(h)
        return h


def build_generator(cfg: SchemeConfig, seed: int = 0) -> Generator:
    g = Generator(cfg)
    _init_weights(g, seed)
    return g


def build_discriminator(cfg: SchemeConfig, seed: int = 0) -> Discriminator:
    d = Discriminator(cfg)
    # offset keeps the two networks' draws independent under one user seed
    _init_weights(d, seed + 1_000_003)
    return d


def _check_batch(x: torch.Tensor, cfg: SchemeConfig, channels: int, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected N x C x H x W, got {tuple(x.shape)}")
    if x.shape[1] != channels or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ShapeError(f"{what}: expected (N, {channels}, {cfg.image_size}, {cfg.image_size}), "
                         f"got {tuple(x.shape)}")


def generator_forward(gen: Generator, X: torch.Tensor, training: bool = False) -> torch.Tensor:
    """Run the generator on a batch; dropout is active only when ``training``."""
    _check_batch(X, gen.cfg, 3, "generator input")
    return gen(X, training=training)


def discriminator_forward(disc: Discriminator, X: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    """Score the pairs X || Y; returns an N x 1 x k x k map of probabilities."""
    cfg = disc.cfg
    _check_batch(X, cfg, 3, "discriminator input")
    _check_batch(Y, cfg, cfg.out_channels, "discriminator target")
    return disc(X, Y)


def count_parameters(*modules: nn.Module) -> int:
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)


def receptive_field(cfg: SchemeConfig, layer: int) -> int:
    """Receptive field (pixels per side) of one unit after encoder layer ``layer``."""
    enc, _ = generator_layout(cfg)
    if not 1 <= layer <= len(enc):
        raise ConfigError(f"layer must be in [1, {len(enc)}], got {layer}")
    r, jump = 1, 1
    for spec in enc[:layer]:
        r += spec.dilation * (spec.kernel - 1) * jump
        jump *= spec.stride
    return r


def describe(cfg: SchemeConfig) -> dict:
    """Self-describing architecture record stored with checkpoints."""
    enc, dec = generator_layout(cfg)
    return {
        "config": cfg.to_dict(),
        "tasks": list(cfg.tasks),
        "generator": {"encoder": [asdict(s) for s in enc], "decoder": [asdict(s) for s in dec]},
        "discriminator": [asdict(s) for s in discriminator_layout(cfg)],
        "patch_map": patch_map_size(cfg),
    }


def describe_text(cfg: SchemeConfig) -> str:
    return json.dumps(describe(cfg), indent=2, sort_keys=True)


def to_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x C arrays into an N x C x H x W tensor."""
    arr = np.stack([np.asarray(a) for a in images]) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def from_batch(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)
