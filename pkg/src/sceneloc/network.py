"""Two-branch fully convolutional scene coordinate network.

The receptive branch (R1 -> R2 -> R3 -> spatial block) encodes context at
1/8 resolution. The structure branch's confidence block extracts shallow
features that feed both the coordinate head (after concatenation with the
receptive output) and the refinement block that emits the 64-channel
confidence volume.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1
CONF_EPS = 1e-6


class InvalidConfig(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class NetworkConfig:
    spatial_depth: int = 4
    input_channels: int = 3
    coordinate_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    weight_seed: int = 0
    image_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    image_std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 1 <= self.spatial_depth <= 8:
            raise InvalidConfig("spatial_depth must lie in 1..8")
        if self.input_channels != 3:
            raise InvalidConfig("input_channels must be 3")
        self.coordinate_offset = tuple(float(x) for x in self.coordinate_offset)
        self.image_mean = tuple(float(x) for x in self.image_mean)
        self.image_std = tuple(float(x) for x in self.image_std)
        if len(self.coordinate_offset) != 3:
            raise InvalidConfig("coordinate_offset must be a 3-vector")


def _conv(cin, cout, k, stride=1, relu=True):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return layers


def _encoder(cin):
    return nn.Sequential(*_conv(cin, 32, 3), *_conv(32, 64, 3, 2),
                         *_conv(64, 128, 3, 2), *_conv(128, 256, 3, 2))


class Residual(nn.Module):
    """Conv stack with an identity shortcut from after its first conv."""

    def __init__(self, head: nn.Module, body: nn.Module):
        super().__init__()
        self.head = head
        self.body = body

    def forward(self, x):
        x = self.head(x)
        return x + self.body(x)


def brelu1(x):
    """Bounded ReLU with ceiling 1 - CONF_EPS, so values lie in [0, 1)."""
    return x.clamp(0.0, 1.0 - CONF_EPS)


class SceneCoordinateNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.r1 = _encoder(cfg.input_channels)
        self.r2 = Residual(nn.Sequential(*_conv(256, 256, 3)),
                           nn.Sequential(*_conv(256, 256, 1), *_conv(256, 256, 3)))
        self.r3 = Residual(nn.Sequential(*_conv(256, 512, 3)),
                           nn.Sequential(*_conv(512, 512, 1), *_conv(512, 512, 3),
                                         *_conv(512, 512, 3, relu=False)))
        self.spatial = nn.Sequential(*[m for _ in range(cfg.spatial_depth)
                                       for m in _conv(512, 512, 1)])
        self.confidence_block = _encoder(cfg.input_channels)
        self.coord_head = nn.Sequential(*_conv(256 + 512, 512, 1), *_conv(512, 512, 1),
                                        *_conv(512, 3, 3, relu=False))
        self.refinement = nn.Sequential(*_conv(256, 128, 1), *_conv(128, 64, 1, relu=False))
        # prior of one positive channel in 64: confidences start near zero
        nn.init.constant_(self.refinement[-1].bias, -math.log(63.0))

        self.register_buffer("offset", torch.tensor(cfg.coordinate_offset, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("mean", torch.tensor(cfg.image_mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(cfg.image_std, dtype=torch.float32).view(1, 3, 1, 1))

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.mean) / self.std

    def forward_raw(self, x: torch.Tensor):
        """Returns (coord, conf_logits) where conf = brelu1(conf_logits).

        ``x`` is a normalised (B, 3, H, W) batch.
        """
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeMismatch(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise InvalidConfig(f"input size {tuple(x.shape[2:])} is not divisible by 8")
        recep = self.spatial(self.r3(self.r2(self.r1(x))))
        struct = self.confidence_block(x)
        coord = self.coord_head(torch.cat([struct, recep], dim=1)) + self.offset
        return coord, self.refinement(struct)

    def forward(self, x: torch.Tensor):
        coord, logits = self.forward_raw(x)
        return coord, brelu1(logits)


def build_network(cfg: NetworkConfig) -> SceneCoordinateNet:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(cfg.weight_seed)
        model = SceneCoordinateNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def check_input_size(height: int, width: int):
    if height % 8 or width % 8 or height <= 0 or width <= 0:
        raise InvalidConfig(f"input size {height}x{width} is not divisible by 8")


def image_to_tensor(image) -> torch.Tensor:
    """(H, W, 3) image, uint8 or float in [0, 1] -> (1, 3, H, W) float tensor."""
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeMismatch(f"image must be (H, W, 3), got {a.shape}")
    check_input_size(a.shape[0], a.shape[1])
    if a.dtype == np.uint8:
        a = a.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1), dtype=np.float32))[None]


@torch.no_grad()
def forward(model: SceneCoordinateNet, image) -> tuple[np.ndarray, np.ndarray]:
    """Inference on one (H, W, 3) image. Returns (coord 3xhxw, conf 64xhxw)."""
    was_training = model.training
    model.eval()
    try:
        x = model.normalize(image_to_tensor(image))
        coord, conf = model(x)
    finally:
        model.train(was_training)
    return coord[0].double().numpy(), conf[0].double().numpy()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def set_normalization(model: SceneCoordinateNet, mean, std):
    model.cfg.image_mean = tuple(float(x) for x in mean)
    model.cfg.image_std = tuple(float(x) for x in std)
    model.mean.copy_(torch.tensor(model.cfg.image_mean).view(1, 3, 1, 1))
    model.std.copy_(torch.tensor(model.cfg.image_std).view(1, 3, 1, 1))


def save_checkpoint(model: SceneCoordinateNet, path, extra: dict | None = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path) -> tuple[SceneCoordinateNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = build_network(NetworkConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload["extra"]
