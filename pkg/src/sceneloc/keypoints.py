"""Turn coordinate/confidence maps into refined 2D-3D correspondences.

Each 8x8 image patch owns one 3D prediction. The 64-channel confidence
volume at that patch scores every pixel of the patch; channel ``c`` maps to
the in-patch offset ``(i, j) = (c % 8, c // 8)`` (column, row). The best
channel refines the keypoint position and the channel max acts as the
patch's reliability, filtered by an alpha-interpolated threshold.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .pnp import Correspondences

PATCH = 8
N_CHANNELS = PATCH * PATCH


class NoSurvivors(RuntimeError):
    """Every patch fell below the dynamic threshold."""


class PatchIndex(NamedTuple):
    u: int  # column
    v: int  # row


class PixelBias(NamedTuple):
    i: int  # column offset in the patch
    j: int  # row offset in the patch


@dataclass(frozen=True)
class SelectionConfig:
    alpha: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def channel_to_bias(c):
    return c % PATCH, c // PATCH


def bias_to_channel(i, j):
    return j * PATCH + i


def patch_confidence(conf) -> np.ndarray:
    """Channel max of a (64, H, W) confidence map -> (H, W)."""
    conf = np.asarray(conf)
    if conf.ndim != 3 or conf.shape[0] != N_CHANNELS:
        raise ValueError(f"confidence map must be (64, H, W), got {conf.shape}")
    return conf.max(axis=0)


def argmax_bias(conf, p: PatchIndex) -> PixelBias:
    # np.argmax returns the first maximum, i.e. the lowest channel on ties
    c = int(np.argmax(np.asarray(conf)[:, p.v, p.u]))
    i, j = channel_to_bias(c)
    return PixelBias(int(i), int(j))


def argmax_bias_map(conf) -> np.ndarray:
    """(H, W, 2) array of (i, j) offsets for every patch."""
    c = np.argmax(np.asarray(conf), axis=0)
    i, j = channel_to_bias(c)
    return np.stack([i, j], axis=-1)


def dynamic_threshold(c, alpha: float) -> float:
    c = np.asarray(c)
    if c.size == 0:
        raise ValueError("confidence grid is empty")
    return float(alpha * c.max() + (1.0 - alpha) * c.min())


def soft_argmax_bias(conf, p: PatchIndex, temperature: float) -> tuple[float, float]:
    """Expected (i, j) under softmax(conf / temperature) over the 64 channels."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    x = np.asarray(conf, dtype=np.float64)[:, p.v, p.u] / temperature
    w = np.exp(x - x.max())
    w /= w.sum()
    i, j = channel_to_bias(np.arange(N_CHANNELS))
    return float(w @ i), float(w @ j)


def refined_pixels(conf) -> np.ndarray:
    """(H, W, 2) refined keypoint pixel (x, y) for every patch."""
    h, w = np.asarray(conf).shape[1:]
    bias = argmax_bias_map(conf)
    vv, uu = np.mgrid[0:h, 0:w]
    x = PATCH * uu + bias[..., 0] + 0.5
    y = PATCH * vv + bias[..., 1] + 0.5
    return np.stack([x, y], axis=-1).astype(np.float64)


def select_correspondences(coord, conf, cfg: SelectionConfig, image_size) -> Correspondences:
    """Keep patches whose confidence reaches the dynamic threshold.

    Args:
        coord: (3, H, W) scene coordinates.
        conf: (64, H, W) confidence volume.
        cfg: selection settings (alpha).
        image_size: (height, width) in pixels; must equal 8 * (H, W).

    Returns:
        Correspondences in row-major (v, u) patch order.
    """
    coord = np.asarray(coord)
    conf = np.asarray(conf)
    h, w = conf.shape[1:]
    if coord.shape != (3, h, w) or tuple(image_size) != (PATCH * h, PATCH * w):
        raise ValueError(f"inconsistent shapes: coord {coord.shape}, conf {conf.shape}, image {image_size}")
    c = patch_confidence(conf)
    keep = c >= dynamic_threshold(c, cfg.alpha)
    if not keep.any():
        raise NoSurvivors("no patch reaches the confidence threshold")
    pix = refined_pixels(conf)[keep]
    world = coord.transpose(1, 2, 0)[keep]
    return Correspondences(pix, world, c[keep])
