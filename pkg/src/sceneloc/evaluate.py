"""Localization harness: per-frame pose recovery, median error reports,
alpha sweeps and trajectory export."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .ba_trainer import confidence_targets
from .data import Frame
from .geometry import Pose, angle_error_deg
from .keypoints import NoSurvivors, SelectionConfig, dynamic_threshold, patch_confidence, select_correspondences
from .network import CONF_EPS, SceneCoordinateNet, forward
from .pnp import DegenerateConfiguration, InsufficientInliers, RansacConfig, ransac_pnp, refine_pose

REPORT_VERSION = 1
FAILURES = (NoSurvivors, InsufficientInliers, DegenerateConfiguration)


class Predictor(Protocol):
    def predict(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]: ...


class NetworkPredictor:
    def __init__(self, model: SceneCoordinateNet):
        self.model = model

    def predict(self, frame: Frame):
        return forward(self.model, frame.image)


class GroundTruthPredictor:
    """Bypass mode: stored ground-truth coordinates and a one-hot confidence
    volume at the channel holding each coordinate's true projection."""

    def predict(self, frame: Frame):
        coords = frame.coords
        if coords is None:
            raise ValueError(f"frame {frame.name} has no ground-truth coordinates")
        valid, channel = confidence_targets(coords, frame.pose, frame.intrinsics)
        conf = np.zeros((64,) + valid.shape)
        vv, uu = np.nonzero(valid)
        conf[channel[vv, uu], vv, uu] = 1.0 - CONF_EPS
        return coords, conf


class CachedPredictor:
    """Memoizes another predictor by frame name."""

    def __init__(self, inner: Predictor):
        self.inner = inner
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def predict(self, frame: Frame):
        if frame.name not in self._cache:
            self._cache[frame.name] = self.inner.predict(frame)
        return self._cache[frame.name]


def as_predictor(model) -> Predictor:
    if isinstance(model, torch.nn.Module):
        return NetworkPredictor(model)
    return model


@dataclass
class FrameResult:
    name: str
    localized: bool
    translation_cm: float | None = None
    rotation_deg: float | None = None
    survivors: int = 0
    inliers: int = 0
    mean_residual_px: float | None = None
    rotation: list | None = None  # estimated world-to-camera pose
    translation: list | None = None
    failure: str | None = None


@dataclass
class EvalReport:
    frames: list[FrameResult]
    alpha: float
    median_translation_cm: float | None = None
    median_rotation_deg: float | None = None
    failures: int = 0
    mean_survivors: float = 0.0

    @property
    def localized(self) -> list[FrameResult]:
        return [f for f in self.frames if f.localized]

    def to_text(self) -> str:
        summary = {"version": REPORT_VERSION, "alpha": self.alpha, "frames": len(self.frames),
                   "failures": self.failures,
                   "median_translation_cm": self.median_translation_cm,
                   "median_rotation_deg": self.median_rotation_deg,
                   "mean_survivors": self.mean_survivors}
        return json.dumps({"summary": summary, "per_frame": [asdict(f) for f in self.frames]}, indent=2)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        s = d["summary"]
        return cls([FrameResult(**f) for f in d["per_frame"]], s["alpha"], s["median_translation_cm"],
                   s["median_rotation_deg"], s["failures"], s["mean_survivors"])


def median(values) -> float | None:
    """None for an empty list; mean of the central pair for even counts."""
    if len(values) == 0:
        return None
    return float(np.median(np.asarray(values, dtype=float)))


def frame_seed(base: int, name: str) -> int:
    # per-frame RANSAC seed that depends on the frame, not its position
    return (base * 1_000_003 + zlib.crc32(name.encode())) % 2**32


@dataclass
class Diagnostics:
    survivors: int
    inliers: int
    mean_residual_px: float


def localize_frame(model, frame: Frame, alpha: float, ransac_cfg: RansacConfig = RansacConfig()):
    """Forward, select, RANSAC, refine. Returns (Pose, Diagnostics).

    Raises NoSurvivors / InsufficientInliers / DegenerateConfiguration on
    failure.
    """
    coord, conf = as_predictor(model).predict(frame)
    return _localize_maps(coord, conf, frame, alpha, ransac_cfg)


def _localize_maps(coord, conf, frame: Frame, alpha, ransac_cfg: RansacConfig):
    h, w = frame.image.shape[:2]
    corrs = select_correspondences(coord, conf, SelectionConfig(alpha), (h, w))
    cfg = replace(ransac_cfg, rng_seed=frame_seed(ransac_cfg.rng_seed, frame.name))
    est = ransac_pnp(corrs, frame.intrinsics, cfg)
    pose = refine_pose(est.pose, corrs[est.inlier_mask], frame.intrinsics)
    return pose, Diagnostics(len(corrs), est.num_inliers, est.mean_inlier_residual_px)


def _frame_result(frame: Frame, coord, conf, alpha, ransac_cfg) -> FrameResult:
    try:
        pose, diag = _localize_maps(coord, conf, frame, alpha, ransac_cfg)
    except FAILURES as e:
        return FrameResult(frame.name, False, survivors=_survivor_count(conf, alpha), failure=type(e).__name__)
    t_cm = 100.0 * float(np.linalg.norm(pose.camera_center() - frame.pose.camera_center()))
    return FrameResult(frame.name, True, t_cm, angle_error_deg(frame.pose.rotation, pose.rotation),
                       diag.survivors, diag.inliers, diag.mean_residual_px,
                       pose.rotation.tolist(), pose.translation.tolist())


def _survivor_count(conf, alpha) -> int:
    c = patch_confidence(conf)
    finite = np.isfinite(c)
    if not finite.any():
        return 0
    return int((c[finite] >= dynamic_threshold(c[finite], alpha)).sum())


def summarize(results: Sequence[FrameResult], alpha: float) -> EvalReport:
    ok = [r for r in results if r.localized]
    return EvalReport(list(results), alpha,
                      median([r.translation_cm for r in ok]),
                      median([r.rotation_deg for r in ok]),
                      len(results) - len(ok),
                      float(np.mean([r.survivors for r in results])) if results else 0.0)


def evaluate(model, dataset, alpha: float = 0.8, ransac_cfg: RansacConfig = RansacConfig()) -> EvalReport:
    frames = sorted(dataset, key=lambda f: f.name)
    if not frames:
        raise ValueError("evaluate needs a non-empty split")
    predictor = as_predictor(model)
    results = []
    for frame in frames:
        coord, conf = predictor.predict(frame)
        results.append(_frame_result(frame, coord, conf, alpha, ransac_cfg))
    return summarize(results, alpha)


@dataclass
class SweepRow:
    alpha: float
    median_translation_cm: float | None
    median_rotation_deg: float | None
    mean_survivors: float
    failures: int
    survivors: list[int] = field(default_factory=list)


def alpha_sweep(model, dataset, alphas, ransac_cfg: RansacConfig = RansacConfig()) -> list[SweepRow]:
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    predictor = CachedPredictor(as_predictor(model))
    rows = []
    for a in alphas:
        rep = evaluate(predictor, dataset, a, ransac_cfg)
        rows.append(SweepRow(a, rep.median_translation_cm, rep.median_rotation_deg,
                             rep.mean_survivors, rep.failures, [f.survivors for f in rep.frames]))
    return rows


PAPER_ALPHAS = tuple(round(0.70 + 0.05 * i, 2) for i in range(6))


def export_trajectory(report: EvalReport, dataset, path) -> Path:
    """Whitespace table: name, GT centre xyz, estimated centre xyz (nan if failed)."""
    gt = {f.name: f.pose for f in dataset}
    lines = ["# name gt_x gt_y gt_z est_x est_y est_z"]
    for r in report.frames:
        c = gt[r.name].camera_center()
        if r.localized:
            e = Pose(np.array(r.rotation), np.array(r.translation)).camera_center()
        else:
            e = np.full(3, np.nan)
        lines.append(" ".join([r.name] + [repr(float(x)) for x in (*c, *e)]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_trajectory(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, *vals = line.split()
        v = np.array([float(x) for x in vals])
        out[name] = (v[:3], v[3:])
    return out
