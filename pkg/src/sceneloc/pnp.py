"""Absolute pose from 2D-3D correspondences.

Three pieces: a normalised DLT solver over >= 6 points, a seeded RANSAC
wrapper around it, and Gauss-Newton refinement of the reprojection error.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .geometry import MIN_DEPTH, Intrinsics, PointBehindCamera, Pose, rotation_from_rotvec, skew

MIN_DLT_POINTS = 6
SAMPLE_REFINE_ITERATIONS = 5


class DegenerateConfiguration(ValueError):
    pass


class InsufficientInliers(RuntimeError):
    pass


class NonConvergenceWarning(RuntimeWarning):
    pass


class Correspondence(NamedTuple):
    pixel: np.ndarray
    world: np.ndarray
    confidence: float


@dataclass
class Correspondences:
    """A batch of 2D-3D pairs stored column-wise."""

    pixels: np.ndarray
    world: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.world = np.asarray(self.world, dtype=np.float64).reshape(-1, 3)
        if self.confidence is None:
            self.confidence = np.ones(len(self.pixels))
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not (len(self.pixels) == len(self.world) == len(self.confidence)):
            raise ValueError("pixels, world and confidence must have equal length")

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, idx) -> "Correspondences | Correspondence":
        if isinstance(idx, (int, np.integer)):
            return Correspondence(self.pixels[idx], self.world[idx], float(self.confidence[idx]))
        return Correspondences(self.pixels[idx], self.world[idx], self.confidence[idx])

    def __iter__(self) -> Iterator[Correspondence]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_list(cls, items: Sequence[Correspondence]) -> "Correspondences":
        if not items:
            return cls(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0))
        return cls(np.array([c.pixel for c in items]), np.array([c.world for c in items]),
                   np.array([c.confidence for c in items]))


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold_px: float = 10.0
    max_iterations: int = 1000
    confidence: float = 0.999
    min_inliers: int = 10
    rng_seed: int = 0
    # rounds of refit-and-rescore on the winning hypothesis
    local_rounds: int = 4

    def __post_init__(self):
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier_threshold_px must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")


@dataclass
class PoseEstimate:
    pose: Pose
    inlier_mask: np.ndarray
    mean_inlier_residual_px: float
    iterations: int = 0

    @property
    def num_inliers(self) -> int:
        return int(self.inlier_mask.sum())


def _as_corrs(corrs) -> Correspondences:
    if isinstance(corrs, Correspondences):
        return corrs
    return Correspondences.from_list(list(corrs))


def _residuals(pose: Pose, pixels: np.ndarray, world: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Per-point reprojection distance; inf for points at or behind the camera."""
    cam = world @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    du = k.fx * cam[:, 0] / zs + k.cx - pixels[:, 0]
    dv = k.fy * cam[:, 1] / zs + k.cy - pixels[:, 1]
    return np.where(ok, np.hypot(du, dv), np.inf)


def _dlt(pixels: np.ndarray, world: np.ndarray, k: Intrinsics) -> Pose:
    n = len(pixels)
    if n < MIN_DLT_POINTS:
        raise DegenerateConfiguration(f"DLT needs >= {MIN_DLT_POINTS} points, got {n}")
    xn = (pixels[:, 0] - k.cx) / k.fx
    yn = (pixels[:, 1] - k.cy) / k.fy

    centroid = world.mean(axis=0)
    centred = world - centroid
    spread = np.sqrt((centred**2).sum(axis=1)).mean()
    if not spread > 1e-12 * max(1.0, np.abs(centroid).max()):
        raise DegenerateConfiguration("world points coincide")
    scale = math.sqrt(3.0) / spread
    T = np.diag([scale, scale, scale, 1.0])
    T[:3, 3] = -scale * centroid
    Xh = np.hstack([centred * scale, np.ones((n, 1))])

    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, None] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -yn[:, None] * Xh
    _, s, vt = np.linalg.svd(A)
    if s[10] < 1e-9 * s[0]:
        raise DegenerateConfiguration("DLT design matrix is rank deficient")
    P = vt[-1].reshape(3, 4) @ T

    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    u, sv, vt = np.linalg.svd(M)
    R = u @ vt
    lam = sv.mean()
    t = P[:, 3] / lam
    return Pose(R, t)


def solve_pnp_direct(corrs, k: Intrinsics) -> Pose:
    """Pose from >= 6 correspondences by DLT in normalised image coordinates.

    The 3x3 block of the recovered projection matrix is projected onto SO(3).
    Raises DegenerateConfiguration for rank-deficient point sets (coincident,
    collinear or coplanar points).
    """
    c = _as_corrs(corrs)
    return _dlt(c.pixels, c.world, k)


def _gn_normal_equations(pose: Pose, pixels, world, k: Intrinsics):
    ry = world @ pose.rotation.T
    cam = ry + pose.translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    r = np.stack([k.fx * x / z + k.cx - pixels[:, 0],
                  k.fy * y / z + k.cy - pixels[:, 1]], axis=1)
    n = len(pixels)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = k.fx / z
    dpi[:, 0, 2] = -k.fx * x / z**2
    dpi[:, 1, 1] = k.fy / z
    dpi[:, 1, 2] = -k.fy * y / z**2
    # left perturbation R <- exp(w) R, t <- t + dt
    dX = np.zeros((n, 3, 6))
    dX[:, :, :3] = -np.stack([skew(v) for v in ry])
    dX[:, :, 3:] = np.eye(3)
    J = np.einsum("nij,njk->nik", dpi, dX).reshape(2 * n, 6)
    return J, r.reshape(-1)


def _sq_cost(pose: Pose, pixels, world, k: Intrinsics) -> float:
    res = _residuals(pose, pixels, world, k)
    return float(np.sum(res**2))


def refine_pose(initial: Pose, inliers, k: Intrinsics, max_iterations: int = 50) -> Pose:
    """Gauss-Newton on the summed squared reprojection error.

    Each step is backtracked until the cost does not increase, so the result
    is never worse than ``initial``. A NonConvergenceWarning is emitted when
    the iteration cap is hit while the cost is still dropping; the best
    iterate is returned either way.
    """
    c = _as_corrs(inliers)
    pixels, world = c.pixels, c.world
    if np.any(initial.transform(world)[:, 2] <= MIN_DEPTH):
        raise PointBehindCamera("initial pose places an inlier behind the camera")
    pose = initial
    cost = _sq_cost(pose, pixels, world, k)
    if len(c) < 3:
        return pose
    for _ in range(max_iterations):
        if cost <= 1e-24:
            return pose
        J, r = _gn_normal_equations(pose, pixels, world, k)
        H = J.T @ J
        g = J.T @ r
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(H, g, rcond=None)[0]
        step = 1.0
        improved = False
        while step > 1e-6:
            d = step * delta
            cand = Pose(rotation_from_rotvec(d[:3]) @ pose.rotation, pose.translation + d[3:])
            new_cost = _sq_cost(cand, pixels, world, k)
            if new_cost <= cost:
                improved = True
                break
            step *= 0.5
        if not improved:
            return pose
        converged = cost - new_cost <= 1e-12 * cost or np.linalg.norm(d) < 1e-14
        pose, cost = cand, new_cost
        if converged:
            return pose
    warnings.warn("pose refinement hit the iteration cap", NonConvergenceWarning, stacklevel=2)
    return pose


def _required_iterations(inlier_ratio: float, confidence: float, sample_size: int) -> float:
    p_good = inlier_ratio**sample_size
    if p_good <= 0.0:
        return math.inf
    if p_good >= 1.0:
        return 1.0
    denom = math.log1p(-p_good)
    if denom == 0.0:
        return math.inf
    return math.log1p(-confidence) / denom


def ransac_pnp(corrs, k: Intrinsics, cfg: RansacConfig = RansacConfig()) -> PoseEstimate:
    """Hypothesize-and-verify pose estimation.

    Minimal samples of six points are solved with the DLT, polished with a
    few Gauss-Newton steps on the sample itself, and scored by the
    number of points within ``cfg.inlier_threshold_px`` (ties: lower mean
    inlier residual, then earlier hypothesis). The winner is refit on its
    inliers and refined with Gauss-Newton. Fully determined by
    ``cfg.rng_seed``.
    """
    c = _as_corrs(corrs)
    n = len(c)
    if n < max(cfg.min_inliers, MIN_DLT_POINTS):
        raise InsufficientInliers(f"{n} correspondences, need >= {max(cfg.min_inliers, MIN_DLT_POINTS)}")
    pixels, world = c.pixels, c.world
    rng = np.random.default_rng(cfg.rng_seed)
    thr = cfg.inlier_threshold_px

    best = None  # (count, mean residual, pose, mask)
    needed = float(cfg.max_iterations)
    it = 0
    while it < min(cfg.max_iterations, needed):
        it += 1
        sample = rng.choice(n, MIN_DLT_POINTS, replace=False)
        try:
            pose = _dlt(pixels[sample], world[sample], k)
        except DegenerateConfiguration:
            continue
        # the 11-dof DLT absorbs pixel noise badly; a few 6-dof steps fix most of it
        pose = _refine_quiet(pose, pixels[sample], world[sample], k, SAMPLE_REFINE_ITERATIONS)
        res = _residuals(pose, pixels, world, k)
        mask = res < thr
        count = int(mask.sum())
        if count == 0:
            continue
        mean_res = float(res[mask].mean())
        if best is None or count > best[0] or (count == best[0] and mean_res < best[1]):
            best = (count, mean_res, pose, mask)
            needed = _required_iterations(count / n, cfg.confidence, MIN_DLT_POINTS)

    if best is None or best[0] < cfg.min_inliers:
        got = 0 if best is None else best[0]
        raise InsufficientInliers(f"best hypothesis has {got} inliers, need {cfg.min_inliers}")

    _, _, pose, mask = best
    for _ in range(cfg.local_rounds):
        try:
            cand = _dlt(pixels[mask], world[mask], k)
            if _sq_cost(cand, pixels[mask], world[mask], k) < _sq_cost(pose, pixels[mask], world[mask], k):
                pose = cand
        except DegenerateConfiguration:
            pass
        pose = _refine_quiet(pose, pixels[mask], world[mask], k)
        new_mask = _residuals(pose, pixels, world, k) < thr
        if new_mask.sum() < cfg.min_inliers:
            break
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask

    res = _residuals(pose, pixels, world, k)
    mask = res < thr
    if mask.sum() < cfg.min_inliers:
        raise InsufficientInliers(f"refined pose keeps {int(mask.sum())} inliers, need {cfg.min_inliers}")
    pose = _refine_quiet(pose, pixels[mask], world[mask], k)
    res = _residuals(pose, pixels, world, k)
    return PoseEstimate(pose, mask, float(res[mask].mean()), it)


def _refine_quiet(pose: Pose, pixels, world, k: Intrinsics, max_iterations: int = 50) -> Pose:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        try:
            return refine_pose(pose, Correspondences(pixels, world), k, max_iterations)
        except PointBehindCamera:
            return pose
