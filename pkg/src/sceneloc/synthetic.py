"""Procedural landmark scenes with exact ground truth.

Scenes are clouds of coloured discs. Rendering splats every disc with a
painter's z-buffer, so the landmark behind any pixel (and thus its scene
coordinate and depth) is known exactly. The same ground truth drives the
oracle retrieval and matching providers that stand in for learned models.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Intrinsics, Pose, look_at, rotation_from_rotvec
from .keypoints import PATCH

NEAR = 0.1
MIN_VISIBLE = 20


class EmptyView(RuntimeError):
    """Fewer than MIN_VISIBLE landmarks are visible from the pose."""


@dataclass
class SyntheticScene:
    points: np.ndarray  # (N, 3) metres
    colors: np.ndarray  # (N, 3) uint8, unique per landmark
    radii: np.ndarray  # (N,) metres
    extent: np.ndarray  # (2, 3) lower / upper corner
    seed: int

    def __len__(self):
        return len(self.points)

    @property
    def center(self) -> np.ndarray:
        return self.extent.mean(axis=0)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.extent[1] - self.extent[0]))


@dataclass
class ViewSample:
    pose_gt: Pose
    image: np.ndarray  # (H, W, 3) uint8
    coord_gt: np.ndarray  # (3, H/8, W/8) metres, NaN where invalid
    depth: np.ndarray  # (H, W) metres, NaN on background
    patch_landmark: np.ndarray  # (H/8, W/8) landmark id, -1 where invalid
    visible: np.ndarray  # sorted ids of landmarks whose centre pixel is visible
    keypoints: np.ndarray = field(repr=False)  # (N, 2) projected centre of every landmark (NaN if not in front)

    @property
    def coord_valid(self) -> np.ndarray:
        return self.patch_landmark >= 0


def _extent_array(extent) -> np.ndarray:
    if np.isscalar(extent):
        half = float(extent) / 2.0
        return np.array([[-half] * 3, [half] * 3])
    e = np.asarray(extent, dtype=np.float64)
    if e.shape != (2, 3) or np.any(e[1] <= e[0]):
        raise ValueError("extent must be a cube side or a (lower, upper) pair of 3-vectors")
    return e


PALETTES = ("random", "spatial")


def _color_grid(n: int) -> np.ndarray:
    levels = 2
    while levels**3 - 1 < n:
        levels += 1
    vals = np.round(np.linspace(0, 255, levels)).astype(np.uint8)
    grid = np.stack(np.meshgrid(vals, vals, vals, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[1:]  # drop black, the background


def _palette(n: int, rng: np.random.Generator) -> np.ndarray:
    grid = _color_grid(n)
    return grid[rng.permutation(len(grid))[:n]]


def _spatial_palette(points: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Unique grid colours assigned so that colour tracks position.

    Each landmark gets the colour nearest its normalised position, resolved
    as a min-cost assignment so no colour repeats.
    """
    grid = _color_grid(len(points))
    unit = (points - e[0]) / (e[1] - e[0])
    cost = ((unit[:, None, :] - grid[None, :, :] / 255.0) ** 2).sum(axis=-1)
    _, cols = linear_sum_assignment(cost)
    return grid[cols]


def generate_scene(seed: int, extent=3.0, n_landmarks: int = 500,
                   radius_range=(0.04, 0.06), palette: str = "random") -> SyntheticScene:
    """``palette="spatial"`` ties colour to position, which makes the scene far
    quicker to learn than the default random assignment."""
    if n_landmarks < 100:
        raise ValueError("n_landmarks must be >= 100")
    if palette not in PALETTES:
        raise ValueError(f"palette must be one of {PALETTES}")
    e = _extent_array(extent)
    rng = np.random.default_rng(seed)
    points = rng.uniform(e[0], e[1], size=(n_landmarks, 3))
    colors = _palette(n_landmarks, rng) if palette == "random" else _spatial_palette(points, e)
    radii = rng.uniform(*radius_range, size=n_landmarks)
    return SyntheticScene(points, colors, radii, e, seed)


def _rasterize(scene: SyntheticScene, pose: Pose, k: Intrinsics, size):
    """Painter's-algorithm splatting. Returns (id buffer, depth buffer, centres, depths)."""
    h, w = size
    cam = pose.transform(scene.points)
    z = cam[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    uv = np.stack([k.fx * cam[:, 0] / zs + k.cx, k.fy * cam[:, 1] / zs + k.cy], axis=1)
    uv[~front] = np.nan
    r_px = np.where(front, np.sqrt(k.fx * k.fy) * scene.radii / zs, 0.0)

    ids = np.full((h, w), -1, dtype=np.int64)
    depth = np.full((h, w), np.nan)
    on_screen = front & (uv[:, 0] + r_px >= 0) & (uv[:, 0] - r_px < w) & \
        (uv[:, 1] + r_px >= 0) & (uv[:, 1] - r_px < h)
    order = np.flatnonzero(on_screen)
    # far to near; index breaks depth ties deterministically
    order = order[np.lexsort((-order, -z[order]))]
    for n in order:
        (u, v), r = uv[n], max(r_px[n], 0.5)
        x0, x1 = max(int(np.floor(u - r)), 0), min(int(np.ceil(u + r)), w)
        y0, y1 = max(int(np.floor(v - r)), 0), min(int(np.ceil(v + r)), h)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        disc = (xs + 0.5 - u) ** 2 + (ys + 0.5 - v) ** 2 <= r * r
        # the pixel holding the centre always belongs to the disc
        cx, cy = int(np.floor(u)), int(np.floor(v))
        if x0 <= cx < x1 and y0 <= cy < y1:
            disc[cy - y0, cx - x0] = True
        ids[y0:y1, x0:x1][disc] = n
        depth[y0:y1, x0:x1][disc] = z[n]
    return ids, depth, uv, z


def visible_landmarks(scene: SyntheticScene, pose: Pose, k: Intrinsics, size) -> np.ndarray:
    ids, _, uv, _ = _rasterize(scene, pose, k, size)
    return _visible_from_buffer(ids, uv, size)


def _visible_from_buffer(ids, uv, size) -> np.ndarray:
    h, w = size
    ok = np.isfinite(uv).all(axis=1) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    cand = np.flatnonzero(ok)
    px = np.floor(uv[cand]).astype(np.int64)
    seen = ids[px[:, 1], px[:, 0]] == cand
    return cand[seen]


def render_view(scene: SyntheticScene, pose: Pose, k: Intrinsics, size=(256, 256)) -> ViewSample:
    """Render ``scene`` from ``pose`` at ``size = (height, width)``.

    A patch gets a ground-truth coordinate when the centre of a visible
    landmark falls inside it; the nearest such landmark wins.
    """
    h, w = size
    if h % PATCH or w % PATCH:
        raise ValueError("image size must be divisible by 8")
    ids, depth, uv, z = _rasterize(scene, pose, k, size)
    visible = _visible_from_buffer(ids, uv, size)
    if len(visible) < MIN_VISIBLE:
        raise EmptyView(f"only {len(visible)} landmarks visible")

    image = np.zeros((h, w, 3), dtype=np.uint8)
    hit = ids >= 0
    image[hit] = scene.colors[ids[hit]]

    hp, wp = h // PATCH, w // PATCH
    patch_landmark = np.full((hp, wp), -1, dtype=np.int64)
    best_z = np.full((hp, wp), np.inf)
    for n in visible:
        pu, pv = int(uv[n, 0] // PATCH), int(uv[n, 1] // PATCH)
        if z[n] < best_z[pv, pu]:
            best_z[pv, pu] = z[n]
            patch_landmark[pv, pu] = n
    coord = np.full((3, hp, wp), np.nan)
    valid = patch_landmark >= 0
    coord[:, valid] = scene.points[patch_landmark[valid]].T
    return ViewSample(pose, image, coord, depth, patch_landmark, visible, uv)


def default_intrinsics(size=(256, 256), focal: float = 220.0) -> Intrinsics:
    h, w = size
    return Intrinsics(focal, focal, w / 2.0, h / 2.0)


def sample_poses(scene: SyntheticScene, n: int, seed: int, distance=(4.0, 5.0),
                 elevation_deg=(-15.0, 45.0), target_jitter: float = 0.3,
                 roll_deg: float = 10.0) -> list[Pose]:
    """Cameras on a shell around the scene centre, looking roughly inward."""
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n):
        az = rng.uniform(0.0, 2.0 * np.pi)
        el = np.deg2rad(rng.uniform(*elevation_deg))
        d = rng.uniform(*distance)
        direction = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        eye = scene.center + d * direction
        target = scene.center + rng.uniform(-target_jitter, target_jitter, 3)
        p = look_at(eye, target)
        roll = rotation_from_rotvec([0.0, 0.0, np.deg2rad(rng.uniform(-roll_deg, roll_deg))])
        poses.append(Pose(roll @ p.rotation, roll @ p.translation))
    return poses


def oracle_retrieval(scene: SyntheticScene, poses, query_idx: int, k: int,
                     intrinsics: Intrinsics | None = None, size=(256, 256),
                     visible_sets=None) -> list[int]:
    """The ``k`` views sharing most visible landmarks with the query.

    Sorted by co-visibility (descending), ties by index; the query itself is
    excluded. ``visible_sets`` may carry precomputed visibility per pose.
    """
    if not 0 < k < len(poses):
        raise ValueError("k must lie in [1, number of views)")
    if visible_sets is None:
        intrinsics = intrinsics or default_intrinsics(size)
        visible_sets = [visible_landmarks(scene, p, intrinsics, size) for p in poses]
    q = visible_sets[query_idx]
    counts = [(-len(np.intersect1d(q, s)), i) for i, s in enumerate(visible_sets) if i != query_idx]
    counts.sort()
    return [i for _, i in counts[:k]]


@dataclass
class Matches:
    """Pixel matches between two images."""

    pixels_a: np.ndarray  # (N, 2)
    pixels_b: np.ndarray  # (N, 2)
    scores: np.ndarray  # (N,)
    landmarks: np.ndarray | None = None  # (N,) ground-truth id, -1 for planted outliers

    def __len__(self):
        return len(self.scores)

    def swapped(self) -> "Matches":
        return Matches(self.pixels_b, self.pixels_a, self.scores, self.landmarks)


def oracle_matches(view_a: ViewSample, view_b: ViewSample, noise_px: float = 0.0,
                   outlier_rate: float = 0.0, seed: int = 0) -> Matches:
    """One match per co-visible landmark, plus planted outliers.

    Inliers are the true projections with Gaussian noise (score 1.0). The
    outlier count is round(n_in * rate / (1 - rate)), with uniform random
    pixels in both images and scores in [0, 0.5).
    """
    if noise_px < 0 or not 0.0 <= outlier_rate < 1.0:
        raise ValueError("noise_px must be >= 0 and outlier_rate in [0, 1)")
    rng = np.random.default_rng(seed)
    h_a, w_a = view_a.image.shape[:2]
    h_b, w_b = view_b.image.shape[:2]
    common = np.intersect1d(view_a.visible, view_b.visible)
    pa = view_a.keypoints[common] + rng.normal(0.0, noise_px, (len(common), 2)) if noise_px else view_a.keypoints[common].copy()
    pb = view_b.keypoints[common] + rng.normal(0.0, noise_px, (len(common), 2)) if noise_px else view_b.keypoints[common].copy()
    hi_a = np.nextafter(np.array([w_a, h_a], dtype=np.float64), 0)
    hi_b = np.nextafter(np.array([w_b, h_b], dtype=np.float64), 0)
    pa = np.clip(pa, 0.0, hi_a)
    pb = np.clip(pb, 0.0, hi_b)
    n_out = int(round(len(common) * outlier_rate / (1.0 - outlier_rate)))
    oa = rng.uniform(0.0, 1.0, (n_out, 2)) * [w_a, h_a]
    ob = rng.uniform(0.0, 1.0, (n_out, 2)) * [w_b, h_b]
    return Matches(
        np.vstack([pa, oa]).reshape(-1, 2),
        np.vstack([pb, ob]).reshape(-1, 2),
        np.concatenate([np.ones(len(common)), rng.uniform(0.0, 0.5, n_out)]),
        np.concatenate([common, np.full(n_out, -1)]).astype(np.int64),
    )


def pair_seed(seed: int, a: int, b: int) -> int:
    lo, hi = min(a, b), max(a, b)
    return zlib.crc32(f"{seed}:{lo}:{hi}".encode())


class OracleProviders:
    """Ground-truth retrieval and matching over a list of rendered views."""

    def __init__(self, views: list[ViewSample], noise_px: float = 0.0,
                 outlier_rate: float = 0.0, seed: int = 0):
        self.views = views
        self.noise_px = noise_px
        self.outlier_rate = outlier_rate
        self.seed = seed
        self._cache: dict[tuple[int, int], Matches] = {}

    def retrieve(self, query_id: int, k: int) -> list[int]:
        return oracle_retrieval(None, self.views, query_id, k,
                                visible_sets=[v.visible for v in self.views])

    def match(self, id_a: int, id_b: int) -> Matches:
        lo, hi = min(id_a, id_b), max(id_a, id_b)
        if (lo, hi) not in self._cache:
            self._cache[lo, hi] = oracle_matches(self.views[lo], self.views[hi], self.noise_px,
                                                 self.outlier_rate, pair_seed(self.seed, lo, hi))
        m = self._cache[lo, hi]
        return m if id_a == lo else m.swapped()


def save_scene(scene: SyntheticScene, path):
    np.savez(path, points=scene.points, colors=scene.colors, radii=scene.radii,
             extent=scene.extent, seed=scene.seed)


def load_scene(path) -> SyntheticScene:
    with np.load(path) as d:
        return SyntheticScene(d["points"], d["colors"], d["radii"], d["extent"], int(d["seed"]))


@dataclass
class SyntheticDataset:
    scene: SyntheticScene
    intrinsics: Intrinsics
    train: list[ViewSample]
    test: list[ViewSample]


def make_dataset(seed: int, n_train: int = 80, n_test: int = 20, n_landmarks: int = 500,
                 extent=3.0, size=(256, 256), focal: float = 220.0,
                 palette: str = "random") -> SyntheticDataset:
    """Scene from ``seed``, views from ``seed + 1``; empty views are skipped."""
    scene = generate_scene(seed, extent, n_landmarks, palette=palette)
    k = default_intrinsics(size, focal)
    need = n_train + n_test
    views: list[ViewSample] = []
    for pose in sample_poses(scene, 4 * need, seed + 1):
        try:
            views.append(render_view(scene, pose, k, size))
        except EmptyView:
            continue
        if len(views) == need:
            break
    if len(views) < need:
        raise EmptyView(f"only {len(views)} of {need} views see enough landmarks")
    return SyntheticDataset(scene, k, views[:n_train], views[n_train:])


def frames_from_views(views: list[ViewSample], k: Intrinsics):
    from .data import Frame, frame_name
    return [Frame.in_memory(frame_name(i), v.image, v.pose_gt, k, v.coord_gt) for i, v in enumerate(views)]


def write_dataset(root, ds: SyntheticDataset):
    """Write both splits in the on-disk layout plus ``landmarks.npz``."""
    from .data import write_split
    root = Path(root)
    for split, views in (("train", ds.train), ("test", ds.test)):
        write_split(root, split, [v.image for v in views], [v.pose_gt for v in views],
                    [v.coord_gt for v in views], ds.intrinsics)
    save_scene(ds.scene, root / "landmarks.npz")
    return root


def views_for_frames(scene: SyntheticScene, frames) -> list[ViewSample]:
    """Re-render the ground truth behind loaded frames (for the oracle providers)."""
    return [render_view(scene, f.pose, f.intrinsics, f.image.shape[:2]) for f in frames]
