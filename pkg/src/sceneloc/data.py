"""On-disk dataset layout (7-Scenes style).

    scene/intrinsics.txt                  fx fy cx cy
    scene/{train,test}/frame-XXXXXX.color.png
    scene/{train,test}/frame-XXXXXX.pose.txt   4x4 camera-to-world, whitespace separated
    scene/{train,test}/frame-XXXXXX.coords.npy (optional) 3 x H/8 x W/8 scene coordinates, NaN = invalid
    scene/landmarks.npz                   (synthetic scenes only) landmark table

Poses are converted to world-to-camera on load.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import InvalidRotation, Intrinsics, Pose, check_rotation, invert_pose

SPLITS = ("train", "test")
ROTATION_LOAD_TOL = 1e-5


class LayoutError(FileNotFoundError):
    pass


class PoseParseError(ValueError):
    pass


@dataclass
class Frame:
    name: str
    image_path: Path
    pose: Pose  # world-to-camera
    intrinsics: Intrinsics
    coords_path: Path | None = None
    _image: np.ndarray | None = field(default=None, repr=False, compare=False)
    _coords: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = np.asarray(Image.open(self.image_path).convert("RGB"))
        return self._image

    @property
    def coords(self) -> np.ndarray | None:
        if self._coords is None and self.coords_path is not None:
            self._coords = np.load(self.coords_path)
        return self._coords

    @classmethod
    def in_memory(cls, name, image, pose, intrinsics, coords=None) -> "Frame":
        return cls(name, Path(name), pose, intrinsics, None, np.asarray(image), coords)


@dataclass
class DatasetIndex:
    frames: list[Frame]
    split: str
    scene_name: str
    root: Path | None = None

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


def read_intrinsics(path) -> Intrinsics:
    path = Path(path)
    if not path.is_file():
        raise LayoutError(f"missing intrinsics file: {path}")
    vals = path.read_text().split()
    if len(vals) != 4:
        raise LayoutError(f"{path}: expected 'fx fy cx cy'")
    return Intrinsics(*map(float, vals))


def write_intrinsics(path, k: Intrinsics):
    Path(path).write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n")


def read_pose_file(path) -> np.ndarray:
    """Raw 4x4 matrix as stored (camera-to-world)."""
    try:
        rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
        T = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise PoseParseError(f"{path}: {exc}") from None
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        raise PoseParseError(f"{path}: expected 4 rows of 4 finite numbers")
    if not np.allclose(T[3], [0, 0, 0, 1]):
        raise PoseParseError(f"{path}: last row must be 0 0 0 1")
    try:
        check_rotation(T[:3, :3], tol=ROTATION_LOAD_TOL)
    except InvalidRotation as exc:
        raise PoseParseError(f"{path}: {exc}") from None
    return T


def write_pose_file(path, pose: Pose):
    """Store the world-to-camera ``pose`` as a camera-to-world matrix."""
    T = invert_pose(pose).matrix()
    Path(path).write_text("\n".join(" ".join(repr(float(x)) for x in row) for row in T) + "\n")


def frame_name(i: int) -> str:
    return f"frame-{i:06d}"


def load_dataset(root, split: str) -> DatasetIndex:
    root = Path(root)
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    k = read_intrinsics(root / "intrinsics.txt")
    split_dir = root / split
    if not split_dir.is_dir():
        raise LayoutError(f"missing split directory: {split_dir}")
    frames = []
    for img in sorted(split_dir.glob("frame-*.color.png")):
        stem = img.name[: -len(".color.png")]
        pose_path = split_dir / f"{stem}.pose.txt"
        if not pose_path.is_file():
            raise LayoutError(f"missing pose file: {pose_path}")
        pose = invert_pose(Pose.from_matrix(read_pose_file(pose_path)))
        coords = split_dir / f"{stem}.coords.npy"
        frames.append(Frame(stem, img, pose, k, coords if coords.is_file() else None))
    if not frames:
        raise LayoutError(f"no frame-*.color.png files in {split_dir}")
    return DatasetIndex(frames, split, root.name, root)


def write_split(root, split: str, images, poses, coords=None, intrinsics: Intrinsics | None = None):
    """Write frames in the documented layout; returns the split directory."""
    root = Path(root)
    split_dir = root / split
    split_dir.mkdir(parents=True, exist_ok=True)
    if intrinsics is not None:
        write_intrinsics(root / "intrinsics.txt", intrinsics)
    for i, (img, pose) in enumerate(zip(images, poses)):
        stem = frame_name(i)
        Image.fromarray(np.asarray(img, dtype=np.uint8)).save(split_dir / f"{stem}.color.png")
        write_pose_file(split_dir / f"{stem}.pose.txt", pose)
        if coords is not None:
            np.save(split_dir / f"{stem}.coords.npy", np.asarray(coords[i], dtype=np.float64))
    return split_dir


def image_statistics(frames) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of images scaled to [0, 1]."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for f in frames:
        a = f.image.reshape(-1, 3).astype(np.float64) / 255.0
        total += a.sum(axis=0)
        total_sq += (a * a).sum(axis=0)
        count += len(a)
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 1e-12))
    return mean, std


def coordinate_centroid(frames) -> np.ndarray:
    """Mean of valid ground-truth coordinates, else mean camera centre."""
    pts = [f.coords.reshape(3, -1).T for f in frames if f.coords is not None]
    if pts:
        allp = np.concatenate(pts)
        allp = allp[np.isfinite(allp).all(axis=1)]
        if len(allp):
            return allp.mean(axis=0)
    return np.mean([f.pose.camera_center() for f in frames], axis=0)
