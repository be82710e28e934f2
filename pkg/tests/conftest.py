import numpy as np
import pytest
import torch

from sceneloc.geometry import Intrinsics, Pose, look_at, random_rotation

torch.set_num_threads(1)


@pytest.fixture
def k100():
    return Intrinsics(100.0, 100.0, 64.0, 64.0)


@pytest.fixture
def k_synth():
    return Intrinsics(200.0, 200.0, 128.0, 128.0)


def random_pose(rng, distance=4.5) -> Pose:
    """Camera on a sphere around the origin, looking near it."""
    eye = rng.normal(size=3)
    eye *= distance / np.linalg.norm(eye)
    return look_at(eye, rng.uniform(-0.3, 0.3, 3))


def random_rigid(rng) -> Pose:
    return Pose(random_rotation(rng), rng.normal(size=3))


def homogeneous_project(K, pose: Pose, y):
    """Independent oracle: P = K [R | t] applied to homogeneous points."""
    P = np.asarray(K) @ np.hstack([pose.rotation, pose.translation[:, None]])
    Y = np.hstack([np.atleast_2d(y), np.ones((np.atleast_2d(y).shape[0], 1))])
    x = (P @ Y.T).T
    return x[:, :2] / x[:, 2:3]
