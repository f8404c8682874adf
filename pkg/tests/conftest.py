"""Shared fixtures: a small desk-scale camera and random pose sampling."""

from __future__ import annotations

import numpy as np
import pytest

from deskpose import CameraIntrinsics, Pose, rotation_zyx


@pytest.fixture
def desk_camera() -> CameraIntrinsics:
    """Low-resolution camera used by the scene-level tests; small enough to
    keep rendering and voting fast while leaving every object tens of pixels
    wide at the default placement depths."""
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0,
                            width=64, height=48)


def random_pose(rng: np.random.Generator,
                z_range: tuple = (0.4, 1.0),
                xy_half: float = 0.05) -> Pose:
    """Uniformly sampled pose with the object in front of the camera."""
    angles = rng.uniform(-np.pi, np.pi, 3)
    t = np.array([
        rng.uniform(-xy_half, xy_half),
        rng.uniform(-xy_half, xy_half),
        rng.uniform(*z_range),
    ])
    return Pose(rotation_zyx(angles), t)
