"""Shared builders for the test suite."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bevinst.geometry import (
    CameraIntrinsics,
    CameraModel,
    EgoPose,
    SE3Transform,
    rotation_z,
    se3_inverse,
)

# ego x (forward) -> camera z, ego y (left) -> camera -x, ego z (up) -> camera -y
EGO_TO_CAM_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def random_se3(rng, scale=10.0) -> SE3Transform:
    rot = Rotation.random(random_state=rng).as_matrix()
    return SE3Transform(rot, rng.uniform(-scale, scale, 3))


def forward_camera(yaw=0.0, fx=100.0, fy=100.0, width=160, height=90, view_id=0, height_m=1.5) -> CameraModel:
    """Camera mounted on the ego, looking along ego heading ``yaw``."""
    intr = CameraIntrinsics(fx, fy, width / 2.0, height / 2.0, width, height)
    mount = SE3Transform(rotation_z(yaw), np.array([0.0, 0.0, height_m]))  # camera pose in ego
    cam_in_ego = SE3Transform(mount.rotation @ EGO_TO_CAM_AXES.T, mount.translation)
    return CameraModel(intr, se3_inverse(cam_in_ego), view_id)


def identity_camera(f=1.0, c=0.0, size=64) -> CameraModel:
    return CameraModel(CameraIntrinsics(f, f, c, c, size, size), SE3Transform.identity(), 0)


def planar_pose(x, y, yaw, timestamp) -> EgoPose:
    return EgoPose(SE3Transform(rotation_z(yaw), np.array([x, y, 0.0])), timestamp)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
