"""Rigid transforms, pinhole projection and temporal warping.

Conventions
-----------
``SE3Transform(R, t)`` maps a point ``p`` to ``R @ p + t``. ``compose(a, b)``
applies ``b`` first, then ``a``. Camera extrinsics map ego coordinates into
the camera frame (x right, y down, z forward). An ``EgoPose`` maps ego
coordinates of its frame into world coordinates.

Frame index ``t`` counts backwards in time: frame ``t`` was captured
``t * tau`` seconds before the current frame ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

DEPTH_EPSILON = 1e-6
_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SE3Transform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise ValueError("SE3Transform entries must be finite")
        if np.abs(rot @ rot.T - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal with det +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> SE3Transform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat) -> SE3Transform:
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(..., 3)``."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def allclose(self, other: SE3Transform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __matmul__(self, other: SE3Transform) -> SE3Transform:
        return se3_compose(self, other)


def se3_compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    return SE3Transform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(a: SE3Transform) -> SE3Transform:
    rt = a.rotation.T
    return SE3Transform(rt, -rt @ a.translation)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; ``axis`` need not be normalized."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0 or angle == 0.0:
        return np.eye(3)
    k = axis / norm
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (SVD projection)."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: CameraIntrinsics
    extrinsics: SE3Transform  # ego -> camera
    view_id: int = 0


@dataclass(frozen=True, eq=False)
class EgoPose:
    ego_to_world: SE3Transform
    timestamp: float


def project_points(cam: CameraModel, points_ego, depth_epsilon: float = DEPTH_EPSILON):
    """Vectorized projection.

    Returns ``(uv, depth, valid)`` with ``uv`` shaped ``(..., 2)``. Entries with
    ``depth <= depth_epsilon`` are marked invalid and their ``uv`` is NaN.
    """
    pc = cam.extrinsics.apply(points_ego)
    z = pc[..., 2]
    valid = z > depth_epsilon
    safe_z = np.where(valid, z, 1.0)
    k = cam.intrinsics
    u = k.fx * pc[..., 0] / safe_z + k.cx
    v = k.fy * pc[..., 1] / safe_z + k.cy
    uv = np.stack([u, v], axis=-1)
    uv[~valid] = np.nan
    return uv, z, valid


def project_point(cam: CameraModel, point_ego, depth_epsilon: float = DEPTH_EPSILON):
    """Project a single ego-frame point to ``(u, v, z_c)``.

    Raises:
        BehindCamera: if the camera-frame depth is ``<= depth_epsilon``.
    """
    uv, z, valid = project_points(cam, np.asarray(point_ego, dtype=np.float64).reshape(3), depth_epsilon)
    if not valid:
        raise BehindCamera(f"camera depth {float(z):.3g} m <= {depth_epsilon}")
    return float(uv[0]), float(uv[1]), float(z)


def unproject_pixels(cam: CameraModel, u, v, depth) -> np.ndarray:
    """Vectorized inverse projection to ego coordinates; no depth check."""
    k = cam.intrinsics
    u, v, depth = np.broadcast_arrays(
        np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64), np.asarray(depth, dtype=np.float64)
    )
    pc = np.stack([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], axis=-1)
    inv = se3_inverse(cam.extrinsics)
    return inv.apply(pc)


def unproject_pixel(cam: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    return unproject_pixels(cam, u, v, depth)


def temporal_transform(pose_current: EgoPose, pose_target: EgoPose) -> SE3Transform:
    """Transform mapping current-ego coordinates into the target frame's ego coordinates."""
    return se3_compose(se3_inverse(pose_target.ego_to_world), pose_current.ego_to_world)


def compensate_and_warp(p_pos, p_vel, t: int, tau: float, m_t: SE3Transform) -> np.ndarray:
    """Rewind positions by constant velocity and move them into frame ``t``.

    ``p_pos`` is ``(3,)`` or ``(N, 3)`` in current ego coordinates, ``p_vel`` is
    the matching ``(2,)``/``(N, 2)`` planar velocity in the same frame.
    """
    if t < 0:
        raise ValueError("frame index must be non-negative")
    if not tau > 0:
        raise ValueError("tau must be positive")
    pos = np.asarray(p_pos, dtype=np.float64)
    vel = np.asarray(p_vel, dtype=np.float64)
    shift = np.zeros(pos.shape)
    shift[..., :2] = tau * t * vel
    return m_t.apply(pos - shift)
