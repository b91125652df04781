"""Synthetic multi-camera scenes with planted, constant-velocity objects.

Every object renders as an isotropic Gaussian blob (peak 1) into its
signature channel in each camera that sees its center. Further channels
stand in for what a trained image backbone would emit:

* objectness (the strongest blob) and objectness times camera depth, which
  lets a linear per-pixel head recover a depth distribution;
* inside the object's silhouette disk (radius from its frontal extent, nearest
  object wins) a mask of ones, the object's center and planar velocity in
  that frame's ego coordinates, and a 3-D appearance vector keyed to the
  object's identity. Position and velocity are stored with fixed offsets
  (``REGRESSION_OFFSETS``) so every regression channel is non-negative.

Randomness comes from ``numpy.random.default_rng(seed)`` (PCG64), drawn in a
fixed order, so a ``(config, seed)`` pair always yields the same scene.

Time convention: frame ``t`` is ``t * tau`` seconds before the current frame,
so an object's world position at frame ``t`` is
``position - t * tau * velocity``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidConfig, ParseError
from .geometry import (
    CameraIntrinsics,
    CameraModel,
    EgoPose,
    SE3Transform,
    orthonormalize,
    project_points,
    rotation_from_axis_angle,
    rotation_z,
    se3_compose,
    se3_inverse,
)
from .grid_ops import FeatureGrid, load_fgrd, save_fgrd

SCENE_FORMAT = "bevinst-scene"
SCENE_VERSION = 1

REGULAR_CHANNEL = 0
SMALL_CHANNEL = 1
DEPTH_CHANNEL = 2
OBJECTNESS_CHANNEL = 3
MASK_CHANNEL = 4
POSITION_CHANNELS = (5, 6, 7)  # x, y, z
VELOCITY_CHANNELS = (8, 9)
APPEARANCE_CHANNELS = (10, 11, 12)
RESERVED_CHANNELS = 13
REGRESSION_OFFSETS = {"position": (64.0, 64.0, 8.0), "velocity": (16.0, 16.0)}
MIN_DISK_PX = 4.0


@dataclass
class SceneConfig:
    num_views: int = 6
    image_width: int = 176
    image_height: int = 64
    channels: int = 32
    fov_deg: float = 70.0
    camera_height: float = 1.5
    camera_offset: float = 1.0
    history: int = 3  # T; the scene holds T + 1 frames
    tau: float = 0.5
    ego_speed: tuple = (4.0, 10.0)
    ego_yaw_rate: tuple = (-0.1, 0.1)
    num_regular: int = 12
    num_small: int = 8
    regular_size: tuple = (1.6, 2.6)  # width range; length = 2.2 * width
    small_size: tuple = (0.4, 0.8)
    regular_speed: tuple = (0.0, 8.0)
    small_speed: tuple = (0.0, 1.5)
    placement_radius: tuple = (6.0, 40.0)
    min_separation: float = 4.0
    blob_sigma_px: float = 3.0

    def validate(self):
        def positive(name):
            if not getattr(self, name) > 0:
                raise InvalidConfig(name, "must be positive")

        for name in ("num_views", "image_width", "image_height", "channels", "fov_deg", "tau", "blob_sigma_px"):
            positive(name)
        if self.channels < RESERVED_CHANNELS:
            raise InvalidConfig("channels", f"must be at least {RESERVED_CHANNELS}")
        if not 0 < self.fov_deg < 180:
            raise InvalidConfig("fov_deg", "must lie in (0, 180)")
        if self.history < 0:
            raise InvalidConfig("history", "must be non-negative")
        for name in ("num_regular", "num_small"):
            if getattr(self, name) < 0:
                raise InvalidConfig(name, "must be non-negative")
        for name in ("ego_speed", "ego_yaw_rate", "regular_size", "small_size", "regular_speed", "small_speed",
                     "placement_radius"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(name, "range must be (low, high) with low <= high")
        if self.placement_radius[0] <= 0:
            raise InvalidConfig("placement_radius", "must be positive")
        if self.min_separation < 0:
            raise InvalidConfig("min_separation", "must be non-negative")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> SceneConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(sorted(unknown)[0], "unknown scene config field")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs).validate()


@dataclass
class ObjectTrack:
    id: int
    class_id: int
    size: tuple  # (w, l, h) meters
    position: tuple  # world (x, y, z) at the current frame
    velocity: tuple  # world (vx, vy) m/s
    yaw: float  # world heading, radians
    signature_channel: int
    appearance: tuple = (0.0, 0.0, 1.0)  # unit 3-vector

    def position_at(self, t: int, tau: float) -> np.ndarray:
        pos = np.array(self.position, dtype=np.float64)
        pos[:2] -= t * tau * np.asarray(self.velocity, dtype=np.float64)
        return pos


@dataclass(eq=False)
class SyntheticScene:
    rig: list[CameraModel]
    poses: list[EgoPose]
    tracks: list[ObjectTrack]
    channels: int
    height: int
    width: int
    tau: float = 0.5
    seed: int = 0
    blob_sigma_px: float = 3.0

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def __eq__(self, other):
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return scene_to_dict(self) == scene_to_dict(other)


# --- generation ---------------------------------------------------------------


def make_rig(cfg: SceneConfig) -> list[CameraModel]:
    """Surround rig: view ``v`` faces yaw ``v * 360 / num_views`` degrees."""
    w, h = cfg.image_width, cfg.image_height
    f = (w / 2.0) / np.tan(np.radians(cfg.fov_deg) / 2.0)
    intr = CameraIntrinsics(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h)
    rig = []
    for v in range(cfg.num_views):
        psi = 2.0 * np.pi * v / cfg.num_views
        forward = np.array([np.cos(psi), np.sin(psi), 0.0])
        right = np.array([np.sin(psi), -np.cos(psi), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        cam_to_ego_rot = np.stack([right, down, forward], axis=1)
        center = np.array([cfg.camera_offset * forward[0], cfg.camera_offset * forward[1], cfg.camera_height])
        rot = cam_to_ego_rot.T
        rig.append(CameraModel(intr, SE3Transform(rot, -rot @ center), v))
    return rig


def _ego_poses(cfg: SceneConfig, rng: np.random.Generator) -> list[EgoPose]:
    speed = rng.uniform(*cfg.ego_speed)
    yaw_rate = rng.uniform(*cfg.ego_yaw_rate)
    heading0 = rng.uniform(-np.pi, np.pi)
    origin = rng.uniform(-100.0, 100.0, size=2)
    poses = []
    base_time = 1000.0
    for t in range(cfg.history + 1):
        dt = -t * cfg.tau
        heading = heading0 + yaw_rate * dt
        if abs(yaw_rate) < 1e-9:
            disp = speed * dt * np.array([np.cos(heading0), np.sin(heading0)])
        else:
            r = speed / yaw_rate
            disp = r * np.array([np.sin(heading) - np.sin(heading0), np.cos(heading0) - np.cos(heading)])
        trans = np.array([origin[0] + disp[0], origin[1] + disp[1], 0.0])
        poses.append(EgoPose(SE3Transform(rotation_z(heading), trans), base_time + dt))
    return poses


def appearance_codes(count: int, rng: np.random.Generator) -> np.ndarray:
    """``(count, 3)`` well-separated unit vectors: a Fibonacci sphere lattice
    under a random rotation."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / max(count, 1)
    r = np.sqrt(np.clip(1.0 - z**2, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    lattice = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return lattice @ Rotation.random(random_state=rng).as_matrix().T


def _place_objects(cfg: SceneConfig, rng: np.random.Generator, pose0: EgoPose) -> list[ObjectTrack]:
    tracks = []
    placed = []
    kinds = [("regular", REGULAR_CHANNEL)] * cfg.num_regular + [("small", SMALL_CHANNEL)] * cfg.num_small
    codes = appearance_codes(len(kinds), rng)
    rot0 = pose0.ego_to_world.rotation
    for idx, (kind, channel) in enumerate(kinds):
        for _attempt in range(1000):
            r = rng.uniform(*cfg.placement_radius)
            ang = rng.uniform(-np.pi, np.pi)
            xy = np.array([r * np.cos(ang), r * np.sin(ang)])
            if all(np.hypot(*(xy - p)) >= cfg.min_separation for p in placed):
                break
        else:
            raise InvalidConfig("min_separation", "could not place objects; lower the count or separation")
        placed.append(xy)
        if kind == "regular":
            width = rng.uniform(*cfg.regular_size)
            size = (width, 2.2 * width, rng.uniform(1.4, 2.0))
            speed = rng.uniform(*cfg.regular_speed)
        else:
            width = rng.uniform(*cfg.small_size)
            size = (width, width, rng.uniform(0.6, 1.8))
            speed = rng.uniform(*cfg.small_speed)
        heading = rng.uniform(-np.pi, np.pi)
        vel_ego = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
        pos_ego = np.array([xy[0], xy[1], size[2] / 2.0])
        pos_world = pose0.ego_to_world.apply(pos_ego)
        vel_world = rot0 @ vel_ego
        yaw_world = heading + np.arctan2(rot0[1, 0], rot0[0, 0])
        tracks.append(
            ObjectTrack(
                id=idx,
                class_id=0,
                size=tuple(float(s) for s in size),
                position=tuple(float(p) for p in pos_world),
                velocity=(float(vel_world[0]), float(vel_world[1])),
                yaw=float(np.arctan2(np.sin(yaw_world), np.cos(yaw_world))),
                signature_channel=channel,
                appearance=tuple(float(a) for a in codes[idx]),
            )
        )
    return tracks


def generate_scene(config: SceneConfig | None = None, seed: int = 0) -> SyntheticScene:
    cfg = (config or SceneConfig()).validate()
    rng = np.random.default_rng(seed)
    poses = _ego_poses(cfg, rng)
    tracks = _place_objects(cfg, rng, poses[0])
    return SyntheticScene(
        rig=make_rig(cfg),
        poses=poses,
        tracks=tracks,
        channels=cfg.channels,
        height=cfg.image_height,
        width=cfg.image_width,
        tau=cfg.tau,
        seed=seed,
        blob_sigma_px=cfg.blob_sigma_px,
    )


def jitter_rig(rig: list[CameraModel], magnitude: float, seed: int = 0) -> list[CameraModel]:
    """Perturb each extrinsic by a random rotation of angle ``magnitude`` radians."""
    if magnitude == 0:
        return list(rig)
    rng = np.random.default_rng(seed)
    out = []
    for cam in rig:
        axis = rng.normal(size=3)
        noise = SE3Transform(orthonormalize(rotation_from_axis_angle(axis, magnitude)), np.zeros(3))
        out.append(CameraModel(cam.intrinsics, se3_compose(noise, cam.extrinsics), cam.view_id))
    return out


# --- ground truth and rendering ---------------------------------------------------


def object_positions_ego(scene: SyntheticScene, t: int) -> np.ndarray:
    """``(num_tracks, 3)`` object centers in frame ``t`` ego coordinates."""
    if not scene.tracks:
        return np.zeros((0, 3))
    world = np.stack([tr.position_at(t, scene.tau) for tr in scene.tracks])
    return se3_inverse(scene.poses[t].ego_to_world).apply(world)


def ground_truth_boxes(scene: SyntheticScene) -> np.ndarray:
    """Current-frame ``(N, 10)`` boxes in ego coordinates."""
    rot0 = scene.poses[0].ego_to_world.rotation
    ego_yaw = np.arctan2(rot0[1, 0], rot0[0, 0])
    out = np.zeros((len(scene.tracks), 10))
    if not scene.tracks:
        return out
    out[:, 0:3] = object_positions_ego(scene, 0)
    for i, tr in enumerate(scene.tracks):
        yaw = tr.yaw - ego_yaw
        out[i, 3:6] = tr.size
        out[i, 6] = np.sin(yaw)
        out[i, 7] = np.cos(yaw)
        v = rot0.T @ np.array([tr.velocity[0], tr.velocity[1], 0.0])
        out[i, 8:10] = v[:2]
    return out


def object_velocities_ego(scene: SyntheticScene, t: int) -> np.ndarray:
    """``(num_tracks, 2)`` planar velocities in frame ``t`` ego coordinates."""
    if not scene.tracks:
        return np.zeros((0, 2))
    rot = scene.poses[t].ego_to_world.rotation
    world = np.array([[tr.velocity[0], tr.velocity[1], 0.0] for tr in scene.tracks])
    return (world @ rot)[:, :2]


def render_features(scene: SyntheticScene, t: int) -> list[FeatureGrid]:
    """Per-view feature grids for frame ``t`` (values rounded to float32)."""
    if not 0 <= t < scene.num_frames:
        raise IndexError(f"frame {t} outside 0..{scene.num_frames - 1}")
    h, w, c = scene.height, scene.width, scene.channels
    sigma = scene.blob_sigma_px
    reach = 4.0 * sigma
    centers = object_positions_ego(scene, t)
    velocities = object_velocities_ego(scene, t)
    pos_off = np.asarray(REGRESSION_OFFSETS["position"])
    vel_off = np.asarray(REGRESSION_OFFSETS["velocity"])
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    grids = []
    for cam in scene.rig:
        data = np.zeros((c, h, w))
        best = np.zeros((h, w))
        depth = np.zeros((h, w))
        if len(centers):
            uv, z, ok = project_points(cam, centers)
            # far to near so nearer silhouettes overwrite farther ones
            for i in sorted(np.flatnonzero(ok), key=lambda j: (-z[j], j)):
                tr = scene.tracks[i]
                u, v = uv[i]
                radius = max(MIN_DISK_PX, cam.intrinsics.fx * 0.5 * max(tr.size[0], tr.size[2]) / z[i])
                margin = max(reach, radius)
                if u < -margin or u > w - 1 + margin or v < -margin or v > h - 1 + margin:
                    continue
                d2 = (xs - u) ** 2 + (ys - v) ** 2
                blob = np.exp(-d2 / (2.0 * sigma**2))
                ch = tr.signature_channel
                np.maximum(data[ch], blob, out=data[ch])
                win = blob > best
                best[win] = blob[win]
                depth[win] = z[i]
                disk = d2 <= radius**2
                data[MASK_CHANNEL][disk] = 1.0
                for k, chan in enumerate(POSITION_CHANNELS):
                    data[chan][disk] = centers[i, k] + pos_off[k]
                for k, chan in enumerate(VELOCITY_CHANNELS):
                    data[chan][disk] = velocities[i, k] + vel_off[k]
                for k, chan in enumerate(APPEARANCE_CHANNELS):
                    data[chan][disk] = tr.appearance[k]
        data[OBJECTNESS_CHANNEL] = best
        data[DEPTH_CHANNEL] = best * depth
        data = data.astype(np.float32).astype(np.float64)
        grids.append(FeatureGrid(data, frame=t, view=cam.view_id))
    return grids


def render_all(scene: SyntheticScene, frames: int | None = None) -> list[list[FeatureGrid]]:
    n = scene.num_frames if frames is None else frames
    return [render_features(scene, t) for t in range(n)]


# --- persistence ------------------------------------------------------------


def _se3_to_dict(tr: SE3Transform) -> dict:
    return {"rotation": tr.rotation.tolist(), "translation": tr.translation.tolist()}


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "seed": scene.seed,
        "tau": scene.tau,
        "blob_sigma_px": scene.blob_sigma_px,
        "dims": {"channels": scene.channels, "height": scene.height, "width": scene.width},
        "rig": [
            {
                "view_id": cam.view_id,
                "intrinsics": asdict(cam.intrinsics),
                "extrinsics": _se3_to_dict(cam.extrinsics),
            }
            for cam in scene.rig
        ],
        "poses": [{"timestamp": p.timestamp, "ego_to_world": _se3_to_dict(p.ego_to_world)} for p in scene.poses],
        "tracks": [
            {
                "id": tr.id,
                "class_id": tr.class_id,
                "size": list(tr.size),
                "position": list(tr.position),
                "velocity": list(tr.velocity),
                "yaw": tr.yaw,
                "signature_channel": tr.signature_channel,
                "appearance": list(tr.appearance),
            }
            for tr in scene.tracks
        ],
    }


def dumps_scene(scene: SyntheticScene) -> str:
    return json.dumps(scene_to_dict(scene), indent=1, sort_keys=True) + "\n"


class _Reader:
    """Field access with path-qualified ParseErrors."""

    def __init__(self, obj, path=""):
        self.obj = obj
        self.path = path

    def get(self, key):
        where = f"{self.path}.{key}" if self.path else key
        if not isinstance(self.obj, dict) or key not in self.obj:
            raise ParseError("missing required field", field=where)
        return _Reader(self.obj[key], where)

    def items(self):
        if not isinstance(self.obj, list):
            raise ParseError("expected a list", field=self.path)
        return [_Reader(v, f"{self.path}[{i}]") for i, v in enumerate(self.obj)]

    def num(self, key, kind=float):
        r = self.get(key)
        if isinstance(r.obj, bool) or not isinstance(r.obj, (int, float)):
            raise ParseError("expected a number", field=r.path)
        return kind(r.obj)

    def vec(self, key, length):
        r = self.get(key)
        arr = r.obj
        if not isinstance(arr, list) or len(arr) != length:
            raise ParseError(f"expected a list of {length} numbers", field=r.path)
        return tuple(float(v) for v in arr)

    def se3(self, key):
        r = self.get(key)
        rot = r.get("rotation").obj
        try:
            return SE3Transform(np.array(rot, dtype=np.float64), np.array(r.vec("translation", 3)))
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), field=r.path) from None


def scene_from_dict(data: dict) -> SyntheticScene:
    root = _Reader(data)
    fmt = root.get("format").obj
    if fmt != SCENE_FORMAT:
        raise ParseError(f"unexpected format {fmt!r}", field="format")
    version = root.get("version").obj
    if version != SCENE_VERSION:
        raise ParseError(f"unsupported version {version!r} (expected {SCENE_VERSION})", field="version")
    dims = root.get("dims")
    rig = []
    for cam in root.get("rig").items():
        intr = cam.get("intrinsics")
        try:
            intrinsics = CameraIntrinsics(
                fx=intr.num("fx"), fy=intr.num("fy"), cx=intr.num("cx"), cy=intr.num("cy"),
                width=intr.num("width", int), height=intr.num("height", int),
            )
        except ValueError as exc:
            raise ParseError(str(exc), field=intr.path) from None
        rig.append(CameraModel(intrinsics, cam.se3("extrinsics"), cam.num("view_id", int)))
    poses = [EgoPose(p.se3("ego_to_world"), p.num("timestamp")) for p in root.get("poses").items()]
    tracks = []
    for tr in root.get("tracks").items():
        tracks.append(
            ObjectTrack(
                id=tr.num("id", int),
                class_id=tr.num("class_id", int),
                size=tr.vec("size", 3),
                position=tr.vec("position", 3),
                velocity=tr.vec("velocity", 2),
                yaw=tr.num("yaw"),
                signature_channel=tr.num("signature_channel", int),
                appearance=tr.vec("appearance", 3),
            )
        )
    return SyntheticScene(
        rig=rig,
        poses=poses,
        tracks=tracks,
        channels=dims.num("channels", int),
        height=dims.num("height", int),
        width=dims.num("width", int),
        tau=root.num("tau"),
        seed=root.num("seed", int),
        blob_sigma_px=root.num("blob_sigma_px"),
    )


def loads_scene(text: str) -> SyntheticScene:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    return scene_from_dict(data)


def save_scene(scene: SyntheticScene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_scene(scene))


def load_scene(path) -> SyntheticScene:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_scene(fh.read())


def feature_path(root, t: int, v: int) -> str:
    return os.path.join(root, "features", f"t{t}_v{v}.fgrd")


def write_scene_dir(scene: SyntheticScene, out_dir) -> None:
    """Write ``scene.json`` and ``features/t{t}_v{v}.fgrd`` for every frame and view."""
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    save_scene(scene, os.path.join(out_dir, "scene.json"))
    for t in range(scene.num_frames):
        for grid in render_features(scene, t):
            save_fgrd(feature_path(out_dir, t, grid.view), grid.data)


def read_scene_dir(scene_dir):
    """Load ``(scene, features[t][v])`` from a directory written by :func:`write_scene_dir`."""
    scene = load_scene(os.path.join(scene_dir, "scene.json"))
    features = []
    for t in range(scene.num_frames):
        row = []
        for cam in scene.rig:
            data = load_fgrd(feature_path(scene_dir, t, cam.view_id))
            row.append(FeatureGrid(data, frame=t, view=cam.view_id))
        features.append(row)
    return scene, features
