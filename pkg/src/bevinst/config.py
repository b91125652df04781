"""Run configuration with validated defaults.

Defaults mirror the reference hyperparameters: K = 6 sampling points,
T_chi = 3 sampled frames, eta = 3, lambda = 0.6, tau = 0.5 s, a 128 x 128
BEV of 0.8 m cells over [-51.2, 51.2] m, and 450 proposal + 450 potential
queries.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import InvalidConfig, ParseError
from .lss import BEVSpec, uniform_depth_bins
from .scene import SceneConfig


@dataclass
class DepthBins:
    count: int = 16
    near: float = 1.0
    far: float = 60.0

    def values(self) -> np.ndarray:
        return uniform_depth_bins(self.count, self.near, self.far)


@dataclass
class Seeds:
    params: int = 0
    padding: int = 0
    potential: int = 0
    jitter: int = 0


@dataclass
class RunConfig:
    channels: int = 32
    heads: int = 8
    bev: BEVSpec = field(default_factory=BEVSpec)
    depth_bins: DepthBins = field(default_factory=DepthBins)
    history: int = 3
    t_chi: int = 3
    k: int = 6
    eta: float = 3.0
    lam: float = 0.6
    layers: int = 6
    tau: float = 0.5
    n_beta: int = 450
    n_gamma: int = 450
    nms_threshold: float = 0.1
    nms_radius: float = 1.0
    output_count: int = 300
    extrinsics_jitter: float = 0.0
    seeds: Seeds = field(default_factory=Seeds)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        self.scene = replace(self.scene, channels=self.channels, history=self.history, tau=self.tau)

    def validate(self) -> RunConfig:
        for name in ("channels", "heads", "history", "k", "layers", "n_beta", "output_count"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(name, "must be positive")
        if self.n_gamma < 0:
            raise InvalidConfig("n_gamma", "must be non-negative")
        if not 0 <= self.t_chi <= self.history:
            raise InvalidConfig("t_chi", f"must satisfy 0 <= t_chi <= history ({self.history})")
        if not 0.0 < self.lam < 1.0:
            raise InvalidConfig("lambda", f"must lie in (0, 1), got {self.lam}")
        if not self.eta > 0:
            raise InvalidConfig("eta", "must be positive")
        if not self.tau > 0:
            raise InvalidConfig("tau", "must be positive")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise InvalidConfig("nms_threshold", "must lie in [0, 1]")
        if self.nms_radius < 0:
            raise InvalidConfig("nms_radius", "must be non-negative")
        if self.channels % self.heads:
            raise InvalidConfig("heads", f"must divide channels ({self.channels})")
        if self.depth_bins.count < 2 or not 0 < self.depth_bins.near < self.depth_bins.far:
            raise InvalidConfig("depth_bins", "need count >= 2 and 0 < near < far")
        if self.extrinsics_jitter < 0:
            raise InvalidConfig("extrinsics_jitter", "must be non-negative")
        self.scene.validate()
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        out["bev"]["range_min"] = list(self.bev.range_min)
        out["bev"]["z_bounds"] = list(self.bev.z_bounds)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


_SECTIONS = {"bev": BEVSpec, "depth_bins": DepthBins, "seeds": Seeds, "scene": SceneConfig}


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    known = {f.name for f in fields(RunConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise InvalidConfig(key, "unknown config field")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise InvalidConfig(key, "expected an object")
            sub_known = {f.name for f in fields(_SECTIONS[key])}
            for sub in value:
                if sub not in sub_known:
                    raise InvalidConfig(f"{key}.{sub}", "unknown config field")
            sub = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
            try:
                kwargs[key] = _SECTIONS[key](**sub)
            except ValueError as exc:
                raise InvalidConfig(key, str(exc)) from None
        else:
            kwargs[key] = value
    scene_section = data.get("scene", {})
    for shared in ("channels", "history", "tau"):
        if shared in scene_section and shared in kwargs and scene_section[shared] != kwargs[shared]:
            raise InvalidConfig(f"scene.{shared}", f"conflicts with top-level {shared}")
        if shared in scene_section and shared not in kwargs:
            kwargs[shared] = scene_section[shared]
    for key in ("lam", "eta", "tau"):
        if key in kwargs and (isinstance(kwargs[key], bool) or not isinstance(kwargs[key], (int, float))):
            raise InvalidConfig("lambda" if key == "lam" else key, "must be a number")
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    if not isinstance(data, dict):
        raise ParseError("config must be a JSON object")
    return config_from_dict(data)
