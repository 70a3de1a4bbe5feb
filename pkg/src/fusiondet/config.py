"""Run configuration: strict schema, defaults, dotted-path overrides, hashing.

One JSON document drives every command. Unknown keys are rejected so configs
stay diffable experiment records; the hash of the canonical form ties
datasets, checkpoints and reports together.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .geometry import DetectionRange


class ConfigError(ValueError):
    pass


def _strict_from_dict(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section '{prefix.rstrip('.')}' must be an object")
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            raise ConfigError(f"unknown config key: {prefix}{k}")
    kwargs = {}
    for f in fields(cls):
        if f.name in d:
            kwargs[f.name] = d[f.name]
    return cls(**kwargs)


@dataclass
class ModelSection:
    channels: int = 32
    num_queries: int = 60
    num_top: int = 20
    num_random: int = 40
    num_points: int = 4
    num_layers: int = 3
    num_cam_scales: int = 2
    num_lidar_scales: int = 2
    num_frames: int = 2
    num_views: int = 4
    num_classes: int = 3
    range_xy: list = field(default_factory=lambda: [-24.0, 24.0])
    range_z: list = field(default_factory=lambda: [-3.0, 3.0])
    precision: str = "single"
    max_offset_factor: float = 2.0
    center_step: float = 1.0  # meters of box-center shift per unit head output
    velocity_step: float = 1.0
    nms_iou: float = 0.5
    hidden_mult: int = 2

    def validate(self):
        if self.num_queries != self.num_top + self.num_random:
            raise ConfigError("model.num_queries must equal num_top + num_random")
        if self.num_top < 0 or self.num_random < 0:
            raise ConfigError("query counts must be nonnegative")
        if self.num_layers < 1:
            raise ConfigError("model.num_layers must be >= 1")
        if self.precision not in ("single", "double"):
            raise ConfigError("model.precision must be 'single' or 'double'")
        for name in ("channels", "num_points", "num_cam_scales", "num_lidar_scales",
                     "num_frames", "num_views", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")

    def detection_range(self) -> DetectionRange:
        return DetectionRange(
            self.range_xy[0], self.range_xy[1],
            self.range_xy[0], self.range_xy[1],
            self.range_z[0], self.range_z[1],
        )


def full_scale_model() -> "ModelSection":
    """Full-scale hyperparameters (not runnable at desk size; for reference)."""
    return ModelSection(
        channels=256,
        num_queries=900,
        num_top=200,
        num_random=700,
        num_points=4,
        num_layers=6,
        num_cam_scales=4,
        num_lidar_scales=4,
        num_frames=13,
        num_views=6,
        num_classes=10,
        range_xy=[-54.0, 54.0],
        range_z=[-5.0, 3.0],
    )


@dataclass
class OracleSection:
    pixel_sigma: float = 2.0
    depth_sigma: float = 0.04  # log-normal sigma on depth
    size_sigma: float = 0.05
    yaw_sigma: float = 0.1
    vel_sigma: float = 0.2
    miss_rate: float = 0.1
    fp_rate: float = 0.5  # Poisson mean false positives per view

    def validate(self):
        if not (0.0 <= self.miss_rate <= 1.0):
            raise ConfigError("sim.oracle.miss_rate must be in [0, 1]")
        if self.fp_rate < 0:
            raise ConfigError("sim.oracle.fp_rate must be >= 0")


@dataclass
class SimSection:
    num_scenes: int = 64
    min_objects: int = 2
    max_objects: int = 8
    image_width: int = 320
    image_height: int = 192
    focal: float = 150.0
    camera_height: float = 1.6
    lidar_height: float = 1.8
    bev_grid: int = 128
    base_stride: int = 8
    blob_sigma_px: float = 16.0
    feature_noise: float = 0.02
    point_density: float = 600.0  # expected points per m^2 of face at 1 m
    clutter_density: float = 1.2  # ground points per m^2
    ego_speed: float = 3.0
    frame_dt: float = 0.5
    spawn_min_radius: float = 5.0
    spawn_margin: float = 2.0
    max_place_retries: int = 200
    seed: int = 0
    oracle: OracleSection = field(default_factory=OracleSection)

    def validate(self):
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ConfigError("sim object counts invalid")
        if self.num_scenes < 1:
            raise ConfigError("sim.num_scenes must be >= 1")
        self.oracle.validate()


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    w_cls: float = 1.0
    w_box: float = 2.0
    w_unc: float = 0.25
    w_reg: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    no_object_cost: float = 2.0
    dist_cap: float = 5.0  # meters; distance targets saturate here
    clip_norm: float = 2.0
    log_every: int = 1

    def validate(self):
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")


@dataclass
class EvalSection:
    thresholds: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    tp_threshold: float = 2.0
    bins: list = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0])

    def validate(self):
        if sorted(self.thresholds) != list(self.thresholds):
            raise ConfigError("eval.thresholds must be ascending")
        if sorted(self.bins) != list(self.bins):
            raise ConfigError("eval.bins must be ascending")


@dataclass
class ScenarioSection:
    kind: str = "fov_limited"
    angle_deg: float = 120.0
    frame_rate: float = 0.5
    object_rate: float = 0.5
    stuck_sensor: str = "camera"
    seed: int = 0

    KINDS = ("fov_limited", "object_failure", "front_occlusion", "stuck")

    def validate(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"scenario.kind must be one of {self.KINDS}")
        if not (0.0 < self.angle_deg <= 360.0):
            raise ConfigError("scenario.angle_deg must be in (0, 360]")
        for r in (self.frame_rate, self.object_rate):
            if not (0.0 <= r <= 1.0):
                raise ConfigError("scenario rates must be in [0, 1]")
        if self.stuck_sensor not in ("camera", "lidar"):
            raise ConfigError("scenario.stuck_sensor must be 'camera' or 'lidar'")


@dataclass
class IoSection:
    out_dir: str = ""

    def validate(self):
        pass


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    sim: SimSection = field(default_factory=SimSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    io: IoSection = field(default_factory=IoSection)

    def validate(self):
        for sec in (self.model, self.sim, self.train, self.eval, self.scenario, self.io):
            sec.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown config key: {k}")
        cfg = cls(
            model=_strict_from_dict(ModelSection, d.get("model", {}), "model."),
            sim=_sim_from_dict(d.get("sim", {})),
            train=_strict_from_dict(TrainSection, d.get("train", {}), "train."),
            eval=_strict_from_dict(EvalSection, d.get("eval", {}), "eval."),
            scenario=_strict_from_dict(ScenarioSection, d.get("scenario", {}), "scenario."),
            io=_strict_from_dict(IoSection, d.get("io", {}), "io."),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    def apply_override(self, dotted: str, raw: str):
        """Set a config leaf via 'section.key=value' (JSON-parsed value)."""
        parts = dotted.split(".")
        obj = self
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise ConfigError(f"unknown config key: {dotted}")
            obj = getattr(obj, p)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config key: {dotted}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings allowed
        setattr(obj, leaf, value)


def _sim_from_dict(d: dict) -> SimSection:
    if not isinstance(d, dict):
        raise ConfigError("section 'sim' must be an object")
    d = dict(d)
    oracle = d.pop("oracle", {})
    sec = _strict_from_dict(SimSection, d, "sim.")
    sec.oracle = _strict_from_dict(OracleSection, oracle, "sim.oracle.")
    return sec
