"""Synthetic scene generation and the sensor-failure scenarios.

Scenes are a pure function of (config, seed): ground-truth boxes placed
without BEV overlap, per-frame LiDAR point clouds sampled on sensor-visible
box faces with inverse-square density plus uniform ground clutter, pillar
-style BEV feature pyramids, and camera feature maps carrying Gaussian blobs
at projected object centers whose channels encode class, depth, size, yaw
and velocity on top of a fixed positional encoding.

Point clouds are stored in the ego frame of their own timestamp; frame 0 is
the current frame and coincides with the world/detection frame.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .classes import (
    CLASS_INTENSITY,
    CLASS_MIX,
    CLUTTER_INTENSITY,
    NUM_CLASSES,
    SIZE_JITTER,
    SIZE_PRIORS,
    SPEED_SCALE,
)
from .config import ModelSection, RunConfig, ScenarioSection, SimSection
from .featuremaps import CameraFeatureSet, FeatureMap, LidarFeaturePyramid
from .geometry import (
    Box3D,
    CameraRig,
    CameraView,
    DetectionRange,
    bev_rotated_iou,
    invert_rigid,
    make_rigid,
    project_to_view,
    rot_z,
)

HAND_FEATURES = 5  # count, max height, mean intensity, centroid dx, dy
CONTENT_CHANNELS = NUM_CLASSES + 8  # one-hot + invdepth + size(3) + sincos + vel(2)
POSENC_CHANNELS = 8
FRONT_VIEW = 0


class SimError(RuntimeError):
    pass


@dataclass
class ScenarioSpec:
    """Runtime form of a sensor-failure scenario (see ScenarioSection)."""

    kind: str
    angle_deg: float = 120.0
    frame_rate: float = 0.5
    object_rate: float = 0.5
    stuck_sensor: str = "camera"
    seed: int = 0

    @classmethod
    def from_config(cls, sec: ScenarioSection) -> "ScenarioSpec":
        return cls(
            kind=sec.kind,
            angle_deg=sec.angle_deg,
            frame_rate=sec.frame_rate,
            object_rate=sec.object_rate,
            stuck_sensor=sec.stuck_sensor,
            seed=sec.seed,
        )


@dataclass
class SceneSample:
    scene_id: int
    seed: int
    gt_boxes: list
    rig: CameraRig
    det_range: DetectionRange
    points: list  # per frame, (N, 4) float32-compatible [x, y, z, intensity]
    obj_ids: list  # per frame, (N,) int32; -1 for clutter
    cam_maps: dict  # (v, m, t) -> (H, W, C) ndarray
    lidar_maps: list  # per scale, (H, W, C) ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def feature_set(self, cfg: ModelSection) -> CameraFeatureSet:
        key = ("cam", cfg.precision)
        if key not in self._cache:
            dtype = T.DOUBLE if cfg.precision == "double" else T.SINGLE
            maps = {
                k: FeatureMap(T.Tensor(v.astype(dtype)), scale_id=k[1])
                for k, v in self.cam_maps.items()
            }
            # per-scale pixel-to-texel ratio, recovered from the map shapes
            img_w = self.rig.views[0].image_size[0]
            strides = [
                img_w / self.cam_maps[(0, m, 0)].shape[1]
                for m in range(cfg.num_cam_scales)
            ]
            self._cache[key] = CameraFeatureSet(
                maps, cfg.num_views, cfg.num_cam_scales, cfg.num_frames, strides
            )
        return self._cache[key]

    def lidar_pyramid(self, cfg: ModelSection) -> LidarFeaturePyramid:
        key = ("lidar", cfg.precision)
        if key not in self._cache:
            dtype = T.DOUBLE if cfg.precision == "double" else T.SINGLE
            maps = [
                FeatureMap(T.Tensor(m.astype(dtype)), scale_id=r)
                for r, m in enumerate(self.lidar_maps)
            ]
            self._cache[key] = LidarFeaturePyramid(maps, self.det_range)
        return self._cache[key]


_BASE_STRIDE = 8


def cfg_stride(scale: int, base: int = _BASE_STRIDE) -> int:
    return base * (2 ** scale)


# ---------------------------------------------------------------------------
# rig construction
# ---------------------------------------------------------------------------


def build_rig(model: ModelSection, sim: SimSection) -> CameraRig:
    """V views spread uniformly in azimuth (view 0 facing forward +X) plus
    straight-line constant-speed ego motion into the past."""
    views = []
    W, H = sim.image_width, sim.image_height
    K = np.array(
        [[sim.focal, 0.0, W / 2.0], [0.0, sim.focal, H / 2.0], [0.0, 0.0, 1.0]]
    )
    cam_pos = np.array([0.0, 0.0, sim.camera_height])
    for v in range(model.num_views):
        phi = 2.0 * math.pi * v / model.num_views
        fwd = np.array([math.cos(phi), math.sin(phi), 0.0])
        right = np.array([math.sin(phi), -math.cos(phi), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        R_cw = np.stack([right, down, fwd], axis=1)  # camera -> world
        R = R_cw.T
        t = -R @ cam_pos
        views.append(CameraView(intrinsics=K, extrinsics=make_rigid(R, t), image_size=(W, H)))
    poses = []
    for t_idx in range(model.num_frames):
        shift = np.array([-sim.ego_speed * sim.frame_dt * t_idx, 0.0, 0.0])
        poses.append(make_rigid(np.eye(3), shift))
    return CameraRig(views=views, ego_poses=poses)


# ---------------------------------------------------------------------------
# object placement and motion
# ---------------------------------------------------------------------------


def _place_objects(model: ModelSection, sim: SimSection, rng) -> list:
    det_range = model.detection_range()
    n = int(rng.integers(sim.min_objects, sim.max_objects + 1))
    boxes = []
    for _ in range(n):
        for attempt in range(sim.max_place_retries):
            cls = int(rng.choice(NUM_CLASSES, p=CLASS_MIX))
            size = SIZE_PRIORS[cls] * np.exp(rng.normal(0.0, SIZE_JITTER, size=3))
            x = rng.uniform(det_range.x_min + sim.spawn_margin, det_range.x_max - sim.spawn_margin)
            y = rng.uniform(det_range.y_min + sim.spawn_margin, det_range.y_max - sim.spawn_margin)
            if math.hypot(x, y) < sim.spawn_min_radius:
                continue
            yaw = rng.uniform(-math.pi, math.pi)
            speed = abs(rng.normal(0.0, SPEED_SCALE[cls])) if SPEED_SCALE[cls] > 0 else 0.0
            heading = rng.uniform(-math.pi, math.pi)
            vel = np.array([speed * math.cos(heading), speed * math.sin(heading)])
            cand = Box3D(
                center=np.array([x, y, size[2] / 2.0]),
                size=size,
                yaw=yaw,
                velocity=vel,
                class_id=cls,
                score=1.0,
            )
            if all(bev_rotated_iou(cand, b) == 0.0 for b in boxes):
                boxes.append(cand)
                break
        else:
            raise SimError("object placement failed after max retries")
    return boxes


def _ego_yaw(pose: np.ndarray) -> float:
    return math.atan2(pose[1, 0], pose[0, 0])


def box_at_frame(box: Box3D, rig: CameraRig, frame: int, dt: float) -> Box3D:
    """Constant-velocity object pose at a past frame, in that frame's ego coords."""
    v3 = np.array([box.velocity[0], box.velocity[1], 0.0])
    center_world = box.center - v3 * (dt * frame)
    inv = invert_rigid(rig.ego_poses[frame])
    center = inv[:3, :3] @ center_world + inv[:3, 3]
    yaw = box.yaw - _ego_yaw(rig.ego_poses[frame])
    return Box3D(center, box.size, yaw, box.velocity, box.class_id, box.score)


# ---------------------------------------------------------------------------
# LiDAR point generation
# ---------------------------------------------------------------------------


def _box_faces(box: Box3D):
    """The five potentially visible faces: center, unit normal, in-face axes
    and half-sizes. Bottom face is never visible from an elevated sensor."""
    R = rot_z(box.yaw)
    l, w, h = box.size
    c = box.center
    ex, ey, ez = R[:, 0], R[:, 1], np.array([0.0, 0.0, 1.0])
    return [
        (c + ex * (l / 2), ex, ey, ez, w / 2, h / 2),
        (c - ex * (l / 2), -ex, ey, ez, w / 2, h / 2),
        (c + ey * (w / 2), ey, ex, ez, l / 2, h / 2),
        (c - ey * (w / 2), -ey, ex, ez, l / 2, h / 2),
        (c + ez * (h / 2), ez, ex, ey, l / 2, w / 2),
    ]


def _ray_hits_box(origin: np.ndarray, targets: np.ndarray, box: Box3D) -> np.ndarray:
    """Whether segments origin->target pass through the box interior (slab test
    in the box local frame); endpoints on the surface do not count."""
    R = rot_z(box.yaw)
    o = R.T @ (origin - box.center)
    d = (targets - box.center) @ R
    d = d - o
    half = box.size / 2.0
    t0 = np.zeros(len(targets))
    t1 = np.ones(len(targets))
    hit = np.ones(len(targets), dtype=bool)
    for axis in range(3):
        da = d[:, axis]
        oa = o[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            near = (-half[axis] - oa) / da
            far = (half[axis] - oa) / da
        swap = near > far
        near[swap], far[swap] = far[swap], near[swap].copy()
        parallel = np.abs(da) < 1e-12
        inside = np.abs(oa) <= half[axis]
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    hit &= t0 < t1 - 1e-9
    hit &= t0 < 1.0 - 1e-6  # entering at/after the target is not occlusion
    return hit


def lidar_points(
    boxes_in_frame: list,
    det_range: DetectionRange,
    sim: SimSection,
    rng,
) -> tuple:
    """One frame's point cloud: visible box faces (1/d^2 density, occlusion-
    tested against the other boxes) plus uniform ground clutter.

    Returns (points (N, 4), obj_ids (N,)).
    """
    sensor = np.array([0.0, 0.0, sim.lidar_height])
    pts = []
    ids = []
    for i, box in enumerate(boxes_in_frame):
        others = [b for j, b in enumerate(boxes_in_frame) if j != i]
        for fc, n, ax_a, ax_b, ha, hb in _box_faces(box):
            view = sensor - fc
            dist = np.linalg.norm(view)
            cos_t = float(n @ view) / max(dist, 1e-9)
            if cos_t <= 0.05:
                continue
            lam = sim.point_density * (4 * ha * hb) * cos_t / max(dist * dist, 1.0)
            count = int(rng.poisson(lam))
            if count == 0:
                continue
            a = rng.uniform(-ha, ha, size=count)
            b = rng.uniform(-hb, hb, size=count)
            p = fc[None, :] + a[:, None] * ax_a[None, :] + b[:, None] * ax_b[None, :]
            if others:
                occluded = np.zeros(count, dtype=bool)
                for ob in others:
                    occluded |= _ray_hits_box(sensor, p, ob)
                p = p[~occluded]
            if len(p):
                inten = np.full(len(p), CLASS_INTENSITY[box.class_id])
                pts.append(np.column_stack([p, inten]))
                ids.append(np.full(len(p), i, dtype=np.int32))
    area = (det_range.x_max - det_range.x_min) * (det_range.y_max - det_range.y_min)
    n_clutter = int(rng.poisson(sim.clutter_density * area))
    cx = rng.uniform(det_range.x_min, det_range.x_max, size=n_clutter)
    cy = rng.uniform(det_range.y_min, det_range.y_max, size=n_clutter)
    cz = rng.normal(0.0, 0.02, size=n_clutter)
    clutter = np.column_stack([cx, cy, cz, np.full(n_clutter, CLUTTER_INTENSITY)])
    pts.append(clutter)
    ids.append(np.full(n_clutter, -1, dtype=np.int32))
    points = np.concatenate(pts, axis=0) if pts else np.zeros((0, 4))
    obj_ids = np.concatenate(ids, axis=0) if ids else np.zeros((0,), dtype=np.int32)
    return points.astype(np.float32), obj_ids


# ---------------------------------------------------------------------------
# LiDAR BEV features
# ---------------------------------------------------------------------------

_EMBED_CACHE: dict = {}


def lidar_embedding(channels: int) -> np.ndarray:
    """Fixed seeded linear embedding of the pillar hand-features."""
    if channels not in _EMBED_CACHE:
        rng = np.random.default_rng(np.random.SeedSequence([0x11D42, channels]))
        _EMBED_CACHE[channels] = rng.normal(0.0, 1.0 / math.sqrt(HAND_FEATURES),
                                            size=(HAND_FEATURES, channels))
    return _EMBED_CACHE[channels]


def lidar_bev_features(
    points: np.ndarray,
    det_range: DetectionRange,
    num_scales: int,
    channels: int,
    grid: int,
) -> list:
    """Pillar-style hand features per cell, linearly embedded to C channels;
    coarser scales average-pool their four children."""
    H = W = grid
    dx = det_range.x_max - det_range.x_min
    dy = det_range.y_max - det_range.y_min
    feats = np.zeros((H, W, HAND_FEATURES))
    if len(points):
        xs = (points[:, 0] - det_range.x_min) / dx * W
        ys = (points[:, 1] - det_range.y_min) / dy * H
        inside = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
        xs, ys = xs[inside], ys[inside]
        pz = points[inside, 2]
        pi = points[inside, 3]
        ix = xs.astype(np.int64)
        iy = ys.astype(np.int64)
        count = np.zeros((H, W))
        np.add.at(count, (iy, ix), 1.0)
        sum_i = np.zeros((H, W))
        np.add.at(sum_i, (iy, ix), pi)
        sum_x = np.zeros((H, W))
        np.add.at(sum_x, (iy, ix), xs)
        sum_y = np.zeros((H, W))
        np.add.at(sum_y, (iy, ix), ys)
        max_z = np.full((H, W), -np.inf)
        np.maximum.at(max_z, (iy, ix), pz)
        occupied = count > 0
        safe = np.maximum(count, 1.0)
        feats[:, :, 0] = np.log1p(count) / 4.0
        feats[:, :, 1] = np.where(occupied, max_z, 0.0) / 3.0
        feats[:, :, 2] = sum_i / safe
        cell_cx = np.broadcast_to(np.arange(W) + 0.5, (H, W))
        cell_cy = np.broadcast_to((np.arange(H) + 0.5)[:, None], (H, W))
        feats[:, :, 3] = np.where(occupied, sum_x / safe - cell_cx, 0.0)
        feats[:, :, 4] = np.where(occupied, sum_y / safe - cell_cy, 0.0)
    embed = lidar_embedding(channels)
    finest = feats.reshape(-1, HAND_FEATURES) @ embed
    finest = finest.reshape(H, W, channels)
    maps = [finest]
    for _ in range(1, num_scales):
        prev = maps[-1]
        h, w, c = prev.shape
        pooled = prev.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
        maps.append(pooled)
    return maps


# ---------------------------------------------------------------------------
# camera features
# ---------------------------------------------------------------------------

_POSENC_CACHE: dict = {}


def positional_encoding(h: int, w: int) -> np.ndarray:
    """Fixed sin/cos encoding of normalized texel coordinates (8 channels)."""
    key = (h, w)
    if key not in _POSENC_CACHE:
        u = (np.arange(w) + 0.5) / w
        v = (np.arange(h) + 0.5) / h
        uu = np.broadcast_to(u, (h, w))
        vv = np.broadcast_to(v[:, None], (h, w))
        chans = []
        for freq in (1.0, 3.0):
            chans += [
                np.sin(2 * math.pi * freq * uu),
                np.cos(2 * math.pi * freq * uu),
                np.sin(2 * math.pi * freq * vv),
                np.cos(2 * math.pi * freq * vv),
            ]
        _POSENC_CACHE[key] = np.stack(chans, axis=-1)
    return _POSENC_CACHE[key]


def _content_vector(box: Box3D, depth: float) -> np.ndarray:
    vec = np.zeros(CONTENT_CHANNELS)
    vec[box.class_id] = 1.0
    vec[NUM_CLASSES] = 10.0 / (depth + 5.0)
    vec[NUM_CLASSES + 1] = box.size[0] / 5.0
    vec[NUM_CLASSES + 2] = box.size[1] / 5.0
    vec[NUM_CLASSES + 3] = box.size[2] / 3.0
    vec[NUM_CLASSES + 4] = math.sin(box.yaw)
    vec[NUM_CLASSES + 5] = math.cos(box.yaw)
    vec[NUM_CLASSES + 6] = box.velocity[0] / 3.0
    vec[NUM_CLASSES + 7] = box.velocity[1] / 3.0
    return vec


def camera_features(
    gt_boxes: list,
    rig: CameraRig,
    model: ModelSection,
    sim: SimSection,
    rng,
) -> dict:
    """Gaussian blobs at projected object centers over noise plus a fixed
    positional encoding. Returns (v, m, t) -> (H, W, C) maps."""
    C = model.channels
    if C < CONTENT_CHANNELS + POSENC_CHANNELS:
        raise SimError(
            f"channels must be >= {CONTENT_CHANNELS + POSENC_CHANNELS} for camera content"
        )
    maps = {}
    for v in range(model.num_views):
        view = rig.views[v]
        for m in range(model.num_cam_scales):
            stride = cfg_stride(m, sim.base_stride)
            h = sim.image_height // stride
            w = sim.image_width // stride
            sigma = sim.blob_sigma_px / stride
            for t in range(model.num_frames):
                grid = np.zeros((h, w, C))
                grid[:, :, CONTENT_CHANNELS : CONTENT_CHANNELS + POSENC_CHANNELS] = (
                    positional_encoding(h, w)
                )
                if sim.feature_noise > 0:
                    grid += rng.normal(0.0, sim.feature_noise, size=(h, w, C))
                for box in gt_boxes:
                    b_t = box_at_frame(box, rig, t, sim.frame_dt)
                    proj = project_to_view(b_t.center, view)
                    if proj is None:
                        continue
                    cx, cy = proj[0] / stride, proj[1] / stride
                    xx = np.arange(w) + 0.5
                    yy = np.arange(h) + 0.5
                    g = np.exp(
                        -(
                            (xx[None, :] - cx) ** 2 + (yy[:, None] - cy) ** 2
                        )
                        / (2.0 * sigma * sigma)
                    )
                    content = _content_vector(b_t, proj[2])
                    grid[:, :, :CONTENT_CHANNELS] += g[:, :, None] * content
                maps[(v, m, t)] = grid
    return maps


# ---------------------------------------------------------------------------
# scene assembly
# ---------------------------------------------------------------------------


def generate_scene(model: ModelSection, sim: SimSection, scene_id: int) -> SceneSample:
    """Deterministic scene from (config, sim.seed, scene_id)."""
    seq = np.random.SeedSequence([int(sim.seed), 0x5CE9E, int(scene_id)])
    rng_place, rng_points, rng_cam = [np.random.default_rng(s) for s in seq.spawn(3)]
    det_range = model.detection_range()
    rig = build_rig(model, sim)
    gt_boxes = _place_objects(model, sim, rng_place)

    points = []
    obj_ids = []
    for t in range(model.num_frames):
        frame_boxes = [box_at_frame(b, rig, t, sim.frame_dt) for b in gt_boxes]
        p, ids = lidar_points(frame_boxes, det_range, sim, rng_points)
        points.append(p)
        obj_ids.append(ids)

    lidar_maps = lidar_bev_features(
        points[0], det_range, model.num_lidar_scales, model.channels, sim.bev_grid
    )
    cam_maps = camera_features(gt_boxes, rig, model, sim, rng_cam)
    return SceneSample(
        scene_id=scene_id,
        seed=int(sim.seed),
        gt_boxes=gt_boxes,
        rig=rig,
        det_range=det_range,
        points=points,
        obj_ids=obj_ids,
        cam_maps=cam_maps,
        lidar_maps=lidar_maps,
    )


# ---------------------------------------------------------------------------
# failure scenarios
# ---------------------------------------------------------------------------


def apply_scenario(
    sample: SceneSample,
    spec: ScenarioSpec,
    model: ModelSection,
    sim: SimSection,
) -> SceneSample:
    """Corrupt sensor data per the scenario; ground truth is never modified."""
    rng = np.random.default_rng(
        np.random.SeedSequence([int(spec.seed), 0xBAD, int(sample.scene_id)])
    )
    points = [p.copy() for p in sample.points]
    obj_ids = [i.copy() for i in sample.obj_ids]
    cam_maps = {k: v for k, v in sample.cam_maps.items()}
    lidar_frame = 0

    if spec.kind == "fov_limited":
        half = math.radians(spec.angle_deg) / 2.0
        for t in range(len(points)):
            az = np.arctan2(points[t][:, 1], points[t][:, 0])
            keep = np.abs(az) <= half
            points[t] = points[t][keep]
            obj_ids[t] = obj_ids[t][keep]
    elif spec.kind == "object_failure":
        for t in range(len(points)):
            if rng.random() >= spec.frame_rate:
                continue
            drop = rng.random(len(sample.gt_boxes)) < spec.object_rate
            dropped_ids = np.flatnonzero(drop)
            keep = ~np.isin(obj_ids[t], dropped_ids)
            points[t] = points[t][keep]
            obj_ids[t] = obj_ids[t][keep]
    elif spec.kind == "front_occlusion":
        for (v, m, t), grid in sample.cam_maps.items():
            if v == FRONT_VIEW:
                cam_maps[(v, m, t)] = np.zeros_like(grid)
    elif spec.kind == "stuck":
        if len(points) < 2:
            raise SimError("stuck scenario requires at least 2 frames")
        if rng.random() < spec.frame_rate:
            if spec.stuck_sensor == "camera":
                T_frames = model.num_frames
                shifted = {}
                for (v, m, t), grid in cam_maps.items():
                    shifted[(v, m, t)] = sample.cam_maps[(v, m, min(t + 1, T_frames - 1))]
                cam_maps = shifted
            else:
                lidar_frame = 1
    else:
        raise SimError(f"unknown scenario kind {spec.kind}")

    lidar_maps = lidar_bev_features(
        points[lidar_frame], sample.det_range, model.num_lidar_scales,
        model.channels, sim.bev_grid,
    )
    return SceneSample(
        scene_id=sample.scene_id,
        seed=sample.seed,
        gt_boxes=sample.gt_boxes,
        rig=sample.rig,
        det_range=sample.det_range,
        points=points,
        obj_ids=obj_ids,
        cam_maps=cam_maps,
        lidar_maps=lidar_maps,
    )


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def dataset_hash(cfg: RunConfig) -> str:
    """Hash of the dataset-relevant config sections (model + sim)."""
    import hashlib

    payload = json.dumps(
        {"model": cfg.to_dict()["model"], "sim": cfg.to_dict()["sim"]},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def write_dataset(out_dir: str, cfg: RunConfig, scenes: list):
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for sc in scenes:
        name = f"scene_{sc.scene_id:04d}"
        names.append(name)
        d = os.path.join(out_dir, name)
        os.makedirs(d, exist_ok=True)
        side = {
            "scene_id": sc.scene_id,
            "seed": sc.seed,
            "gt_boxes": [b.to_dict() for b in sc.gt_boxes],
            "rig": sc.rig.to_dict(),
            "det_range": sc.det_range.to_dict(),
            "num_frames": len(sc.points),
        }
        with open(os.path.join(d, "scene.json"), "w", encoding="utf-8") as fh:
            json.dump(side, fh, sort_keys=True, indent=1)
        for t, (p, ids) in enumerate(zip(sc.points, sc.obj_ids)):
            np.save(os.path.join(d, f"points_t{t}.npy"), p.astype(np.float32))
            np.save(os.path.join(d, f"obj_ids_t{t}.npy"), ids.astype(np.int32))
        for (v, m, t), grid in sorted(sc.cam_maps.items()):
            np.save(os.path.join(d, f"cam_v{v}_m{m}_t{t}.npy"), grid.astype(np.float32))
        for r, grid in enumerate(sc.lidar_maps):
            np.save(os.path.join(d, f"lidar_r{r}.npy"), grid.astype(np.float32))
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": cfg.hash(),
        "dataset_hash": dataset_hash(cfg),
        "seed": cfg.sim.seed,
        "num_scenes": len(scenes),
        "scenes": names,
        "config": cfg.to_dict(),
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load_manifest(dataset_dir: str) -> dict:
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise SimError(f"no dataset manifest at {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_dataset(dataset_dir: str) -> list:
    manifest = load_manifest(dataset_dir)
    scenes = []
    for name in manifest["scenes"]:
        d = os.path.join(dataset_dir, name)
        with open(os.path.join(d, "scene.json"), "r", encoding="utf-8") as fh:
            side = json.load(fh)
        n_frames = side["num_frames"]
        points = [np.load(os.path.join(d, f"points_t{t}.npy")) for t in range(n_frames)]
        obj_ids = [np.load(os.path.join(d, f"obj_ids_t{t}.npy")) for t in range(n_frames)]
        cam_maps = {}
        for fname in sorted(os.listdir(d)):
            if fname.startswith("cam_") and fname.endswith(".npy"):
                stem = fname[4:-4]
                v, m, t = (int(part[1:]) for part in stem.split("_"))
                cam_maps[(v, m, t)] = np.load(os.path.join(d, fname))
        lidar_maps = []
        r = 0
        while os.path.exists(os.path.join(d, f"lidar_r{r}.npy")):
            lidar_maps.append(np.load(os.path.join(d, f"lidar_r{r}.npy")))
            r += 1
        scenes.append(
            SceneSample(
                scene_id=side["scene_id"],
                seed=side["seed"],
                gt_boxes=[Box3D.from_dict(b) for b in side["gt_boxes"]],
                rig=CameraRig.from_dict(side["rig"]),
                det_range=DetectionRange.from_dict(side["det_range"]),
                points=points,
                obj_ids=obj_ids,
                cam_maps=cam_maps,
                lidar_maps=lidar_maps,
            )
        )
    return scenes
