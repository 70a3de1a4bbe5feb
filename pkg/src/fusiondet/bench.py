"""Micro-benchmarks for the sampling and mixing kernels.

Wall-time percentiles over repeated runs with deterministic inputs. numpy
allocates inside every op, so the "no allocation in the timed region" rule
cannot hold here; timings are for regression tracking only, not comparable
to any hardware-bound latency figures.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .paqg import generate_queries
from .params import init_model_params
from .rias import adaptive_mix, mix_params, pattern_params, predict_pattern, sample_camera, sample_lidar
from .scenesim import generate_scene

KERNELS = ("sample_lidar", "sample_camera", "adaptive_mix", "full_layer")


class BenchError(ValueError):
    pass


@dataclass
class BenchReport:
    kernel: str
    config: dict
    repetitions: int
    p50_ms: float
    p90_ms: float
    p99_ms: float
    queries_per_s: float
    parts_ms: dict

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "config": self.config,
            "repetitions": self.repetitions,
            "p50_ms": self.p50_ms,
            "p90_ms": self.p90_ms,
            "p99_ms": self.p99_ms,
            "queries_per_s": self.queries_per_s,
            "parts_ms": self.parts_ms,
        }


def _percentiles(samples: list) -> tuple:
    arr = np.array(samples)
    return tuple(float(np.percentile(arr, q)) for q in (50, 90, 99))


def bench_kernel(kernel: str, cfg: RunConfig, repetitions: int = 50) -> BenchReport:
    """Time one kernel at the configured sizes; >= 30 warm repetitions."""
    if kernel not in KERNELS:
        raise BenchError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
    repetitions = max(30, int(repetitions))
    mcfg = cfg.model
    scene = generate_scene(mcfg, cfg.sim, scene_id=0)
    store = init_model_params(mcfg, seed=0)
    rng = np.random.default_rng(0)
    batch = generate_queries(
        scene.gt_boxes, scene.rig, scene.feature_set(mcfg), mcfg,
        cfg.sim.oracle, store["query.default_embedding"], rng,
    )
    feats = scene.feature_set(mcfg)
    pyramid = scene.lidar_pyramid(mcfg)

    def layer_parts():
        parts = {}
        t0 = time.perf_counter()
        half = T.mul(T.exp(T.narrow(batch.box_state, 1, 3, 3)), 0.5)
        sincos = T.narrow(batch.box_state, 1, 6, 2)
        pat_l = predict_pattern(
            batch.features, half, sincos, pattern_params(store, "layer0.lidar"),
            "lidar", mcfg.num_lidar_scales, mcfg.num_points, 1, mcfg.max_offset_factor)
        pat_c = predict_pattern(
            batch.features, half, sincos, pattern_params(store, "layer0.camera"),
            "camera", mcfg.num_frames, mcfg.num_points, mcfg.num_cam_scales,
            mcfg.max_offset_factor)
        parts["predict_pattern"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        roi_l = sample_lidar(batch.centers_xy(), pat_l, pyramid)
        parts["sample_lidar"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        roi_c = sample_camera(batch.centers(), pat_c, feats, scene.rig)
        parts["sample_camera"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        adaptive_mix(batch.features, roi_l, mix_params(store, "layer0.lidar"))
        adaptive_mix(batch.features, roi_c, mix_params(store, "layer0.camera"))
        parts["adaptive_mix"] = time.perf_counter() - t0
        return parts

    def run_once():
        half = T.mul(T.exp(T.narrow(batch.box_state, 1, 3, 3)), 0.5)
        sincos = T.narrow(batch.box_state, 1, 6, 2)
        if kernel == "sample_lidar":
            pat = predict_pattern(
                batch.features, half, sincos, pattern_params(store, "layer0.lidar"),
                "lidar", mcfg.num_lidar_scales, mcfg.num_points, 1, mcfg.max_offset_factor)
            sample_lidar(batch.centers_xy(), pat, pyramid)
        elif kernel == "sample_camera":
            pat = predict_pattern(
                batch.features, half, sincos, pattern_params(store, "layer0.camera"),
                "camera", mcfg.num_frames, mcfg.num_points, mcfg.num_cam_scales,
                mcfg.max_offset_factor)
            sample_camera(batch.centers(), pat, feats, scene.rig)
        elif kernel == "adaptive_mix":
            pat = predict_pattern(
                batch.features, half, sincos, pattern_params(store, "layer0.lidar"),
                "lidar", mcfg.num_lidar_scales, mcfg.num_points, 1, mcfg.max_offset_factor)
            roi = sample_lidar(batch.centers_xy(), pat, pyramid)
            adaptive_mix(batch.features, roi, mix_params(store, "layer0.lidar"))

    with T.no_grad():
        samples = []
        parts_acc: dict = {}
        if kernel == "full_layer":
            for _ in range(5):  # warmup
                layer_parts()
            for _ in range(repetitions):
                t0 = time.perf_counter()
                parts = layer_parts()
                samples.append((time.perf_counter() - t0) * 1e3)
                for k, v in parts.items():
                    parts_acc[k] = parts_acc.get(k, 0.0) + v * 1e3
            parts_ms = {k: v / repetitions for k, v in parts_acc.items()}
        else:
            for _ in range(5):
                run_once()
            for _ in range(repetitions):
                t0 = time.perf_counter()
                run_once()
                samples.append((time.perf_counter() - t0) * 1e3)
            parts_ms = {}

    p50, p90, p99 = _percentiles(samples)
    qps = mcfg.num_queries / (p50 / 1e3) if p50 > 0 else float("inf")
    return BenchReport(
        kernel=kernel,
        config={
            "num_queries": mcfg.num_queries,
            "num_points": mcfg.num_points,
            "cam_scales": mcfg.num_cam_scales,
            "lidar_scales": mcfg.num_lidar_scales,
            "frames": mcfg.num_frames,
            "channels": mcfg.channels,
        },
        repetitions=repetitions,
        p50_ms=p50,
        p90_ms=p90,
        p99_ms=p99,
        queries_per_s=qps,
        parts_ms=parts_ms,
    )
