"""Toy end-to-end training (SGD with momentum) and batched inference.

One step = one scene: generate queries with the perspective oracle, decode,
match, backprop, update. All randomness is derived from (seed, step) so a
resumed run reproduces an uninterrupted one exactly.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import RunConfig
from .decoder import compute_loss, decode, match_layers
from .paqg import generate_queries
from .params import ParamStore


def _scene_order(num_scenes: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11, int(epoch)]))
    return rng.permutation(num_scenes)


def _query_rng(seed: int, salt: int, unique: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(salt), int(unique)]))


def sgd_update(store: ParamStore, velocity: dict, lr: float, momentum: float,
               clip_norm: float):
    """In-place momentum step with optional global-norm gradient clipping."""
    total_sq = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total_sq += float(np.sum(t.grad.astype(np.float64) ** 2))
    scale = 1.0
    norm = float(np.sqrt(total_sq))
    if clip_norm > 0 and norm > clip_norm:
        scale = float(clip_norm / norm)
    for name, t in store.items():
        g = t.grad
        if g is None:
            continue
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        # keep the parameter dtype; python-float scalars do not promote
        v = (momentum * v - lr * scale * g).astype(t.data.dtype, copy=False)
        velocity[name] = v
        t.data = t.data + v
    return norm


def train_loop(
    cfg: RunConfig,
    scenes: list,
    store: ParamStore,
    start_step: int = 0,
    log_fn=None,
    velocity: dict | None = None,
) -> list:
    """Run cfg.train.steps total steps (from start_step); returns the log
    records [{step, total, cls, box, unc, reg}]. ``velocity`` carries the
    momentum state across resumed runs."""
    tcfg = cfg.train
    mcfg = cfg.model
    velocity = {} if velocity is None else velocity
    records = []
    n = len(scenes)
    for step in range(start_step, tcfg.steps):
        epoch, pos = divmod(step, n)
        scene = scenes[_scene_order(n, tcfg.seed, epoch)[pos]]
        rng = _query_rng(tcfg.seed, 13, step)
        batch = generate_queries(
            scene.gt_boxes, scene.rig, scene.feature_set(mcfg), mcfg,
            cfg.sim.oracle, store["query.default_embedding"], rng,
        )
        preds = decode(
            batch, scene.feature_set(mcfg), scene.lidar_pyramid(mcfg),
            scene.rig, store, mcfg, fusion="uaf",
        )
        matching = match_layers(preds, scene.gt_boxes, tcfg, mcfg)
        loss, terms = compute_loss(preds, scene.gt_boxes, matching, tcfg, mcfg)
        store.zero_grad()
        loss.backward()
        sgd_update(store, velocity, tcfg.lr, tcfg.momentum, tcfg.clip_norm)
        rec = {"step": step, **{k: round(v, 6) for k, v in terms.items()}}
        records.append(rec)
        if log_fn is not None and (step % max(1, tcfg.log_every) == 0):
            log_fn(rec)
    return records


def run_inference(
    cfg: RunConfig,
    scenes: list,
    store: ParamStore,
    fusion: str = "uaf",
    oracle_uncertainty: bool = False,
    query_seed: int | None = None,
) -> tuple:
    """Decode every scene; returns (pred boxes per scene, GT boxes per scene).

    Query-generation noise is seeded per scene id, so evaluation is
    deterministic and independent of scene order.
    """
    mcfg = cfg.model
    seed = cfg.sim.seed if query_seed is None else query_seed
    preds_per_scene = []
    gts_per_scene = []
    with T.no_grad():
        for scene in scenes:
            rng = _query_rng(seed, 17, scene.scene_id)
            batch = generate_queries(
                scene.gt_boxes, scene.rig, scene.feature_set(mcfg), mcfg,
                cfg.sim.oracle, store["query.default_embedding"], rng,
            )
            preds = decode(
                batch, scene.feature_set(mcfg), scene.lidar_pyramid(mcfg),
                scene.rig, store, mcfg, fusion=fusion,
                oracle_gt=scene.gt_boxes if oracle_uncertainty else None,
            )
            preds_per_scene.append(preds[-1].boxes())
            gts_per_scene.append(scene.gt_boxes)
    return preds_per_scene, gts_per_scene
