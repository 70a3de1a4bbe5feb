"""The L-stage refinement loop: sampling, mixing, uncertainty-weighted fusion,
box/class heads, bipartite matching and set-prediction losses.

Per layer: predict sampling patterns from the query features, gather RoI
features from both modalities, mix them, fuse with (1-u) weighting, then
classify and refine the boxes residually. Refined boxes feed the next
layer's sampling centers (detached, as in iterative-refinement decoders);
query features chain through all layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from . import tensor as T
from . import uaf
from .config import ModelSection, TrainSection
from .featuremaps import CameraFeatureSet, LidarFeaturePyramid
from .geometry import CameraRig, DetectionRange
from .params import ParamStore
from .queries import QueryBatch, boxes_to_state, state_to_boxes
from .rias import adaptive_mix, mix_params, pattern_params, predict_pattern, sample_camera, sample_lidar


@dataclass
class LayerPrediction:
    """Per-layer decoder outputs for all queries (graph tensors kept for loss)."""

    class_logits: T.Tensor  # (N, n_cls)
    box_state: T.Tensor  # (N, 10), after this layer's refinement
    u_cam: np.ndarray  # (N,) uncertainties actually used in fusion
    u_lid: np.ndarray
    dist_cam: T.Tensor  # (N,) f_dist outputs
    dist_lid: T.Tensor
    reg_cam: T.Tensor  # (N, 2) f_reg BEV position estimates
    reg_lid: T.Tensor
    centers_in: np.ndarray  # (N, 3) sampling centers used by this layer

    def scores(self) -> np.ndarray:
        return expit(self.class_logits.data)

    def boxes(self) -> list:
        scores = self.scores()
        cls = scores.argmax(axis=1)
        best = scores[np.arange(len(cls)), cls]
        return state_to_boxes(self.box_state.data, scores=best, class_ids=cls)


def refine_box(features: T.Tensor, state: T.Tensor, store: ParamStore, prefix: str,
               cfg: ModelSection) -> T.Tensor:
    """Residual box update from the fused query feature.

    Center moves by head output times ``center_step`` of the range extent,
    sizes update in log space, yaw via an additive (sin, cos) pair that is
    renormalized, velocity additively.
    """
    h = T.relu(T.linear(features, store[f"{prefix}.refine.w1"], store[f"{prefix}.refine.b1"]))
    resid = T.linear(h, store[f"{prefix}.refine.w2"], store[f"{prefix}.refine.b2"])

    extent = cfg.detection_range().extent
    center_scale = (extent * cfg.center_step)
    center = T.add(T.narrow(state, 1, 0, 3), T.mul(T.narrow(resid, 1, 0, 3), center_scale))
    log_size = T.add(T.narrow(state, 1, 3, 3), T.narrow(resid, 1, 3, 3))
    s = T.add(T.narrow(state, 1, 6, 1), T.narrow(resid, 1, 6, 1))
    c = T.add(T.narrow(state, 1, 7, 1), T.narrow(resid, 1, 7, 1))
    norm = T.sqrt(T.add(T.add(T.mul(s, s), T.mul(c, c)), 1e-12))
    s = T.div(s, norm)
    c = T.div(c, norm)
    vel = T.add(T.narrow(state, 1, 8, 2), T.mul(T.narrow(resid, 1, 8, 2), cfg.velocity_step))
    return T.concat([center, log_size, s, c, vel], axis=1)


def _nearest_gt_xy(centers_xy: np.ndarray, gt_boxes: list) -> np.ndarray:
    """Per query, the BEV center of the nearest GT box (inf-distance filler
    when the scene has no ground truth)."""
    if not gt_boxes:
        return np.full((centers_xy.shape[0], 2), 1e6)
    gt_xy = np.stack([b.center[:2] for b in gt_boxes])
    d = np.linalg.norm(centers_xy[:, None, :] - gt_xy[None, :, :], axis=2)
    return gt_xy[d.argmin(axis=1)]


def decode(
    batch: QueryBatch,
    cam_feats: CameraFeatureSet,
    lidar_feats: LidarFeaturePyramid,
    rig: CameraRig,
    store: ParamStore,
    cfg: ModelSection,
    fusion: str = "uaf",
    oracle_gt: list | None = None,
) -> list:
    """Run all decoder layers; returns one LayerPrediction per layer.

    ``fusion`` selects Eq.-style adaptive weighting ("uaf") or fixed equal
    weights ("equal"). With ``oracle_gt`` set, uncertainties come from the
    auxiliary regressor against the nearest ground-truth box instead of the
    distance predictor (oracle-uncertainty mode).
    """
    if fusion not in ("uaf", "equal"):
        raise ValueError("fusion must be 'uaf' or 'equal'")
    qf = batch.features
    state = batch.box_state
    preds = []
    for layer in range(cfg.num_layers):
        half = T.mul(T.exp(T.narrow(state, 1, 3, 3)), 0.5)
        sincos = T.narrow(state, 1, 6, 2)
        centers3 = T.narrow(state, 1, 0, 3)
        centers_xy = T.narrow(state, 1, 0, 2)

        pat_lid = predict_pattern(
            qf, half, sincos, pattern_params(store, f"layer{layer}.lidar"),
            "lidar", cfg.num_lidar_scales, cfg.num_points, 1, cfg.max_offset_factor,
        )
        roi_lid = sample_lidar(centers_xy, pat_lid, lidar_feats)
        mix_lid = adaptive_mix(qf, roi_lid, mix_params(store, f"layer{layer}.lidar"))

        pat_cam = predict_pattern(
            qf, half, sincos, pattern_params(store, f"layer{layer}.camera"),
            "camera", cfg.num_frames, cfg.num_points, cfg.num_cam_scales,
            cfg.max_offset_factor,
        )
        roi_cam = sample_camera(centers3, pat_cam, cam_feats, rig)
        mix_cam = adaptive_mix(qf, roi_cam, mix_params(store, f"layer{layer}.camera"))

        dp_cam = uaf.distance_params(store, f"layer{layer}.camera.dist")
        dp_lid = uaf.distance_params(store, f"layer{layer}.lidar.dist")
        rp_cam = uaf.distance_params(store, f"layer{layer}.camera.reg")
        rp_lid = uaf.distance_params(store, f"layer{layer}.lidar.reg")

        dist_cam = uaf.predict_distance(uaf.pool_roi(roi_cam), dp_cam)
        dist_lid = uaf.predict_distance(uaf.pool_roi(roi_lid), dp_lid)
        reg_cam = uaf.regress_xy(roi_cam, rp_cam, centers_xy)
        reg_lid = uaf.regress_xy(roi_lid, rp_lid, centers_xy)

        if fusion == "equal":
            u_cam_in = np.full(batch.count, 0.5)
            u_lid_in = np.full(batch.count, 0.5)
        elif oracle_gt is not None:
            gt_xy = _nearest_gt_xy(centers_xy.data, oracle_gt)
            u_cam_in = uaf.uncertainty_from_distance(
                uaf.oracle_distance_xy(reg_cam.data, gt_xy))
            u_lid_in = uaf.uncertainty_from_distance(
                uaf.oracle_distance_xy(reg_lid.data, gt_xy))
        else:
            u_cam_in = uaf.uncertainty_from_distance(dist_cam)
            u_lid_in = uaf.uncertainty_from_distance(dist_lid)

        fused = uaf.fuse(mix_cam, u_cam_in, mix_lid, u_lid_in,
                         uaf.fuse_params(store, f"layer{layer}"))
        # bound the refined query feature before the heads and the next layer
        fused = T.layer_norm(fused, store[f"layer{layer}.fuse.ln_gain"],
                             store[f"layer{layer}.fuse.ln_shift"])

        logits = T.linear(fused, store[f"layer{layer}.cls.w"], store[f"layer{layer}.cls.b"])
        new_state = refine_box(fused, state, store, f"layer{layer}", cfg)

        preds.append(
            LayerPrediction(
                class_logits=logits,
                box_state=new_state,
                u_cam=np.asarray(u_cam_in.data if isinstance(u_cam_in, T.Tensor) else u_cam_in),
                u_lid=np.asarray(u_lid_in.data if isinstance(u_lid_in, T.Tensor) else u_lid_in),
                dist_cam=dist_cam,
                dist_lid=dist_lid,
                reg_cam=reg_cam,
                reg_lid=reg_lid,
                centers_in=centers3.data.copy(),
            )
        )
        qf = fused
        state = T.Tensor(new_state.data.copy())  # detach across layers
    return preds


# ---------------------------------------------------------------------------
# matching and losses
# ---------------------------------------------------------------------------


def _state_scale(det_range: DetectionRange) -> np.ndarray:
    """Per-dimension normalization for box-parameter L1 terms."""
    ext = det_range.extent
    return np.array(
        [2.0 / ext[0], 2.0 / ext[1], 2.0 / ext[2], 1.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.2]
    )


def hungarian_match(
    pred_state: np.ndarray,
    pred_scores: np.ndarray,
    gt_boxes: list,
    cfg: TrainSection,
    det_range: DetectionRange,
) -> list:
    """Minimum-cost perfect matching on the no-object-padded bipartite graph.

    Both sides carry a no-object option at constant cost: an unmatched
    prediction or an unmatched GT each pay ``no_object_cost``, so a pair is
    only matched when its cost beats leaving both unmatched (2x no-object).
    Returns (pred_index, gt_index) pairs.
    """
    n_pred = pred_state.shape[0]
    n_gt = len(gt_boxes)
    if n_gt == 0 or n_pred == 0:
        return []
    gt_state = boxes_to_state(gt_boxes)
    scale = _state_scale(det_range)
    diff = np.abs(pred_state[:, None, :] - gt_state[None, :, :]) * scale
    cost_box = diff.sum(axis=2)
    gt_cls = np.array([b.class_id for b in gt_boxes])
    cost_cls = 1.0 - pred_scores[:, gt_cls]
    cost = cfg.w_cls * cost_cls + cfg.w_box * cost_box

    side = n_pred + n_gt
    padded = np.zeros((side, side))
    padded[:n_pred, :n_gt] = cost
    padded[:n_pred, n_gt:] = cfg.no_object_cost  # prediction stays unmatched
    padded[n_pred:, :n_gt] = cfg.no_object_cost  # ground truth goes undetected
    rows, cols = linear_sum_assignment(padded)
    return [
        (int(r), int(c)) for r, c in zip(rows, cols) if r < n_pred and c < n_gt
    ]


def _pow_gamma(x: T.Tensor, gamma: float) -> T.Tensor:
    if gamma == 2.0:
        return T.mul(x, x)
    if gamma == 1.0:
        return x
    return T.exp(T.mul(T.log(T.clamp_min(x, 1e-12)), gamma))


def focal_loss(logits: T.Tensor, targets: np.ndarray, alpha: float, gamma: float,
               normalizer: float) -> T.Tensor:
    """Sigmoid focal loss; -log terms use softplus for stability."""
    p = T.sigmoid(logits)
    pos = T.mul(T.mul(_pow_gamma(T.sub(1.0, p), gamma), T.softplus(T.neg(logits))), alpha)
    negt = T.mul(T.mul(_pow_gamma(p, gamma), T.softplus(logits)), 1.0 - alpha)
    mask = np.asarray(targets, dtype=logits.data.dtype)
    total = T.add(T.mul(pos, mask), T.mul(negt, 1.0 - mask))
    return T.div(T.sum_(total), normalizer)


def match_layers(
    preds: list,
    gt_boxes: list,
    train_cfg: TrainSection,
    model_cfg: ModelSection,
) -> list:
    """Hungarian matching per decoder layer (on detached predictions)."""
    det_range = model_cfg.detection_range()
    return [
        hungarian_match(p.box_state.data, p.scores(), gt_boxes, train_cfg, det_range)
        for p in preds
    ]


def oracle_distance_targets(preds: list, matching: list, gt_boxes: list,
                            cap: float = 5.0) -> list:
    """Detached per-layer BEV distance targets for the distance predictors:
    how far each modality's position estimate actually is from its matched
    GT. Targets saturate at ``cap`` meters (the uncertainty mapping is flat
    out there anyway)."""
    out = []
    for pred, matches in zip(preds, matching):
        if not matches:
            out.append(None)
            continue
        p_idx = [pi for pi, _ in matches]
        gt_xy = np.stack([gt_boxes[gi].center[:2] for _, gi in matches])
        out.append(
            {
                "cam": np.minimum(
                    np.linalg.norm(pred.reg_cam.data[p_idx] - gt_xy, axis=1), cap),
                "lid": np.minimum(
                    np.linalg.norm(pred.reg_lid.data[p_idx] - gt_xy, axis=1), cap),
            }
        )
    return out


def compute_loss(
    preds: list,
    gt_boxes: list,
    matching: list,
    train_cfg: TrainSection,
    model_cfg: ModelSection,
    unc_targets: list | None = None,
) -> tuple:
    """Deep-supervised set-prediction loss over all decoder layers.

    Classification is sigmoid focal; matched boxes get a range-normalized
    L1; the distance predictors regress the (detached) oracle BEV distance
    of their modality's position estimate, and the position estimates
    themselves get an L1 pull toward the matched GT centers. ``matching``
    comes from :func:`match_layers`; ``unc_targets`` may be passed to freeze
    the detached distance targets (otherwise computed here).
    """
    det_range = model_cfg.detection_range()
    scale = _state_scale(det_range)
    n_cls = model_cfg.num_classes
    if unc_targets is None:
        unc_targets = oracle_distance_targets(preds, matching, gt_boxes,
                                              cap=train_cfg.dist_cap)
    total = None
    breakdown = {"cls": 0.0, "box": 0.0, "unc": 0.0, "reg": 0.0}
    gt_state_all = boxes_to_state(gt_boxes) if gt_boxes else None

    for pred, matches, d_targets in zip(preds, matching, unc_targets):
        n = pred.class_logits.shape[0]
        n_match = len(matches)
        targets = np.zeros((n, n_cls))
        for pi, gi in matches:
            targets[pi, gt_boxes[gi].class_id] = 1.0
        norm = float(max(1, n_match))
        layer_loss = T.mul(
            focal_loss(pred.class_logits, targets, train_cfg.focal_alpha,
                       train_cfg.focal_gamma, norm),
            train_cfg.w_cls,
        )
        breakdown["cls"] += layer_loss.item()

        if n_match > 0:
            p_idx = [pi for pi, _ in matches]
            g_idx = [gi for _, gi in matches]
            tgt = gt_state_all[g_idx]
            rows = T.gather_rows(pred.box_state, p_idx)
            diff = T.mul(T.absolute(T.sub(rows, tgt)), scale)
            box_term = T.mul(T.mean(diff), train_cfg.w_box)
            breakdown["box"] += box_term.item()
            layer_loss = T.add(layer_loss, box_term)

            gt_xy = tgt[:, 0:2]
            unc_term = None
            reg_term = None
            for modality, dist, reg in (
                ("cam", pred.dist_cam, pred.reg_cam),
                ("lid", pred.dist_lid, pred.reg_lid),
            ):
                d_hat = T.gather_rows(dist, p_idx)
                u_t = T.mean(T.absolute(T.sub(d_hat, d_targets[modality])))
                unc_term = u_t if unc_term is None else T.add(unc_term, u_t)
                r_t = T.mean(T.absolute(T.sub(T.gather_rows(reg, p_idx), gt_xy)))
                reg_term = r_t if reg_term is None else T.add(reg_term, r_t)
            unc_term = T.mul(unc_term, train_cfg.w_unc)
            reg_term = T.mul(reg_term, train_cfg.w_reg)
            breakdown["unc"] += unc_term.item()
            breakdown["reg"] += reg_term.item()
            layer_loss = T.add(T.add(layer_loss, unc_term), reg_term)

        total = layer_loss if total is None else T.add(total, layer_loss)
    breakdown["total"] = total.item()
    return total, breakdown
