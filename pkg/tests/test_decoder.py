"""Decoder loop, box refinement, matching, and loss properties."""

import itertools
import math

import numpy as np
import pytest

from fusiondet import tensor as T
from fusiondet.config import ModelSection, OracleSection, SimSection, TrainSection
from fusiondet.decoder import (
    compute_loss,
    decode,
    hungarian_match,
    match_layers,
    refine_box,
    _state_scale,
)
from fusiondet.geometry import Box3D
from fusiondet.paqg import generate_queries
from fusiondet.params import init_model_params
from fusiondet.queries import QueryBatch, boxes_to_state, state_to_boxes
from fusiondet.scenesim import generate_scene


def _setup(seed=0, **model_kw):
    model_kw.setdefault("precision", "double")
    model = ModelSection(num_queries=16, num_top=6, num_random=10,
                         num_layers=2, **model_kw)
    model.validate()
    sim = SimSection(seed=seed)
    scene = generate_scene(model, sim, 0)
    store = init_model_params(model, seed=seed)
    return scene, model, sim, store


def _noiseless():
    return OracleSection(pixel_sigma=0.0, depth_sigma=0.0, size_sigma=0.0,
                         yaw_sigma=0.0, vel_sigma=0.0, miss_rate=0.0, fp_rate=0.0)


def _run(scene, model, sim, store, oracle=None, rng_seed=0, **decode_kw):
    oracle = oracle or _noiseless()
    batch = generate_queries(scene.gt_boxes, scene.rig, scene.feature_set(model),
                             model, oracle, store["query.default_embedding"],
                             np.random.default_rng(rng_seed))
    preds = decode(batch, scene.feature_set(model), scene.lidar_pyramid(model),
                   scene.rig, store, model, **decode_kw)
    return batch, preds


class TestDecode:
    def test_zero_init_heads_identity_refinement(self):
        scene, model, sim, store = _setup()
        batch, preds = _run(scene, model, sim, store)
        for layer in preds:
            np.testing.assert_allclose(
                layer.box_state.data, batch.box_state.data, atol=1e-9
            )

    def test_one_layer_equals_manual_composition(self):
        scene, model, sim, store = _setup()
        _, preds2 = _run(scene, model, sim, store)
        model1 = ModelSection(**{**model.__dict__, "num_layers": 1})
        _, preds1 = _run(scene, model1, sim, store)
        np.testing.assert_array_equal(
            preds1[0].class_logits.data, preds2[0].class_logits.data
        )
        np.testing.assert_array_equal(preds1[0].box_state.data, preds2[0].box_state.data)

    def test_noiseless_oracle_covers_gt_exactly(self):
        scene, model, sim, store = _setup()
        _, preds = _run(scene, model, sim, store)
        final = preds[-1].boxes()
        for gt in scene.gt_boxes:
            errs = [np.linalg.norm(b.center - gt.center) for b in final]
            assert min(errs) < 1e-9
            nearest = final[int(np.argmin(errs))]
            dyaw = abs(nearest.yaw - gt.yaw) % (2 * math.pi)
            assert min(dyaw, 2 * math.pi - dyaw) < 1e-9

    def test_bit_identical_across_runs(self):
        scene, model, sim, store = _setup()
        _, a = _run(scene, model, sim, store, rng_seed=5)
        _, b = _run(scene, model, sim, store, rng_seed=5)
        assert a[-1].box_state.data.tobytes() == b[-1].box_state.data.tobytes()
        assert a[-1].class_logits.data.tobytes() == b[-1].class_logits.data.tobytes()

    def test_fusion_mode_validation(self):
        scene, model, sim, store = _setup()
        with pytest.raises(ValueError):
            _run(scene, model, sim, store, fusion="bogus")

    def test_equal_fusion_and_oracle_modes_run(self):
        scene, model, sim, store = _setup()
        _, eq = _run(scene, model, sim, store, fusion="equal")
        assert np.all(eq[0].u_cam == 0.5) and np.all(eq[0].u_lid == 0.5)
        _, orc = _run(scene, model, sim, store, oracle_gt=scene.gt_boxes)
        assert np.all((orc[0].u_lid >= 0) & (orc[0].u_lid < 1))


class TestRefineBox:
    def test_zero_head_output_keeps_box(self):
        scene, model, sim, store = _setup()
        rng = np.random.default_rng(0)
        qf = T.Tensor(rng.normal(size=(3, model.channels)), dtype=np.float64)
        boxes = [Box3D(rng.uniform(-5, 5, 3), rng.uniform(0.5, 3, 3),
                       rng.uniform(-3, 3), rng.normal(0, 1, 2)) for _ in range(3)]
        state = T.Tensor(boxes_to_state(boxes), dtype=np.float64)
        out = refine_box(qf, state, store, "layer0", model)
        np.testing.assert_allclose(out.data, state.data, atol=1e-9)

    def test_log_size_residual_doubles_length(self):
        scene, model, sim, store = _setup()
        # craft a head that outputs ln2 on the length channel only
        store["layer0.refine.w1"].data *= 0.0
        store["layer0.refine.b1"].data = np.ones(model.channels)
        w2 = np.zeros((model.channels, 10))
        w2[0, 3] = math.log(2.0) / model.channels
        store["layer0.refine.w2"].data = w2 * 0.0
        store["layer0.refine.b2"].data = np.eye(1, 10, 3)[0] * math.log(2.0)
        box = Box3D([1.0, 2.0, 0.5], [2.0, 1.0, 1.5], 0.3, [0.0, 0.0])
        state = T.Tensor(boxes_to_state([box]), dtype=np.float64)
        qf = T.Tensor(np.zeros((1, model.channels)), dtype=np.float64)
        out = state_to_boxes(refine_box(qf, state, store, "layer0", model).data)
        np.testing.assert_allclose(out[0].size, [4.0, 1.0, 1.5], atol=1e-12)
        np.testing.assert_allclose(out[0].center, box.center, atol=1e-12)


class TestHungarian:
    CFG = TrainSection()

    def _match(self, preds, scores, gts, model):
        return hungarian_match(preds, scores, gts, self.CFG, model.detection_range())

    def test_single_exact_match(self):
        model = ModelSection()
        gt = Box3D([5.0, 5.0, 0.5], [4, 2, 1.5], 0.2, [1.0, 0.0], class_id=1)
        state = boxes_to_state([gt])
        scores = np.array([[0.1, 0.9, 0.1]])
        assert self._match(state, scores, [gt], model) == [(0, 0)]

    def test_nearer_prediction_wins(self):
        model = ModelSection()
        gt = Box3D([0.0, 0.0, 0.5], [4, 2, 1.5], 0.0, [0.0, 0.0], class_id=0)
        near = Box3D([0.5, 0.0, 0.5], [4, 2, 1.5], 0.0, [0.0, 0.0])
        far = Box3D([10.0, 0.0, 0.5], [4, 2, 1.5], 0.0, [0.0, 0.0])
        state = boxes_to_state([far, near])
        scores = np.full((2, 3), 0.5)
        assert self._match(state, scores, [gt], model) == [(1, 0)]

    def test_matches_brute_force_assignment_cost(self):
        # exhaustive oracle over all partial matchings, with each unmatched
        # prediction/GT paying the no-object cost
        model = ModelSection()
        rng = np.random.default_rng(0)
        tcfg = self.CFG
        scale = _state_scale(model.detection_range())
        for trial in range(20):
            n_pred, n_gt = 8, 5
            gts = [
                Box3D(rng.uniform(-20, 20, 3), rng.uniform(0.5, 4, 3),
                      rng.uniform(-3, 3), rng.normal(0, 2, 2),
                      class_id=int(rng.integers(0, 3)))
                for _ in range(n_gt)
            ]
            pred_state = boxes_to_state(
                [Box3D(rng.uniform(-20, 20, 3), rng.uniform(0.5, 4, 3),
                       rng.uniform(-3, 3), rng.normal(0, 2, 2)) for _ in range(n_pred)]
            )
            scores = rng.uniform(0, 1, size=(n_pred, 3))
            gt_state = boxes_to_state(gts)
            gt_cls = [g.class_id for g in gts]

            def pair_cost(pi, gi):
                box = np.sum(np.abs(pred_state[pi] - gt_state[gi]) * scale)
                return tcfg.w_cls * (1 - scores[pi, gt_cls[gi]]) + tcfg.w_box * box

            def total_cost(pairs):
                unmatched = (n_pred - len(pairs)) + (n_gt - len(pairs))
                return (sum(pair_cost(pi, gi) for pi, gi in pairs)
                        + tcfg.no_object_cost * unmatched)

            best = math.inf
            for k in range(0, n_gt + 1):
                for gsub in itertools.combinations(range(n_gt), k):
                    for psub in itertools.permutations(range(n_pred), k):
                        best = min(best, total_cost(list(zip(psub, gsub))))
            got = self._match(pred_state, scores, gts, model)
            assert total_cost(got) == pytest.approx(best, abs=1e-9)

    def test_empty_gt(self):
        model = ModelSection()
        state = boxes_to_state([Box3D([0, 0, 0], [1, 1, 1], 0.0)])
        assert self._match(state, np.ones((1, 3)), [], model) == []


class TestComputeLoss:
    def test_perfect_predictions_zero_box_terms(self):
        scene, model, sim, store = _setup()
        _, preds = _run(scene, model, sim, store)
        matching = match_layers(preds, scene.gt_boxes, TrainSection(), model)
        # noiseless queries sit exactly on GT; box L1 and reg terms vanish
        loss, terms = compute_loss(preds, scene.gt_boxes, matching, TrainSection(), model)
        assert terms["box"] == pytest.approx(0.0, abs=1e-8)
        assert np.isfinite(terms["total"])

    def test_empty_gt_only_classification(self):
        scene, model, sim, store = _setup()
        batch, _ = _run(scene, model, sim, store)
        # re-decode against an empty GT list
        preds = decode(batch, scene.feature_set(model), scene.lidar_pyramid(model),
                       scene.rig, store, model)
        matching = match_layers(preds, [], TrainSection(), model)
        loss, terms = compute_loss(preds, [], matching, TrainSection(), model)
        assert terms["box"] == 0.0 and terms["unc"] == 0.0 and terms["reg"] == 0.0
        assert terms["cls"] > 0.0

    def test_gt_order_invariance(self):
        scene, model, sim, store = _setup(seed=3)
        oracle = OracleSection(pixel_sigma=2.0, fp_rate=1.0)
        batch, preds = _run(scene, model, sim, store, oracle=oracle)
        tcfg = TrainSection()
        m1 = match_layers(preds, scene.gt_boxes, tcfg, model)
        l1, _ = compute_loss(preds, scene.gt_boxes, m1, tcfg, model)
        rev = scene.gt_boxes[::-1]
        m2 = match_layers(preds, rev, tcfg, model)
        l2, _ = compute_loss(preds, rev, m2, tcfg, model)
        assert l1.item() == pytest.approx(l2.item(), rel=1e-12)

    def test_query_order_invariance(self):
        scene, model, sim, store = _setup(seed=4)
        oracle = OracleSection(pixel_sigma=2.0, fp_rate=1.0)
        batch, _ = _run(scene, model, sim, store, oracle=oracle)
        tcfg = TrainSection()

        def loss_for(batch):
            preds = decode(batch, scene.feature_set(model),
                           scene.lidar_pyramid(model), scene.rig, store, model)
            matching = match_layers(preds, scene.gt_boxes, tcfg, model)
            return compute_loss(preds, scene.gt_boxes, matching, tcfg, model)[0].item()

        perm = np.random.default_rng(0).permutation(batch.count)
        shuffled = QueryBatch(
            T.Tensor(batch.features.data[perm].copy()),
            T.Tensor(batch.box_state.data[perm].copy()),
        )
        assert loss_for(batch) == pytest.approx(loss_for(shuffled), rel=1e-9)
