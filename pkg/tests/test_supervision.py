"""Labeling, losses, optimizer mechanics, and training-loop contracts."""

import shutil

import numpy as np
import pytest

from glowmatch import numcore as nc
from glowmatch.backbone import forward_layers, init_model, init_states
from glowmatch.errors import InvalidInput
from glowmatch.numcore import Tape, Tensor
from glowmatch.supervision import (Adam, GroundTruth, TrainConfig, assignment_loss,
                                   classifier_labels, classifier_loss, clip_gradients,
                                   label_pairs, layer_head_outputs, load_checkpoint,
                                   read_ground_truth, save_checkpoint,
                                   stage1_pair_gradients, stage2_pair_gradients, train,
                                   write_ground_truth, make_train_pair)
from conftest import toy_pair


class TestLabelPairs:
    def test_identity_pairing(self, rng):
        pts = rng.uniform([0, 0], [640, 480], size=(15, 2))
        gt = label_pairs(pts, pts, np.eye(3))
        np.testing.assert_array_equal(gt.pairs, np.stack([np.arange(15)] * 2, axis=1))
        assert len(gt.unmatch_a) == 0 and len(gt.unmatch_b) == 0

    def test_far_point_unmatchable(self):
        pts_a = np.array([[100.0, 100.0], [500.0, 400.0]])
        pts_b = np.array([[100.0, 100.0]])
        gt = label_pairs(pts_a, pts_b, np.eye(3))
        np.testing.assert_array_equal(gt.pairs, [[0, 0]])
        np.testing.assert_array_equal(gt.unmatch_a, [1])

    def test_band_points_unlabeled(self):
        # 4px off: neither inlier (>3) nor unmatchable (<5)
        pts_a = np.array([[100.0, 100.0]])
        pts_b = np.array([[104.0, 100.0]])
        gt = label_pairs(pts_a, pts_b, np.eye(3))
        assert len(gt.pairs) == 0 and len(gt.unmatch_a) == 0 and len(gt.unmatch_b) == 0

    def test_singular_h_rejected(self, rng):
        pts = rng.uniform(0, 10, size=(4, 2))
        with pytest.raises(InvalidInput):
            label_pairs(pts, pts, np.diag([1.0, 1.0, 0.0]))

    def test_matches_brute_force_oracle(self):
        """Exhaustive O(MN) relabeling oracle on random 20-point instances."""
        from glowmatch.geometry import symmetric_errors
        for seed in range(20):
            r = np.random.default_rng(seed)
            h = np.eye(3)
            h[:2, 2] = r.uniform(-5, 5, size=2)
            pts_a = r.uniform([0, 0], [640, 480], size=(20, 2))
            pts_b = r.uniform([0, 0], [640, 480], size=(20, 2))
            gt = label_pairs(pts_a, pts_b, h)
            err = symmetric_errors(h, pts_a, pts_b)
            pairs = set()
            for i in range(20):
                for j in range(20):
                    if err[i, j] < 3.0 and err[i].argmin() == j and err[:, j].argmin() == i:
                        pairs.add((i, j))
            assert {tuple(p) for p in gt.pairs} == pairs
            assert set(gt.unmatch_a) == {i for i in range(20) if err[i].min() > 5.0}
            assert set(gt.unmatch_b) == {j for j in range(20) if err[:, j].min() > 5.0}

    def test_one_to_one_enforced(self):
        with pytest.raises(InvalidInput):
            GroundTruth(np.array([[0, 1], [0, 2]]), [], [], np.eye(3))
        with pytest.raises(InvalidInput):
            GroundTruth(np.array([[0, 1]]), [0], [], np.eye(3))


class TestGroundTruthFile:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        h = np.eye(3)
        h[0, 2] = 3.25
        h[2, 0] = 1.1e-4
        gt = GroundTruth(np.array([[0, 2], [3, 1]]), np.array([4, 5]), np.array([6]), h)
        path = tmp_path / "gt.txt"
        write_ground_truth(gt, path)
        back = read_ground_truth(path)
        np.testing.assert_array_equal(back.pairs, gt.pairs)
        np.testing.assert_array_equal(back.unmatch_a, gt.unmatch_a)
        np.testing.assert_array_equal(back.unmatch_b, gt.unmatch_b)
        np.testing.assert_array_equal(back.h, gt.h)

    def test_empty_sets_round_trip(self, tmp_path):
        gt = GroundTruth(np.zeros((0, 2), dtype=int), [], [], np.eye(3))
        path = tmp_path / "gt.txt"
        write_ground_truth(gt, path)
        back = read_ground_truth(path)
        assert len(back.pairs) == 0 and len(back.unmatch_a) == 0


def synthetic_assignment(m, n, pairs, sigma_a_z=None):
    log_p = Tensor(np.zeros((m, n)))
    za = Tensor(np.zeros(m) if sigma_a_z is None else sigma_a_z)
    zb = Tensor(np.zeros(n))
    return log_p, za, zb


class TestAssignmentLoss:
    def test_perfect_prediction_near_zero(self):
        gt = GroundTruth(np.array([[0, 0], [1, 1]]), np.array([2]), np.array([2]), np.eye(3))
        log_p = Tensor(np.zeros((3, 3)))  # P = 1 on every entry we index
        za = Tensor(np.array([50.0, 50.0, -50.0]))  # sigma -> 1 matched, 0 unmatchable
        zb = Tensor(np.array([50.0, 50.0, -50.0]))
        loss, per = assignment_loss([(log_p, za, zb)], gt)
        assert float(loss.data) < 1e-9

    def test_uniform_two_by_two_closed_form(self):
        """S = 0, sigma = 0.5 everywhere: every P entry is (1/2)^4."""
        from glowmatch.head import log_assignment
        gt = GroundTruth(np.array([[0, 0], [1, 1]]), [], [], np.eye(3))
        log_p = log_assignment(Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)), Tensor(np.zeros(2)))
        loss, _ = assignment_loss([(log_p, Tensor(np.zeros(2)), Tensor(np.zeros(2)))], gt)
        assert float(loss.data) == pytest.approx(4 * np.log(2), abs=1e-12)

    def test_unmatchable_terms_weighted_half(self):
        gt = GroundTruth(np.zeros((0, 2), dtype=int), np.array([0, 1]), [], np.eye(3))
        log_p, za, zb = synthetic_assignment(2, 2, None)
        loss, _ = assignment_loss([(log_p, za, zb)], gt)
        # sigma = 0.5 -> log(1 - sigma) = -log 2, halved
        assert float(loss.data) == pytest.approx(0.5 * np.log(2), abs=1e-12)

    def test_no_labels_skips_pair(self):
        gt = GroundTruth(np.zeros((0, 2), dtype=int), [], [], np.eye(3))
        loss, per = assignment_loss([synthetic_assignment(2, 2, None)], gt)
        assert loss is None and per == []

    def test_deep_supervision_averages_layers(self):
        gt = GroundTruth(np.array([[0, 0]]), [], [], np.eye(3))
        l1 = (Tensor(np.full((1, 1), -2.0)), Tensor(np.zeros(1)), Tensor(np.zeros(1)))
        l2 = (Tensor(np.full((1, 1), -4.0)), Tensor(np.zeros(1)), Tensor(np.zeros(1)))
        loss, per = assignment_loss([l1, l2], gt)
        assert per == [2.0, 4.0]
        assert float(loss.data) == pytest.approx(3.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self, tiny_model64):
        sp = toy_pair(11, n_points=8, d_in=6)
        params = tiny_model64
        tensors = params.tensor_dict()
        loss_val, grads, _ = stage1_pair_gradients(params, sp, TrainConfig(d_in=6, tau=0.1))

        names = [n for n in grads if ".cls." not in n]
        picked = {}
        r = np.random.default_rng(0)
        for n in names:
            size = tensors[n].data.size
            picked[n] = sorted(r.choice(size, size=min(3, size), replace=False).tolist())

        def f():
            state = init_states(sp.fs_a, sp.fs_b, params)
            per_layer = forward_layers(state, params)
            heads = layer_head_outputs(per_layer, params)
            loss, _ = assignment_loss(heads, sp.gt)
            return float(loss.data)

        worst = 0.0
        for n in names:
            numeric = nc.numeric_gradient(f, [tensors[n].data], indices=[picked[n]])[0]
            for idx in picked[n]:
                a = grads[n].reshape(-1)[idx]
                b = numeric.reshape(-1)[idx]
                worst = max(worst, abs(a - b) / max(abs(b), 1e-4))
        assert worst < 1e-4, f"worst relative gradient error {worst}"

    def test_loss_permutation_invariant(self, tiny_model64):
        from glowmatch.features import FeatureSet
        sp = toy_pair(13, n_points=10, d_in=6)
        params = tiny_model64

        def loss_of(sp_pair, gt):
            state = init_states(sp_pair[0], sp_pair[1], params)
            heads = layer_head_outputs(forward_layers(state, params), params)
            loss, _ = assignment_loss(heads, gt)
            return float(loss.data)

        base = loss_of((sp.fs_a, sp.fs_b), sp.gt)
        r = np.random.default_rng(5)
        perm = r.permutation(sp.fs_a.n)
        inv = np.argsort(perm)
        fs_a_p = FeatureSet(sp.fs_a.image_size, sp.fs_a.points[perm], sp.fs_a.descriptors[perm])
        gt_p = GroundTruth(np.stack([inv[sp.gt.pairs[:, 0]], sp.gt.pairs[:, 1]], axis=1),
                           inv[sp.gt.unmatch_a], sp.gt.unmatch_b, sp.gt.h)
        permuted = loss_of((fs_a_p, sp.fs_b), gt_p)
        assert abs(base - permuted) < 1e-12 * max(1.0, abs(base))


class TestClassifierLoss:
    def test_labels_from_decisions(self):
        dec_a = [np.array([1, -1, 2]), np.array([1, 0, 2]), np.array([1, 0, 2])]
        dec_b = [np.array([-1, -1]), np.array([0, -1]), np.array([0, 2])]
        labels_a, labels_b = classifier_labels(dec_a, dec_b)
        np.testing.assert_array_equal(labels_a[0], [1.0, 0.0, 1.0])
        np.testing.assert_array_equal(labels_a[1], [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(labels_b[0], [0.0, 0.0])
        np.testing.assert_array_equal(labels_b[1], [1.0, 0.0])

    def test_half_confidence_gives_log_two(self, tiny_model64):
        params = tiny_model64  # classifier weights are zero-initialized: c = 0.5
        r = np.random.default_rng(0)
        states = [(r.normal(size=(4, 8)), r.normal(size=(3, 8))) for _ in range(2)]
        labels_a = [np.ones(4), np.zeros(4)]
        labels_b = [np.ones(3), np.zeros(3)]
        loss = classifier_loss(states, labels_a, labels_b, params)
        assert float(loss.data) == pytest.approx(np.log(2), abs=1e-12)

    def test_agreeing_layers_give_bce_of_one(self, tiny_model64):
        params = tiny_model64
        for lp in params.layers[:-1]:
            lp.classifier.b.data = np.array([2.0])
        r = np.random.default_rng(0)
        states = [(r.normal(size=(4, 8)), r.normal(size=(4, 8))) for _ in range(2)]
        ones = [np.ones(4)] * 2
        loss = classifier_loss(states, ones, ones, params)
        from scipy.special import expit
        assert float(loss.data) == pytest.approx(-np.log(expit(2.0)), abs=1e-9)

    def test_stage2_gradients_only_touch_classifiers(self, tiny_model64):
        sp = toy_pair(17, n_points=8, d_in=6)
        _, grads, _ = stage2_pair_gradients(tiny_model64, sp, TrainConfig(d_in=6))
        assert grads and all(".cls." in n for n in grads)


class TestOptimizer:
    def test_clip_reduces_norm(self):
        grads = {"a": np.full(4, 10.0)}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(grads["a"]) == pytest.approx(1.0)

    def test_adam_descends_on_quadratic(self):
        p = Tensor(np.array([5.0]), requires_grad=True, name="x")
        opt = Adam(["x"])
        for _ in range(200):
            g = {"x": 2 * p.data}
            opt.step({"x": p}, g, lr=0.1)
        assert abs(float(p.data)) < 1e-2

    def test_single_step_descends_with_backtracking(self, tiny_model64):
        """One optimizer step on one pair strictly decreases the loss."""
        sp = toy_pair(19, n_points=8, d_in=6)
        cfg = TrainConfig(d_in=6)
        params = tiny_model64
        loss0, grads, _ = stage1_pair_gradients(params, sp, cfg)
        snapshot = {n: t.data.copy() for n, t in params.named_tensors()}
        names = [n for n in snapshot if ".cls." not in n]
        lr = 1e-3
        for _ in range(40):
            opt = Adam(names)
            opt.step(params.tensor_dict(), grads, lr=lr)
            loss1, _, _ = stage1_pair_gradients(params, sp, cfg)
            for n, t in params.named_tensors():
                t.data = snapshot[n].copy()
            if loss1 < loss0:
                break
            lr *= 0.5
        else:
            pytest.fail(f"no descent even at lr={lr}")


class TestTrainLoop:
    CFG = dict(seed=5, layers=2, d=8, h=2, d_in=6, n_points=12, batch=4,
               lr=2e-3, warmup_steps=2, eval_every=100, eval_pairs=2,
               checkpoint_every=100, dtype="float64", tau=0.1)

    def test_zero_steps_returns_initial_params(self, tmp_path):
        cfg = TrainConfig(train_pairs=0, stage2_pairs=0, **self.CFG)
        result = train(cfg, tmp_path / "run")
        fresh = init_model(np.random.default_rng(cfg.seed), 2, 8, 2, 6, dtype=np.float64)
        for (_, a), (_, b) in zip(result.params.named_tensors(), fresh.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_stage2_leaves_backbone_bits_unchanged(self, tmp_path):
        cfg = TrainConfig(train_pairs=0, stage2_pairs=8, **self.CFG)
        result = train(cfg, tmp_path / "run")
        fresh = init_model(np.random.default_rng(cfg.seed), 2, 8, 2, 6, dtype=np.float64)
        changed = []
        for (name, a), (_, b) in zip(result.params.named_tensors(), fresh.named_tensors()):
            if not np.array_equal(a.data, b.data):
                changed.append(name)
        assert changed and all(".cls." in n for n in changed)

    def test_training_is_deterministic(self, tmp_path):
        cfg = TrainConfig(train_pairs=8, stage2_pairs=4, **self.CFG)
        r1 = train(cfg, tmp_path / "a")
        r2 = train(cfg, tmp_path / "b")
        for (_, a), (_, b) in zip(r1.params.named_tensors(), r2.params.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_resume_equals_uninterrupted_bit_exact(self, tmp_path):
        cfg = TrainConfig(train_pairs=16, stage2_pairs=4, **{**self.CFG, "checkpoint_every": 2})
        full = train(cfg, tmp_path / "full")

        captured = tmp_path / "snapshot.glwt"

        def capture(row):
            if row["stage"] == 1 and row["step"] == 2 and not captured.exists():
                shutil.copy(tmp_path / "part" / "checkpoint.glwt", captured)

        cfg_half = TrainConfig(train_pairs=16, stage2_pairs=4,
                               **{**self.CFG, "checkpoint_every": 2, "eval_every": 2})
        train(cfg_half, tmp_path / "part", progress=capture)
        assert captured.exists()
        resumed = train(cfg, tmp_path / "resumed", resume=str(captured))
        for (n, a), (_, b) in zip(full.params.named_tensors(), resumed.params.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=n)

    def test_checkpoint_round_trip(self, tmp_path):
        params = init_model(np.random.default_rng(3), 2, 8, 2, 6, dtype=np.float64)
        opt = Adam([n for n, _ in params.named_tensors()])
        opt.ensure_state(params.tensor_dict())
        opt.t = 7
        path = tmp_path / "ck.glwt"
        save_checkpoint(params, opt, stage=1, step=13, path=path)
        back, state, stage, step = load_checkpoint(path)
        assert (stage, step, state["t"]) == (1, 13, 7)
        for (_, a), (_, b) in zip(params.named_tensors(), back.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_checkpoint_readable_as_plain_weights(self, tmp_path):
        from glowmatch.backbone import load_model
        params = init_model(np.random.default_rng(3), 2, 8, 2, 6, dtype=np.float64)
        opt = Adam([n for n, _ in params.named_tensors()])
        path = tmp_path / "ck.glwt"
        save_checkpoint(params, opt, stage=2, step=1, path=path)
        plain = load_model(path)
        np.testing.assert_array_equal(plain.basis.data, params.basis.data)

    def test_metrics_csv_written(self, tmp_path):
        cfg = TrainConfig(train_pairs=8, stage2_pairs=4, **{**self.CFG, "eval_every": 1})
        result = train(cfg, tmp_path / "run")
        lines = open(result.metrics_path).read().strip().splitlines()
        assert lines[0] == "epoch,stage,loss,precision,recall,mean_exit_layer"
        assert len(lines) >= 3

    def test_make_train_pair_samples_difficulty(self):
        cfg = TrainConfig(**self.CFG)
        metas = [make_train_pair(cfg, 0, i).meta for i in range(5)]
        ratios = {round(m["inlier_ratio"], 6) for m in metas}
        assert len(ratios) > 1
