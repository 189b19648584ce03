import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomyssl.config import resolve_config
from anatomyssl.evaluation import (FoldPlan, StratificationError,
                                   boundary_points, confusion_metrics,
                                   encode_features, hausdorff_distance,
                                   linear_probe, make_folds, seg_head_eval,
                                   segmentation_metrics, train_seg_head,
                                   _coarse_maps, _foreground_targets,
                                   predict_foreground)
from anatomyssl.nets import MultiScaleBackbone
from anatomyssl.config import BackboneConfig


def mask_from_pixels(shape, pixels):
    m = np.zeros(shape, dtype=bool)
    for r, c in pixels:
        m[r, c] = True
    return m


class TestConfusionMetrics:
    def test_perfect_match(self):
        m = mask_from_pixels((8, 8), [(1, 1), (2, 2), (3, 3)])
        got = confusion_metrics(m, m)
        assert got.dice == got.ppv == got.sensitivity == 1.0

    def test_disjoint_masks(self):
        a = mask_from_pixels((8, 8), [(0, 0)])
        b = mask_from_pixels((8, 8), [(7, 7)])
        got = confusion_metrics(a, b)
        assert got.dice == got.ppv == got.sensitivity == 0.0

    def test_half_overlap_example(self):
        pred = mask_from_pixels((8, 8), [(0, 0), (0, 1)])
        gt = mask_from_pixels((8, 8), [(0, 1), (0, 2)])
        got = confusion_metrics(pred, gt)
        assert got.dice == 0.5 and got.ppv == 0.5 and got.sensitivity == 0.5

    def test_both_empty_convention(self):
        z = np.zeros((4, 4), dtype=bool)
        got = confusion_metrics(z, z)
        assert got.dice == got.ppv == got.sensitivity == 1.0

    def test_empty_gt_nonempty_pred(self):
        pred = mask_from_pixels((4, 4), [(0, 0)])
        gt = np.zeros((4, 4), dtype=bool)
        got = confusion_metrics(pred, gt)
        assert got.sensitivity == 0.0 and got.undefined_sensitivity
        assert got.dice == 0.0 and got.ppv == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion_metrics(np.zeros((2, 2), bool), np.zeros((3, 3), bool))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=50)
    def test_harmonic_identity(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0, 1, (16, 16)) > 0.6
        gt = rng.uniform(0, 1, (16, 16)) > 0.6
        got = confusion_metrics(pred, gt)
        if got.ppv + got.sensitivity > 0:
            harmonic = 2 * got.ppv * got.sensitivity / (got.ppv + got.sensitivity)
            assert math.isclose(got.dice, harmonic, rel_tol=1e-9, abs_tol=1e-12)


class TestHausdorff:
    def test_identical_zero(self):
        m = mask_from_pixels((8, 8), [(2, 2), (2, 3), (3, 2)])
        d, flag = hausdorff_distance(m, m)
        assert d == 0.0 and not flag

    def test_single_pixels_euclidean(self):
        a = mask_from_pixels((8, 8), [(0, 0)])
        b = mask_from_pixels((8, 8), [(3, 4)])
        d, _ = hausdorff_distance(a, b)
        assert d == 5.0

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30)
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0, 1, (12, 12)) > 0.6
        b = rng.uniform(0, 1, (12, 12)) > 0.6
        assert hausdorff_distance(a, b) == hausdorff_distance(b, a)

    def test_empty_mask_sentinel(self):
        a = np.zeros((6, 8), dtype=bool)
        b = mask_from_pixels((6, 8), [(1, 1)])
        d, flag = hausdorff_distance(a, b)
        assert flag and d == pytest.approx(math.hypot(6, 8))

    def test_both_empty(self):
        z = np.zeros((4, 4), dtype=bool)
        d, flag = hausdorff_distance(z, z)
        assert d == 0.0 and not flag

    def test_boundary_excludes_interior(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:6, 2:6] = True
        pts = {tuple(p) for p in boundary_points(m)}
        assert (3, 3) not in pts
        assert (2, 2) in pts and (5, 5) in pts

    def test_border_pixel_counts_as_boundary(self):
        m = np.ones((4, 4), dtype=bool)
        pts = {tuple(p) for p in boundary_points(m)}
        assert (0, 0) in pts and (1, 1) not in pts


class TestFolds:
    def test_partition_and_sizes(self):
        plan = make_folds(500, 5, seed=0)
        all_test = np.concatenate([t for _, t in plan.folds])
        assert sorted(all_test.tolist()) == list(range(500))
        assert all(len(t) == 100 for _, t in plan.folds)

    def test_uneven_sizes_differ_by_one(self):
        plan = make_folds(23, 5, seed=1)
        sizes = [len(t) for _, t in plan.folds]
        assert max(sizes) - min(sizes) <= 1
        assert sum(sizes) == 23

    def test_train_test_disjoint(self):
        plan = make_folds(40, 4, seed=2)
        for train, test in plan.folds:
            assert not set(train.tolist()) & set(test.tolist())

    def test_deterministic(self):
        a = make_folds(50, 5, seed=3)
        b = make_folds(50, 5, seed=3)
        for (tr1, te1), (tr2, te2) in zip(a.folds, b.folds):
            assert np.array_equal(tr1, tr2) and np.array_equal(te1, te2)

    def test_invalid_folds(self):
        with pytest.raises(ValueError):
            make_folds(3, 5)


def tiny_encoder(seed=0):
    torch.manual_seed(seed)
    return MultiScaleBackbone(BackboneConfig(
        in_size=96, stage_channels=(8, 12, 16, 24), fpn_channels=8, scales=4))


class TestLinearProbe:
    def test_feature_dimensions(self, small_corpus):
        enc = tiny_encoder()
        feats = encode_features(enc, small_corpus[:6])
        assert feats.shape == (6, 4 * 8)

    def test_shuffled_labels_chance_level(self, small_corpus):
        rng = np.random.default_rng(0)
        shuffled = [type(s)(image=s.image, masks=s.masks,
                            class_id=int(rng.integers(0, 3)), seed=s.seed)
                    for s in small_corpus]
        # re-balance: force equal counts so folds keep all classes
        for i, s in enumerate(shuffled):
            s.class_id = int(rng.permutation(3)[i % 3])
        plan = make_folds(len(shuffled), 4, seed=1)
        enc = tiny_encoder()
        res = linear_probe(enc, shuffled, plan, seed=0)
        assert abs(res["mean_accuracy"] - 1 / 3) < 0.25

    def test_deterministic(self, small_corpus):
        enc = tiny_encoder()
        plan = make_folds(len(small_corpus), 4, seed=5)
        a = linear_probe(enc, small_corpus, plan, seed=2)
        b = linear_probe(enc, small_corpus, plan, seed=2)
        assert a == b

    def test_stratification_error(self, small_corpus):
        # exactly one sample of class 2: its test fold's training split
        # cannot contain every class
        samples = [s for s in small_corpus if s.class_id != 2]
        rare = [s for s in small_corpus if s.class_id == 2][:1]
        samples = samples + rare
        plan = make_folds(len(samples), 5, seed=0)
        enc = tiny_encoder()
        with pytest.raises(StratificationError):
            linear_probe(enc, samples, plan, seed=0)


class TestSegHeadEval:
    def test_oracle_predictions_through_metric_path(self, small_corpus):
        gt = _foreground_targets(small_corpus[:4])
        for i in range(4):
            m = segmentation_metrics(gt[i], gt[i])
            assert m.dice == 1.0 and m.hd == 0.0

    def test_training_reduces_loss(self, small_corpus):
        cfg = resolve_config({
            "corpus": {"image_size": 96},
            "augment": {"out_size": 96},
            "model": {"backbone": {"in_size": 96, "fpn_channels": 16,
                                   "stage_channels": [8, 12, 16, 16]},
                      "prompt_engine": {"channels": 16, "rounds": 2,
                                        "tokens": 4},
                      "adapter": {"d": 16, "d_prime": 4}},
            "eval": {"seg_train_steps": 200, "seg_batch": 8},
        })
        enc = MultiScaleBackbone(cfg.model.backbone)
        samples = small_corpus
        coarse = _coarse_maps(enc, samples)
        targets = _foreground_targets(samples)
        head, losses = train_seg_head(coarse, targets, np.arange(len(samples)),
                                      cfg, seed=0, return_losses=True)
        # monotone on 5-chunk averages (per the small-scale training oracle)
        chunks = np.array_split(np.array(losses), 5)
        means = [c.mean() for c in chunks]
        assert all(b < a for a, b in zip(means, means[1:]))

    def test_trained_beats_untrained_dice(self, small_corpus):
        cfg = resolve_config({
            "corpus": {"image_size": 96},
            "augment": {"out_size": 96},
            "model": {"backbone": {"in_size": 96, "fpn_channels": 16,
                                   "stage_channels": [8, 12, 16, 16]},
                      "prompt_engine": {"channels": 16, "rounds": 2,
                                        "tokens": 4},
                      "adapter": {"d": 16, "d_prime": 4}},
            "eval": {"seg_train_steps": 200, "seg_batch": 8},
        })
        enc = MultiScaleBackbone(cfg.model.backbone)
        samples = small_corpus
        coarse = _coarse_maps(enc, samples)
        targets = _foreground_targets(samples)
        idx = np.arange(len(samples))
        wins = 0
        for seed in range(3):
            trained = train_seg_head(coarse, targets, idx, cfg, seed=seed)
            untrained = train_seg_head(coarse, targets, idx, cfg, steps=1,
                                       seed=seed)
            size = targets.shape[-1]

            def mean_dice(head):
                preds = predict_foreground(head, coarse, idx, size, 0.5)
                return np.mean([confusion_metrics(p, targets[i]).dice
                                for i, p in zip(idx, preds)])

            wins += mean_dice(trained) > mean_dice(untrained)
        assert wins >= 2

    def test_threshold_sweep_supported(self, tiny_corpus):
        cfg = resolve_config({
            "corpus": {"image_size": 96},
            "augment": {"out_size": 96},
            "model": {"backbone": {"in_size": 96, "fpn_channels": 8,
                                   "stage_channels": [4, 6, 8, 8]},
                      "prompt_engine": {"channels": 8, "rounds": 1,
                                        "tokens": 2, "heads": 2},
                      "adapter": {"d": 8, "d_prime": 2}},
            "eval": {"seg_train_steps": 10, "n_folds": 3},
        })
        enc = MultiScaleBackbone(cfg.model.backbone)
        plan = make_folds(len(tiny_corpus), 3, seed=0)
        out = seg_head_eval(enc, tiny_corpus, plan, cfg,
                            thresholds=[0.3, 0.5, 0.7], seed=0)
        assert set(out.keys()) == {"0.3", "0.5", "0.7"}
        for res in out.values():
            assert len(res["per_fold"]) == 3
            assert 0.0 <= res["mean"]["dice"] <= 1.0
