import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import make_gt, make_poses
from logocap.core import COCO_SKELETON, PoseSet
from logocap.errors import NoGroundTruthError, UnmatchedInstanceError
from logocap.kem import local_kems
from logocap.metrics import (LARGE_RANGE, MEDIUM_RANGE, OKS_THRESHOLDS, SimilarityTensor, evaluate_ap, keypoint_similarity, mean_oks, oks,
                             oks_matrix, select_best_gt, similarity_tensor, upper_bound_oracle)

SIG = COCO_SKELETON.sigmas


def _displace_to_similarity(gt, target):
    """Move every keypoint along +x so each keypoint similarity equals ``target``."""
    d = np.sqrt(-math.log(target) * 2 * gt.area * (2 * SIG) ** 2)
    xy = gt.keypoints[:, :2].copy()
    xy[:, 0] += d
    return xy


class TestKeypointSimilarity:
    def test_identity(self):
        assert keypoint_similarity((3.0, 4.0), (3.0, 4.0), 0.026, 100.0) == 1.0

    def test_nose_example(self):
        # 2 * 10000 * (2 * 0.026)^2 = 54.08 and 5.2^2 = 27.04
        assert keypoint_similarity((5.2, 0.0), (0.0, 0.0), 0.026, 10000.0) == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert math.exp(-0.5) == pytest.approx(0.60653, abs=1e-5)

    def test_far_tail(self):
        assert keypoint_similarity((1e6, 0.0), (0.0, 0.0), 0.026, 100.0) == 0.0

    def test_rejects_bad_area(self):
        with pytest.raises(ValueError):
            keypoint_similarity((0, 0), (1, 1), 0.026, 0.0)

    @given(st.floats(0, 50), st.floats(0, 50))
    def test_decreasing_in_distance(self, a, b):
        lo, hi = sorted((a, b))
        s_lo = keypoint_similarity((lo, 0.0), (0.0, 0.0), 0.05, 400.0)
        s_hi = keypoint_similarity((hi, 0.0), (0.0, 0.0), 0.05, 400.0)
        assert s_lo >= s_hi


class TestOks:
    def test_identical(self, rng):
        g = make_gt(rng.uniform(0, 100, (17, 2)))
        assert oks(g.keypoints[:, :2], g) == 1.0

    def test_two_visible_mean(self):
        vis = np.zeros(17, bool)
        vis[[0, 5]] = True
        g = make_gt(np.zeros((17, 2)), 10000.0, visible=vis)
        pred = np.zeros((17, 2))
        pred[0, 0] = 5.2  # nose at similarity exp(-0.5); shoulder exact
        assert oks(pred, g) == pytest.approx(0.5 * (1 + math.exp(-0.5)), abs=1e-12)
        assert 0.5 * (1 + math.exp(-0.5)) == pytest.approx(0.80327, abs=1e-5)

    def test_far(self):
        g = make_gt(np.zeros((17, 2)), 100.0)
        assert oks(np.full((17, 2), 1e4), g) < 1e-12

    def test_invisible_instance(self):
        g = make_gt(np.zeros((17, 2)), visible=np.zeros(17, bool))
        with pytest.raises(UnmatchedInstanceError, match="unmatched instance"):
            oks(np.zeros((17, 2)), g)

    def test_oks_matrix(self, rng):
        gts = [make_gt(rng.uniform(0, 100, (17, 2)), 900.0, i) for i in range(3)]
        poses = make_poses(np.stack([g.keypoints[:, :2] for g in gts[::-1]]))
        m = oks_matrix(poses, gts)
        assert m.shape == (3, 3)
        np.testing.assert_allclose(np.diag(m[::-1]), 1.0)


class TestEvaluateAp:
    def test_single_perfect(self, rng):
        g = make_gt(rng.uniform(0, 100, (17, 2)))
        rep = evaluate_ap([make_poses(g.keypoints[None, :, :2])], [[g]])
        assert rep.ap == 1.0
        assert set(rep.per_threshold) == set(OKS_THRESHOLDS)

    def test_no_predictions(self, rng):
        g = make_gt(rng.uniform(0, 100, (17, 2)))
        assert evaluate_ap([PoseSet.empty()], [[g]]).ap == 0.0

    def test_empty_inputs_flagged(self):
        rep = evaluate_ap([], [])
        assert rep.ap == 0.0 and rep.empty

    def test_half_of_thresholds(self):
        # both predictions reach OKS 0.72 with their gt: AP 1 at 0.50..0.70, 0 above
        gts = [make_gt(np.full((17, 2), 50.0) + [0, 5] * np.arange(17)[:, None], 4000.0, 0),
               make_gt(np.full((17, 2), 300.0) + [0, 5] * np.arange(17)[:, None], 4000.0, 1)]
        preds = make_poses(np.stack([_displace_to_similarity(g, 0.72) for g in gts]))
        np.testing.assert_allclose(oks_matrix(preds, gts).diagonal(), 0.72, atol=1e-12)
        rep = evaluate_ap([preds], [gts])
        for t in OKS_THRESHOLDS:
            assert rep.per_threshold[t] == (1.0 if t <= 0.7 else 0.0)
        assert rep.ap == pytest.approx(0.5, abs=1e-12)

    def test_ap_is_mean_of_thresholds(self, rng):
        gts = [make_gt(rng.uniform(0, 200, (17, 2)), 3000.0, i) for i in range(3)]
        xy = np.stack([g.keypoints[:, :2] for g in gts]) + rng.normal(0, 3, (3, 17, 2))
        poses = make_poses(xy).replace(scores=rng.uniform(size=3))
        rep = evaluate_ap([poses], [gts])
        assert rep.ap == pytest.approx(np.mean([rep.per_threshold[t] for t in OKS_THRESHOLDS]), abs=1e-15)
        assert 0.0 <= rep.ap <= 1.0

    def test_equal_score_permutation_invariant(self, rng):
        gts = [make_gt(rng.uniform(0, 200, (17, 2)), 3000.0, i) for i in range(4)]
        xy = np.stack([g.keypoints[:, :2] for g in gts])
        for perm in ([3, 2, 1, 0], [1, 3, 0, 2]):
            assert evaluate_ap([make_poses(xy[perm], 1.0)], [gts]).ap == 1.0

    def test_deterministic_with_ties(self, rng):
        # greedy matching with tied scores is order dependent in general, so
        # only repeatability is promised there
        gts = [make_gt(rng.uniform(0, 200, (17, 2)), 3000.0, i) for i in range(4)]
        xy = np.stack([g.keypoints[:, :2] for g in gts]) + rng.normal(0, 4, (4, 17, 2))
        runs = {evaluate_ap([make_poses(xy, 0.5)], [gts]).ap for _ in range(3)}
        assert len(runs) == 1

    def test_area_range(self, rng):
        small = make_gt(rng.uniform(0, 40, (17, 2)), 5000.0, 0)
        large = make_gt(rng.uniform(100, 300, (17, 2)), 20000.0, 1)
        preds = make_poses(small.keypoints[None, :, :2])
        assert evaluate_ap([preds], [[small, large]], area_range=MEDIUM_RANGE).ap == 1.0
        assert evaluate_ap([preds], [[small, large]], area_range=LARGE_RANGE).ap == 0.0

    def test_csv(self, rng):
        g = make_gt(rng.uniform(0, 100, (17, 2)))
        text = evaluate_ap([make_poses(g.keypoints[None, :, :2])], [[g]]).to_csv()
        lines = text.strip().splitlines()
        assert lines[0] == "threshold,ap"
        assert len(lines) == 12 and lines[-1] == "mean,1.0"


class TestSimilarityTensor:
    def test_grid_point_on_gt(self):
        g = make_gt(np.full((17, 2), 40.0))
        kems = local_kems(make_poses(np.full((1, 17, 2), 40.0)))
        s = similarity_tensor(kems, [g])
        assert s.values.shape == (17, 11, 11, 1)
        np.testing.assert_array_equal(s.values[:, 5, 5, 0], 1.0)

    def test_clamp(self):
        s = SimilarityTensor(np.array([0.2, 0.7]).reshape(1, 1, 2, 1))
        np.testing.assert_array_equal(s.clamped().ravel(), [0.5, 0.7])

    def test_no_gts(self):
        kems = local_kems(make_poses(np.zeros((1, 17, 2))))
        assert similarity_tensor(kems, []).values.shape == (17, 11, 11, 0)

    def test_invisible_is_zero(self):
        vis = np.ones(17, bool)
        vis[3] = False
        g = make_gt(np.full((17, 2), 40.0), visible=vis)
        s = similarity_tensor(local_kems(make_poses(np.full((1, 17, 2), 40.0))), [g])
        np.testing.assert_array_equal(s.values[3], 0.0)

    def test_matches_oracle(self, rng):
        gts = [make_gt(rng.uniform(0, 60, (17, 2)), rng.uniform(50, 3000), i,
                       visible=rng.uniform(size=17) > 0.2) for i in range(3)]
        kems = local_kems(make_poses(rng.uniform(0, 60, (1, 17, 2))), k=5)
        got = similarity_tensor(kems, gts).values
        ref = oracles.similarity(kems.coords[0].tolist(), [(g.keypoints.tolist(), g.area) for g in gts])
        np.testing.assert_allclose(got, np.array(ref), rtol=0, atol=1e-12)


class TestSelectBestGt:
    def test_single(self, rng):
        s = SimilarityTensor(rng.uniform(size=(17, 3, 3, 1)))
        n, score = select_best_gt(s)
        assert n == 0 and score == pytest.approx(s.clamped().mean())

    def test_prefers_exact(self):
        vals = np.stack([np.ones((17, 3, 3)), np.full((17, 3, 3), 0.1)], axis=-1)
        assert select_best_gt(SimilarityTensor(vals)) == (0, 1.0)
        assert select_best_gt(SimilarityTensor(vals[..., ::-1])) == (1, 1.0)

    def test_tie_lowest_index(self):
        vals = np.full((17, 3, 3, 2), 0.8)
        assert select_best_gt(SimilarityTensor(vals))[0] == 0

    def test_empty(self):
        with pytest.raises(NoGroundTruthError, match="no ground truth"):
            select_best_gt(SimilarityTensor(np.zeros((17, 3, 3, 0))))


class TestUpperBoundOracle:
    def test_exact_pose_unchanged(self, rng):
        g = make_gt(rng.uniform(20, 200, (17, 2)), 5000.0)
        init = make_poses(g.keypoints[None, :, :2])
        out, score = upper_bound_oracle(init, [g])
        np.testing.assert_array_equal(out.keypoints, init.keypoints)
        assert score == 1.0

    def test_shift_within_reach(self, rng):
        g = make_gt(rng.uniform(30, 200, (17, 2)), 5000.0)
        init = make_poses(g.keypoints[None, :, :2] + [3.0, 0.0])
        out, _ = upper_bound_oracle(init, [g])
        err = np.abs(out.xy[0] - g.keypoints[:, :2])
        assert np.all(err <= COCO_SKELETON.expansion_rates[:, None] + 1e-9)
        # brute force over the 121 cells of each window
        grid = local_kems(init).coords[0]
        for j in range(17):
            d2 = ((grid[j] - g.keypoints[j, :2]) ** 2).sum(-1)
            np.testing.assert_allclose(((out.xy[0, j] - g.keypoints[j, :2]) ** 2).sum(), d2.min(), atol=1e-9)

    def test_far_displacement_never_worse(self, rng):
        g = make_gt(rng.uniform(30, 200, (17, 2)), 5000.0)
        init = make_poses(g.keypoints[None, :, :2] + [60.0, -45.0])
        out, score = upper_bound_oracle(init, [g])
        assert score >= oks(init.xy[0], g)

    def test_no_gt_pass_through(self, rng):
        init = make_poses(rng.uniform(0, 100, (2, 17, 2)))
        out, score = upper_bound_oracle(init, [])
        assert out is init and score == 0.0

    @given(st.integers(0, 10 ** 6), st.floats(0.0, 20.0))
    def test_monotone(self, seed, sigma):
        r = np.random.default_rng(seed)
        gts = [make_gt(r.uniform(0, 250, (17, 2)), r.uniform(500, 20000), i) for i in range(2)]
        xy = np.stack([g.keypoints[:, :2] for g in gts]) + r.uniform(-sigma, sigma, (2, 17, 2))
        init = make_poses(xy)
        out, _ = upper_bound_oracle(init, gts)
        for n in range(2):
            sim = similarity_tensor(local_kems(init).coords[n], gts).values
            g = gts[int(np.argmax(sim.sum(axis=(0, 1, 2))))]
            assert oks(out.xy[n], g) >= oks(init.xy[n], g) - 1e-12


class TestMeanOks:
    def test_perfect_and_missing(self, rng):
        gts = [make_gt(rng.uniform(0, 100, (17, 2)), 900.0, i) for i in range(2)]
        preds = make_poses(gts[0].keypoints[None, :, :2])
        assert mean_oks([preds], [gts]) == pytest.approx(0.5 * (1.0 + oks(preds.xy[0], gts[1])))
        assert mean_oks([PoseSet.empty()], [gts]) == 0.0

    @given(st.floats(-500, 500), st.floats(-500, 500), st.integers(0, 10 ** 6))
    def test_translation_invariant(self, tx, ty, seed):
        r = np.random.default_rng(seed)
        g = make_gt(r.uniform(0, 100, (17, 2)), r.uniform(100, 5000))
        pred = g.keypoints[:, :2] + r.normal(0, 5, (17, 2))
        t = np.array([tx, ty])
        moved = make_gt(g.keypoints[:, :2] + t, g.area)
        assert oks(pred + t, moved) == pytest.approx(oks(pred, g), abs=1e-9)
