from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from slidenuc.matchloss import (
    FORBIDDEN_COST,
    Assignment,
    BoxCxCyWH,
    CostWeights,
    LOSS_WEIGHTS,
    MATCHER_WEIGHTS,
    assign,
    cxcywh_to_corners,
    focal_loss,
    giou,
    iou,
    l1_box,
    pairwise_cost,
    set_loss,
)


def brute_force_assignment(cost: np.ndarray) -> float:
    n, m = cost.shape
    if n == 0 or m == 0:
        return 0.0
    if n > m:
        cost = cost.T
        n, m = m, n
    return min(
        sum(cost[i, j] for i, j in enumerate(perm))
        for perm in itertools.permutations(range(m), n)
    )


class TestGiou:
    def test_identical_boxes(self):
        assert giou((0.0, 0.0, 2.0, 2.0), (0.0, 0.0, 2.0, 2.0)) == pytest.approx(1.0, abs=1e-12)

    def test_partial_overlap_hand_case(self):
        # IoU 1/7, enclosing 9, union 7 -> 1/7 - 2/9 = -5/63
        assert giou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(-5 / 63, abs=1e-12)

    def test_disjoint_hand_case(self):
        assert giou((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-12)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            giou((0, 0, 0, 1), (0, 0, 1, 1))

    def test_giou_bounded_by_iou(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = rng.uniform(0, 10, size=2)
            b = rng.uniform(0.1, 5, size=2)
            c = rng.uniform(0, 10, size=2)
            d = rng.uniform(0.1, 5, size=2)
            box_a = (a[0], a[1], a[0] + b[0], a[1] + b[1])
            box_b = (c[0], c[1], c[0] + d[0], c[1] + d[1])
            g = giou(box_a, box_b)
            i = iou(box_a, box_b)
            assert g <= i + 1e-12
            assert -1.0 - 1e-12 <= g <= 1.0 + 1e-12
            assert g == pytest.approx(giou(box_b, box_a), abs=1e-12)

    def test_translation_and_scale_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            a = rng.uniform(0, 5, size=4)
            box_a = (a[0], a[1], a[0] + 1 + a[2], a[1] + 1 + a[3])
            b = rng.uniform(0, 5, size=4)
            box_b = (b[0], b[1], b[0] + 1 + b[2], b[1] + 1 + b[3])
            base = giou(box_a, box_b)
            t = rng.uniform(-100, 100, size=2)
            s = rng.uniform(0.1, 50)
            moved_a = (box_a[0] + t[0], box_a[1] + t[1], box_a[2] + t[0], box_a[3] + t[1])
            moved_b = (box_b[0] + t[0], box_b[1] + t[1], box_b[2] + t[0], box_b[3] + t[1])
            assert giou(moved_a, moved_b) == pytest.approx(base, abs=1e-9)
            scaled_a = tuple(v * s for v in box_a)
            scaled_b = tuple(v * s for v in box_b)
            assert giou(scaled_a, scaled_b) == pytest.approx(base, abs=1e-9)

    def test_equality_iff_enclosing_is_union(self):
        # boxes sharing an edge: enclosing == union -> giou == iou
        assert giou((0, 0, 1, 1), (1, 0, 2, 1)) == pytest.approx(iou((0, 0, 1, 1), (1, 0, 2, 1)), abs=1e-12)


class TestL1Box:
    def test_zero_for_identical(self):
        assert l1_box((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)) == 0.0

    def test_single_component(self):
        assert l1_box((0.6, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)) == pytest.approx(0.1, abs=1e-12)

    def test_matches_independent_recompute(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = rng.uniform(0.1, 0.9, size=4)
            b = rng.uniform(0.1, 0.9, size=4)
            want = sum(abs(float(x) - float(y)) for x, y in zip(a, b))
            assert l1_box(a, b) == pytest.approx(want, abs=1e-12)


class TestFocalLoss:
    def test_perfectly_classified(self):
        assert focal_loss([0.0, 1.0], 1) == 0.0

    def test_gamma_zero_reduces_to_cross_entropy(self):
        assert focal_loss([0.5, 0.5], 0, alpha=1.0, gamma=0.0) == pytest.approx(
            math.log(2), abs=1e-12
        )

    def test_default_parameters_closed_form(self):
        # 0.25 * (1-0.9)^2 * (-ln 0.9)
        want = 0.25 * 0.01 * -math.log(0.9)
        assert focal_loss([0.1, 0.9], 1, alpha=0.25, gamma=2.0) == pytest.approx(want, abs=1e-12)

    def test_zero_probability_clamped_with_flag(self):
        with pytest.warns(RuntimeWarning, match="clamped"):
            val = focal_loss([1.0, 0.0], 1, alpha=1.0, gamma=0.0)
        assert val == pytest.approx(-math.log(1e-12), rel=1e-9)

    def test_monotone_decreasing_in_pt(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            alpha = float(rng.uniform(0.05, 1.0))
            gamma = float(rng.uniform(0.0, 4.0))
            p1, p2 = np.sort(rng.uniform(0.01, 0.999, size=2))
            if p1 == p2:
                continue
            lo = focal_loss([1 - p2, p2], 1, alpha, gamma)
            hi = focal_loss([1 - p1, p1], 1, alpha, gamma)
            assert hi > lo

    def test_rejects_non_probability(self):
        with pytest.raises(ValueError):
            focal_loss([0.5, 0.2], 0)


def manual_pairwise_entry(pred_box, probs, gt_box, gt_class, w: CostWeights) -> float:
    """Re-derivation of one cost entry from the definitions."""
    l1 = sum(abs(a - b) for a, b in zip(pred_box, gt_box))
    ax0, ay0 = pred_box[0] - pred_box[2] / 2, pred_box[1] - pred_box[3] / 2
    ax1, ay1 = pred_box[0] + pred_box[2] / 2, pred_box[1] + pred_box[3] / 2
    bx0, by0 = gt_box[0] - gt_box[2] / 2, gt_box[1] - gt_box[3] / 2
    bx1, by1 = gt_box[0] + gt_box[2] / 2, gt_box[1] + gt_box[3] / 2
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    g = inter / union - (enclose - union) / enclose
    p = probs[gt_class]
    pos = w.alpha_focal * (1 - p) ** w.gamma_focal * -math.log(p + 1e-8)
    neg = (1 - w.alpha_focal) * p**w.gamma_focal * -math.log(1 - p + 1e-8)
    return w.lambda_bbox * l1 + w.lambda_giou * (1 - g) + w.lambda_focal * (pos - neg)


class TestPairwiseCost:
    def test_exact_prediction_is_row_minimum(self):
        gts = [((0.5, 0.5, 0.2, 0.2), 1), ((0.2, 0.8, 0.1, 0.1), 0)]
        preds = [((0.5, 0.5, 0.2, 0.2), [0.0, 1.0, 0.0])]
        cost = pairwise_cost(preds, gts)
        assert cost.shape == (1, 2)
        assert cost[0, 0] < cost[0, 1]

    def test_two_by_two_matches_hand_computation(self):
        preds = [
            ((0.3, 0.3, 0.2, 0.2), [0.7, 0.2, 0.1]),
            ((0.6, 0.7, 0.1, 0.3), [0.1, 0.8, 0.1]),
        ]
        gts = [((0.35, 0.3, 0.2, 0.2), 0), ((0.6, 0.6, 0.2, 0.2), 1)]
        cost = pairwise_cost(preds, gts, MATCHER_WEIGHTS)
        for i, (pb, pp) in enumerate(preds):
            for j, (gb, gc) in enumerate(gts):
                assert cost[i, j] == pytest.approx(
                    manual_pairwise_entry(pb, pp, gb, gc, MATCHER_WEIGHTS), rel=1e-12
                )

    def test_empty_ground_truth(self):
        cost = pairwise_cost([((0.5, 0.5, 0.1, 0.1), [1.0])], [])
        assert cost.shape == (1, 0)
        assert assign(cost).pairs == ()


class TestAssign:
    def test_hand_case(self):
        result = assign(np.array([[1.0, 2.0], [2.0, 4.0]]))
        assert result.pairs == ((0, 1), (1, 0))
        assert result.total_cost == 4.0

    def test_diagonal_zero_identity(self):
        result = assign(np.diag([0.0, 0.0, 0.0]) + np.triu(np.ones((3, 3)), 1))
        assert result.pairs == ((0, 0), (1, 1), (2, 2))
        assert result.total_cost == 0.0

    def test_forbidden_sentinel(self):
        cost = np.array([[FORBIDDEN_COST, 1.0], [1.0, FORBIDDEN_COST]])
        result = assign(cost)
        assert result.pairs == ((0, 1), (1, 0))
        assert result.total_cost == 2.0

    def test_200_random_matrices_match_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n, m = rng.integers(1, 8, size=2)
            cost = rng.uniform(0, 10, size=(n, m))
            assert assign(cost).total_cost == pytest.approx(
                brute_force_assignment(cost), abs=1e-9
            )

    def test_permutation_invariance_of_total(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n, m = rng.integers(1, 8, size=2)
            cost = rng.uniform(0, 10, size=(n, m))
            base = assign(cost).total_cost
            rp = rng.permutation(n)
            cp = rng.permutation(m)
            permuted = cost[np.ix_(rp, cp)]
            result = assign(permuted)
            assert result.total_cost == pytest.approx(base, rel=1e-12)
            # and the pairs permute accordingly
            recovered_cost = sum(cost[rp[i], cp[j]] for i, j in result.pairs)
            assert recovered_cost == pytest.approx(base, rel=1e-12)

    def test_returns_assignment_type(self):
        assert isinstance(assign(np.zeros((1, 1))), Assignment)


class TestSetLoss:
    def test_perfect_predictions_zero_loss(self):
        gts = [((0.4, 0.4, 0.2, 0.2), 0), ((0.7, 0.7, 0.1, 0.1), 2)]
        preds = [
            ((0.4, 0.4, 0.2, 0.2), [1.0, 0.0, 0.0]),
            ((0.7, 0.7, 0.1, 0.1), [0.0, 0.0, 1.0]),
        ]
        assert set_loss(preds, gts) == pytest.approx(0.0, abs=1e-9)

    def test_single_pair_matches_hand_computation(self):
        pred_box = (0.5, 0.5, 0.2, 0.2)
        gt_box = (0.55, 0.5, 0.2, 0.2)
        probs = [0.2, 0.8]
        loss = set_loss([(pred_box, probs)], [(gt_box, 1)])

        l1 = 0.05
        # overlap geometry by hand: boxes [0.4,0.6]x[0.4,0.6] vs [0.45,0.65]x[0.4,0.6]
        inter = 0.15 * 0.2
        union = 0.04 + 0.04 - inter
        enclose = 0.25 * 0.2
        g = inter / union - (enclose - union) / enclose
        w = LOSS_WEIGHTS
        pos = w.alpha_focal * (1 - 0.8) ** 2 * -math.log(0.8 + 1e-8)
        neg_other = (1 - w.alpha_focal) * 0.2**2 * -math.log(1 - 0.2 + 1e-8)
        want = w.lambda_bbox * l1 + w.lambda_giou * (1 - g) + w.lambda_focal * (pos + neg_other)
        assert loss == pytest.approx(want, rel=1e-9)

    def test_empty_gts_pure_background(self):
        probs = [0.3, 0.7]
        loss = set_loss([((0.5, 0.5, 0.1, 0.1), probs)], [])
        w = LOSS_WEIGHTS
        want = w.lambda_focal * sum(
            (1 - w.alpha_focal) * p**2 * -math.log(1 - p + 1e-8) for p in probs
        )
        assert loss == pytest.approx(want, rel=1e-9)

    def test_no_predictions(self):
        assert set_loss([], [((0.5, 0.5, 0.1, 0.1), 0)]) == 0.0


class TestBoxType:
    def test_corner_conversion(self):
        box = BoxCxCyWH(0.5, 0.5, 0.2, 0.4)
        assert box.corners == pytest.approx((0.4, 0.3, 0.6, 0.7))
        arr = cxcywh_to_corners(np.array([[0.5, 0.5, 0.2, 0.4]]))
        assert arr[0] == pytest.approx([0.4, 0.3, 0.6, 0.7])

    def test_rejects_nonpositive_sides(self):
        with pytest.raises(ValueError):
            BoxCxCyWH(0.5, 0.5, 0.0, 0.1)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            CostWeights(lambda_giou=-1)
