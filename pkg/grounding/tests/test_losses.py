import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from grounding.exceptions import ConfigError, ContractError
from grounding.losses import (
    Box, LossConfig, accuracy_at_iou, box_convert, corners_to_cxcywh, cxcywh_to_corners, giou, grounding_loss,
    iou, smooth_l1_loss,
)
from grounding.tensor import Tape, Tensor, float64_mode


class BoxTests(SimpleTestCase):
    def test_unit_box_corners(self):
        self.assertEqual(Box(0.5, 0.5, 1, 1).corners(), (0, 0, 1, 1))
        self.assertEqual(box_convert(Box(0.5, 0.5, 0.5, 0.5)), (0.25, 0.25, 0.75, 0.75))

    def test_pixel_box_normalization(self):
        box = Box.from_pixels(64, 128, 320, 160, 640, 640)
        assert_allclose(box.as_list(), [0.35, 0.325, 0.5, 0.25])
        assert_allclose(box.to_pixels(640, 640), (64, 128, 320, 160))

    def test_conversion_round_trip(self):
        boxes = np.random.default_rng(0).uniform(0.1, 0.9, size=(50, 4))
        assert_allclose(corners_to_cxcywh(cxcywh_to_corners(boxes)), boxes, atol=1e-7)

    def test_negative_extent(self):
        with self.assertRaises(ContractError):
            Box(0.5, 0.5, -0.1, 0.2)
        with self.assertRaises(ContractError):
            cxcywh_to_corners([[0.5, 0.5, 0.2, -0.2]])


class OverlapTests(SimpleTestCase):
    def test_iou_values(self):
        self.assertEqual(iou((0, 0, 1, 1), (0, 0, 1, 1)), 1.0)
        self.assertAlmostEqual(iou((0, 0, 2, 2), (1, 1, 3, 3)), 1 / 7, places=9)
        self.assertEqual(iou((0, 0, 1, 1), (2, 2, 3, 3)), 0.0)

    def test_giou_values(self):
        self.assertAlmostEqual(giou((0, 0, 1, 1), (0, 0, 1, 1)), 1.0, places=9)
        self.assertAlmostEqual(giou((0, 0, 1, 1), (2, 2, 3, 3)), -7 / 9, places=9)
        self.assertAlmostEqual(giou((0, 0, 2, 2), (1, 0, 3, 2)), 1 / 3, places=9)

    def test_degenerate_hull(self):
        with self.assertRaises(ContractError):
            giou((1, 1, 1, 1), (1, 1, 1, 1))

    def test_random_pair_properties(self):
        rng = np.random.default_rng(7)
        n = 100_000
        xy_a, xy_b = rng.uniform(0, 1, (n, 2)), rng.uniform(0, 1, (n, 2))
        a = np.concatenate([xy_a, xy_a + rng.uniform(0.01, 1, (n, 2))], axis=1)
        b = np.concatenate([xy_b, xy_b + rng.uniform(0.01, 1, (n, 2))], axis=1)
        g_ab, g_ba, i_ab = giou(a, b), giou(b, a), iou(a, b)
        assert_allclose(g_ab, g_ba, atol=1e-12)
        self.assertTrue((g_ab <= i_ab + 1e-12).all())
        self.assertTrue(((g_ab > -1) & (g_ab <= 1)).all())
        self.assertTrue(((i_ab >= 0) & (i_ab <= 1)).all())
        assert_allclose(giou(a * 3.7, b * 3.7), g_ab, atol=1e-6)
        assert_allclose(iou(a * 0.2, b * 0.2), i_ab, atol=1e-6)

    def test_giou_equals_iou_when_hull_is_union(self):
        self.assertAlmostEqual(giou((0, 0, 2, 2), (1, 0, 3, 2)), iou((0, 0, 2, 2), (1, 0, 3, 2)), places=12)


class LossTests(SimpleTestCase):
    def _tensor(self, rows):
        return Tensor(np.array(rows, dtype=np.float64), dtype=np.float64)

    def test_smooth_l1_quadratic_branch(self):
        loss = smooth_l1_loss(self._tensor([[0.5, 0.5, 0.5, 0.5]]), self._tensor([[0.0, 0.5, 0.5, 0.5]]))
        self.assertAlmostEqual(loss.item(), 0.03125)

    def test_smooth_l1_linear_branch(self):
        loss = smooth_l1_loss(self._tensor([[2.5, 0.5, 0.5, 0.5]]), self._tensor([[0.5, 0.5, 0.5, 0.5]]))
        self.assertAlmostEqual(loss.item(), 0.375)

    def test_zero_at_target(self):
        box = self._tensor([[0.4, 0.5, 0.2, 0.3]])
        result = grounding_loss(box, box)
        self.assertAlmostEqual(result.total.item(), 0.0, places=12)

    def test_zero_weight_is_plain_smooth_l1(self):
        pred = self._tensor([[0.4, 0.5, 0.2, 0.3]])
        target = self._tensor([[0.45, 0.4, 0.3, 0.3]])
        result = grounding_loss(pred, target, LossConfig(giou_weight=0.0))
        self.assertEqual(result.total.item(), smooth_l1_loss(pred, target).item())

    def test_loss_decreases_toward_target(self):
        target = np.array([[0.4, 0.5, 0.2, 0.3]])
        start = target + np.array([[0.01, -0.008, 0.006, -0.004]])
        losses = []
        for t in np.linspace(0, 1, 11):
            pred = start + t * (target - start)
            losses.append(grounding_loss(self._tensor(pred), self._tensor(target)).total.item())
        self.assertTrue(all(later <= earlier + 1e-12 for earlier, later in zip(losses, losses[1:])))
        self.assertAlmostEqual(losses[-1], 0.0, places=12)

    def test_gradient_flows_to_prediction(self):
        with float64_mode():
            pred = Tensor([[0.4, 0.5, 0.2, 0.3]], requires_grad=True)
            with Tape() as tape:
                result = grounding_loss(pred, np.array([[0.5, 0.5, 0.2, 0.3]]))
            grad = tape.backward(result.total)[pred]
        self.assertLess(grad[0, 0], 0)

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            LossConfig(giou_weight=-1)
        with self.assertRaises(ConfigError):
            LossConfig(smooth_l1_beta=0)


class AccuracyTests(SimpleTestCase):
    def test_perfect(self):
        boxes = [Box(0.5, 0.5, 0.2, 0.2), Box(0.3, 0.3, 0.1, 0.4)]
        self.assertEqual(accuracy_at_iou(boxes, boxes), 1.0)

    def test_third_overlap_is_wrong(self):
        pred = Box.from_corners(0, 0, 0.2, 0.2)
        gt = Box.from_corners(0.1, 0, 0.3, 0.2)
        self.assertEqual(accuracy_at_iou([pred], [gt]), 0.0)

    def test_empty(self):
        with self.assertRaises(ContractError):
            accuracy_at_iou([], [])

    def test_length_mismatch(self):
        with self.assertRaises(ContractError):
            accuracy_at_iou([Box(0.5, 0.5, 0.1, 0.1)], [])
