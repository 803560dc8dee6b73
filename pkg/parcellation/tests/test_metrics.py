import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from openpyxl import load_workbook

from parcellation.fileio import read_json, read_ppm
from parcellation.metrics import (
    ConfusionMatrix,
    EvalReport,
    confusion_matrix,
    dice,
    distance_transform,
    evaluate_labels,
    pixel_distance_error,
)
from parcellation.tensor import make_rng


def halves():
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[:, 2:] = 1
    return gt


class ConfusionTests(SimpleTestCase):
    def test_perfect_prediction_is_diagonal(self):
        gt = make_rng(0).integers(0, 4, size=(8, 8))
        cm = confusion_matrix(gt, gt, num_classes=4)
        self.assertEqual(cm.misclassified, 0)
        np.testing.assert_array_equal(cm.counts, np.diag(np.bincount(gt.ravel(), minlength=4)))

    def test_all_ignored(self):
        gt = np.zeros((3, 3), dtype=np.uint8)
        cm = confusion_matrix(gt, gt, ignore=np.ones((3, 3), dtype=bool), num_classes=2)
        self.assertEqual(cm.total, 0)
        self.assertFalse(cm.counts.any())
        with self.assertRaises(ValueError):
            pixel_distance_error(gt, gt, np.ones((3, 3), dtype=bool))

    def test_matches_per_pixel_count(self):
        rng = make_rng(1)
        pred = rng.integers(0, 5, size=(16, 16))
        gt = rng.integers(0, 5, size=(16, 16))
        gt[rng.random((16, 16)) < 0.1] = 255
        expected = np.zeros((5, 5), dtype=np.int64)
        for t, p in zip(gt.ravel(), pred.ravel()):
            if t != 255:
                expected[t, p] += 1
        np.testing.assert_array_equal(confusion_matrix(pred, gt, num_classes=5).counts, expected)

    def test_labels_out_of_range_raise(self):
        with self.assertRaises(ValueError):
            confusion_matrix(np.array([[3]]), np.array([[0]]), num_classes=2)

    def test_shape_mismatch_raises(self):
        with self.assertRaises(ValueError):
            confusion_matrix(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_addition(self):
        a = ConfusionMatrix(np.array([[1, 2], [0, 3]]))
        b = ConfusionMatrix(np.array([[0, 1], [4, 0]]))
        np.testing.assert_array_equal((a + b).counts, [[1, 3], [4, 3]])
        with self.assertRaises(ValueError):
            a + ConfusionMatrix(np.zeros((3, 3), dtype=np.int64))


class DiceTests(SimpleTestCase):
    def test_identical_masks(self):
        gt = make_rng(2).integers(0, 3, size=(6, 6))
        per_class, mean = dice(confusion_matrix(gt, gt, num_classes=3))
        np.testing.assert_array_equal(per_class, 1.0)
        self.assertEqual(mean, 1.0)

    def test_hand_counted_case(self):
        per_class, mean = dice(confusion_matrix(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1])))
        self.assertAlmostEqual(per_class[0], 2 / 3)
        self.assertAlmostEqual(per_class[1], 4 / 5)
        self.assertAlmostEqual(mean, 11 / 15)

    def test_disjoint_masks(self):
        per_class, mean = dice(confusion_matrix(np.ones((3, 3)), np.zeros((3, 3)), num_classes=2))
        np.testing.assert_array_equal(per_class, [0.0, 0.0])
        self.assertEqual(mean, 0.0)

    def test_matches_direct_set_overlap(self):
        rng = make_rng(21)
        for _ in range(50):
            gt = rng.integers(0, 4, size=(9, 11))
            pred = np.where(rng.random(gt.shape) < 0.3, rng.integers(0, 4, size=gt.shape), gt)
            per_class, _ = dice(confusion_matrix(pred, gt, num_classes=5))
            expected = []
            for c in range(5):
                p, g = pred == c, gt == c
                size = p.sum() + g.sum()
                expected.append(2 * (p & g).sum() / size if size else np.nan)
            np.testing.assert_allclose(per_class, expected, rtol=1e-12)

    def test_absent_class_is_nan_and_skipped(self):
        per_class, mean = dice(confusion_matrix(np.zeros((2, 2)), np.zeros((2, 2)), num_classes=3))
        self.assertEqual(per_class[0], 1.0)
        self.assertTrue(np.isnan(per_class[1:]).all())
        self.assertEqual(mean, 1.0)


class DistanceTests(SimpleTestCase):
    def test_three_four_five(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[0, 0] = True
        self.assertEqual(distance_transform(mask)[3, 4], 5.0)

    def test_full_mask_is_zero(self):
        self.assertFalse(distance_transform(np.ones((5, 7), dtype=bool)).any())

    def test_empty_mask_raises(self):
        with self.assertRaises(ValueError):
            distance_transform(np.zeros((4, 4), dtype=bool))

    def test_matches_brute_force(self):
        rng = make_rng(3)
        yy, xx = np.indices((48, 48))
        for _ in range(50):
            mask = rng.random((48, 48)) < rng.uniform(0.01, 0.5)
            mask[rng.integers(48), rng.integers(48)] = True
            ty, tx = np.nonzero(mask)
            squared = (yy[..., None] - ty) ** 2 + (xx[..., None] - tx) ** 2
            expected = np.sqrt(squared.min(axis=-1))
            np.testing.assert_allclose(distance_transform(mask), expected, rtol=0, atol=1e-12)


class DistanceErrorTests(SimpleTestCase):
    def test_perfect_prediction(self):
        gt = halves()
        eps_tau, eps, evaluated, wrong = pixel_distance_error(gt, gt)
        self.assertEqual((eps_tau, eps, evaluated, wrong), (0.0, 0.0, 16, 0))

    def test_neighbouring_flip(self):
        pred = halves()
        pred[0, 1] = 1
        eps_tau, eps, evaluated, wrong = pixel_distance_error(pred, halves())
        self.assertEqual(eps_tau, 1.0)
        self.assertEqual(eps, 6.25)
        self.assertEqual((evaluated, wrong), (16, 1))

    def test_distant_flip(self):
        pred = halves()
        pred[0, 0] = 1
        eps_tau, eps, _, _ = pixel_distance_error(pred, halves())
        self.assertEqual(eps_tau, 4.0)
        self.assertEqual(eps, 12.5)

    def test_class_missing_from_groundtruth_costs_diagonal(self):
        gt = np.zeros((3, 4), dtype=np.uint8)
        pred = gt.copy()
        pred[1, 1] = 2
        eps_tau, _, _, _ = pixel_distance_error(pred, gt)
        self.assertAlmostEqual(eps_tau, 25.0)

    def test_ignored_pixels_are_not_targets(self):
        gt = halves()
        gt[:, 2] = 255
        pred = halves()
        pred[0, 1] = 1
        eps_tau, _, evaluated, _ = pixel_distance_error(pred, gt)
        self.assertEqual(evaluated, 12)
        self.assertEqual(eps_tau, 4.0)


    def test_section_order_does_not_matter(self):
        rng = make_rng(22)
        reports = []
        for _ in range(5):
            gt = rng.integers(0, 3, size=(12, 12))
            pred = np.where(rng.random(gt.shape) < 0.2, rng.integers(0, 3, size=gt.shape), gt)
            reports.append(evaluate_labels(pred, gt, 3))
        forward = EvalReport.combine(reports)
        for order in ([4, 2, 0, 3, 1], [1, 0, 4, 3, 2]):
            shuffled = EvalReport.combine([reports[i] for i in order])
            self.assertAlmostEqual(shuffled.epsilon, forward.epsilon, places=10)
            np.testing.assert_array_equal(shuffled.confusion.counts, forward.confusion.counts)

    def test_error_grows_as_predictions_degrade(self):
        rng = make_rng(23)
        gt = np.repeat(np.arange(4), 6)[None, :].repeat(16, axis=0)
        pred = gt.copy()
        order = rng.permutation(gt.size)
        previous = 0.0
        for index in order[:60]:
            y, x = divmod(int(index), gt.shape[1])
            pred[y, x] = (gt[y, x] + 1 + rng.integers(0, 3)) % 4
            _, eps, _, _ = pixel_distance_error(pred, gt)
            self.assertGreaterEqual(eps, previous)
            previous = eps
        self.assertGreater(previous, 0.0)

class ReportTests(SimpleTestCase):
    def test_combined_sections_equal_concatenation(self):
        rng = make_rng(4)
        preds = [rng.integers(0, 3, size=(8, 8)) for _ in range(2)]
        gts = [rng.integers(0, 3, size=(8, 8)) for _ in range(2)]
        reports = [evaluate_labels(p, g, 3) for p, g in zip(preds, gts)]
        combined = EvalReport.combine(reports)
        joint = confusion_matrix(np.concatenate(preds), np.concatenate(gts), num_classes=3)
        np.testing.assert_array_equal(combined.confusion.counts, joint.counts)
        self.assertAlmostEqual(combined.mean_dice, dice(joint)[1])
        tau = reports[0].epsilon_tau + reports[1].epsilon_tau
        self.assertAlmostEqual(combined.epsilon, 100 * math.sqrt(tau) / 128)
        self.assertEqual(combined.sections, 2)

    def test_constant_prediction(self):
        gt = make_rng(5).integers(0, 3, size=(10, 10))
        report = evaluate_labels(np.ones_like(gt), gt, 3)
        self.assertEqual(report.per_class_dice[0], 0.0)
        self.assertEqual(report.per_class_dice[2], 0.0)
        self.assertGreater(report.per_class_dice[1], 0.0)

    def test_class_dice_subset(self):
        report = evaluate_labels(np.array([[0, 1, 1, 1]]), np.array([[0, 0, 1, 1]]), 2)
        self.assertAlmostEqual(report.class_dice([1]), 0.8)
        self.assertAlmostEqual(report.class_dice([0, 1]), 11 / 15)

    def test_saved_artifacts(self):
        gt = halves()
        pred = gt.copy()
        pred[0, 1] = 1
        report = evaluate_labels(pred, gt, 3, class_names=["a", "b", "c"])
        with tempfile.TemporaryDirectory() as tmp:
            report.save(tmp)
            payload = read_json(Path(tmp) / "report.json")
            image = read_ppm(Path(tmp) / "confusion.ppm")
            workbook = load_workbook(Path(tmp) / "report.xlsx")
        self.assertEqual(payload["epsilon"], 6.25)
        self.assertIsNone(payload["per_class_dice"][2])
        self.assertEqual(payload["confusion"], [[7, 1, 0], [0, 8, 0], [0, 0, 0]])
        self.assertEqual(image.shape, (48, 48, 3))
        self.assertEqual(workbook.sheetnames, ["Dice", "Confusion"])
        rows = list(workbook["Dice"].iter_rows(values_only=True))
        self.assertEqual(rows[0][:3], ("Class", "Name", "Dice"))
        self.assertEqual(rows[1][1], "a")
