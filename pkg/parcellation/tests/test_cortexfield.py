import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from parcellation.cortexfield import (
    BG,
    GM,
    UP,
    WM,
    ConvergenceError,
    OrientationUndefined,
    ScalarField,
    VectorField,
    angle_to_up,
    dominant_orientation,
    enlarged_size,
    export_field,
    field_ppm,
    gradient,
    orientation_ppm,
    rotate_patch,
    solve_laplace,
)
from parcellation.fileio import read_ppm, read_ptnsr
from parcellation.tensor import make_rng


def ribbon_mask(height=12, width=20, thickness=6):
    mask = np.full((height, width), BG, dtype=np.uint8)
    mask[2:2 + thickness] = GM
    mask[2 + thickness:] = WM
    return mask


def annulus_mask(size=81, r_in=10, r_out=30):
    c = (size - 1) / 2
    yy, xx = np.indices((size, size))
    r = np.hypot(yy - c, xx - c)
    mask = np.full((size, size), GM, dtype=np.uint8)
    mask[r >= r_out + 0.5] = BG
    mask[r <= r_in - 0.5] = WM
    return mask, r


def tilted_ribbon(theta, size=96, half_width=12):
    c = (size - 1) / 2
    yy, xx = np.indices((size, size))
    t = (xx - c) * math.cos(theta) - (yy - c) * math.sin(theta)
    mask = np.full((size, size), GM, dtype=np.uint8)
    mask[t < -half_width] = BG
    mask[t > half_width] = WM
    return mask


class LaplaceTests(SimpleTestCase):
    def test_straight_ribbon_is_linear(self):
        field = solve_laplace(ribbon_mask(), tol=1e-12)
        expected = np.linspace(0.0, 1.0, 6)
        for column in range(20):
            np.testing.assert_allclose(field.values[2:8, column], expected, atol=1e-6)
        self.assertTrue(np.isnan(field.values[0]).all())
        self.assertTrue(np.isnan(field.values[-1]).all())

    def test_annulus_matches_log_profile(self):
        mask, r = annulus_mask()
        field = solve_laplace(mask, tol=1e-6)
        analytic = np.log(r / 30) / np.log(10 / 30)
        ring = (r >= 12) & (r <= 28)
        self.assertLess(np.abs(field.values[ring] - analytic[ring]).max(), 1e-2)

    def test_maximum_principle(self):
        field = solve_laplace(annulus_mask()[0])
        inside = field.values[field.domain]
        self.assertGreaterEqual(inside.min(), -1e-9)
        self.assertLessEqual(inside.max(), 1 + 1e-9)

    def test_equal_boundary_values_give_constant_field(self):
        field = solve_laplace(annulus_mask(41, 6, 16)[0], outer_value=1.0, inner_value=1.0)
        np.testing.assert_allclose(field.values[field.domain], 1.0, atol=1e-9)

    def test_jacobi_agrees_with_sor(self):
        mask = annulus_mask(33, 4, 12)[0]
        sor = solve_laplace(mask, tol=1e-10)
        jacobi = solve_laplace(mask, tol=1e-9, method="jacobi")
        np.testing.assert_allclose(sor.values[sor.domain], jacobi.values[jacobi.domain], atol=1e-5)
        self.assertLess(sor.iterations, jacobi.iterations)

    def test_clamped_pixels_hold_boundary_values(self):
        field = solve_laplace(annulus_mask(41, 6, 16)[0])
        clamped = field.values[field.clamped]
        self.assertTrue(np.isin(clamped, (0.0, 0.5, 1.0)).all())

    def test_non_convergence_reports_iterations(self):
        with self.assertRaises(ConvergenceError) as ctx:
            solve_laplace(annulus_mask()[0], max_iter=3)
        self.assertEqual(ctx.exception.iterations, 3)
        self.assertGreater(ctx.exception.residual, 0)

    def test_empty_domain_raises(self):
        with self.assertRaises(ValueError):
            solve_laplace(np.full((8, 8), BG))

    def test_invalid_labels_raise(self):
        mask = ribbon_mask()
        mask[0, 0] = 7
        with self.assertRaises(ValueError):
            solve_laplace(mask)

    def test_bad_relaxation_factor_raises(self):
        with self.assertRaises(ValueError):
            solve_laplace(ribbon_mask(), omega=2.0)

    def test_floating_component_is_skipped(self):
        with self.assertLogs("parcellation.cortexfield", level="WARNING"):
            field = solve_laplace(np.full((6, 6), GM))
        self.assertFalse(field.domain.any())
        self.assertTrue(np.isnan(field.values).all())


class GradientTests(SimpleTestCase):
    def test_linear_ramp_has_constant_gradient(self):
        values = np.tile(np.arange(10) * 0.1, (5, 1))
        domain = np.ones_like(values, dtype=bool)
        vf = gradient(ScalarField(values=values, domain=domain, clamped=np.zeros_like(domain)))
        np.testing.assert_allclose(vf.dx, 0.1, atol=1e-12)
        np.testing.assert_allclose(vf.dy, 0.0, atol=1e-12)

    def test_constant_field_has_zero_gradient(self):
        domain = np.ones((6, 6), dtype=bool)
        vf = gradient(ScalarField(values=np.full((6, 6), 0.4), domain=domain, clamped=~domain))
        self.assertFalse(vf.dx.any() or vf.dy.any())

    def test_annulus_gradient_points_to_centre(self):
        mask, r = annulus_mask()
        vf = gradient(solve_laplace(mask))
        c = 40
        for oy, ox in ((0, 20), (-20, 0), (14, -14), (-14, 14)):
            y, x = c + oy, c + ox
            got = math.atan2(vf.dy[y, x], vf.dx[y, x])
            want = math.atan2(-oy, -ox)
            diff = abs((got - want + math.pi) % (2 * math.pi) - math.pi)
            self.assertLess(math.degrees(diff), 5.0)


class OrientationTests(SimpleTestCase):
    def test_uniform_up(self):
        domain = np.ones((8, 8), dtype=bool)
        vf = VectorField(dy=-np.ones((8, 8)), dx=np.zeros((8, 8)), domain=domain)
        self.assertAlmostEqual(dominant_orientation(vf), UP)

    def test_symmetric_spread_around_up(self):
        dy = np.empty((4, 4))
        dx = np.empty((4, 4))
        for i, offset in enumerate((math.radians(10), -math.radians(10))):
            dx[i::2] = math.cos(UP + offset)
            dy[i::2] = -math.sin(UP + offset)
        vf = VectorField(dy=dy, dx=dx, domain=np.ones((4, 4), dtype=bool))
        self.assertAlmostEqual(dominant_orientation(vf), UP, places=9)

    def test_matches_vector_sum_oracle(self):
        rng = make_rng(0)
        dy, dx = rng.normal(size=(2, 20, 20))
        domain = rng.random((20, 20)) < 0.6
        vf = VectorField(dy=dy, dx=dx, domain=domain)
        norm = np.hypot(dy, dx)
        sy = sum(-dy[i, j] / norm[i, j] for i, j in zip(*np.nonzero(domain)))
        sx = sum(dx[i, j] / norm[i, j] for i, j in zip(*np.nonzero(domain)))
        self.assertAlmostEqual(dominant_orientation(vf), math.atan2(sy, sx), delta=1e-6)

    def test_region_is_clipped(self):
        dy = np.zeros((10, 10))
        dx = np.zeros((10, 10))
        dx[:, :5] = 1.0
        dy[:, 5:] = -1.0
        vf = VectorField(dy=dy, dx=dx, domain=np.ones((10, 10), dtype=bool))
        self.assertAlmostEqual(dominant_orientation(vf, (-5, 20, 6, 30)), UP)
        self.assertAlmostEqual(dominant_orientation(vf, (0, 10, -3, 4)), 0.0)

    def test_left_pointing_field_returns_pi(self):
        vf = VectorField(dy=np.zeros((3, 3)), dx=-np.ones((3, 3)), domain=np.ones((3, 3), dtype=bool))
        self.assertEqual(dominant_orientation(vf), math.pi)

    def test_undefined_orientation(self):
        zero = VectorField(dy=np.zeros((3, 3)), dx=np.zeros((3, 3)), domain=np.ones((3, 3), dtype=bool))
        with self.assertRaises(OrientationUndefined):
            dominant_orientation(zero)
        opposite = VectorField(dy=np.zeros((1, 2)), dx=np.array([[1.0, -1.0]]), domain=np.ones((1, 2), dtype=bool))
        with self.assertRaises(OrientationUndefined):
            dominant_orientation(opposite)

    def test_angle_to_up(self):
        self.assertAlmostEqual(angle_to_up(0.0), UP)
        self.assertAlmostEqual(angle_to_up(UP), 0.0)
        self.assertEqual(enlarged_size(100), 142)


class RotationTests(SimpleTestCase):
    def test_zero_angle_is_identity(self):
        patch = make_rng(1).random((9, 7))
        np.testing.assert_array_equal(rotate_patch(patch, 0.0), patch)

    def test_quarter_turn_moves_right_to_top(self):
        patch = np.zeros((5, 5), dtype=np.uint8)
        patch[2, 4] = 1
        rotated = rotate_patch(patch, UP, order=0)
        self.assertEqual(rotated[0, 2], 1)
        self.assertEqual(int(rotated.sum()), 1)

    def test_four_quarter_turns_restore_labels(self):
        labels = make_rng(2).integers(0, 6, size=(3, 12, 12)).astype(np.uint8)
        rotated = labels
        for _ in range(4):
            rotated = rotate_patch(rotated, UP, order=0)
        np.testing.assert_array_equal(rotated, labels)

    def test_forward_and_back_on_smooth_image(self):
        yy, xx = np.indices((41, 41))
        image = np.sin(yy / 6.0) + np.cos(xx / 7.0)
        back = rotate_patch(rotate_patch(image, 0.5), -0.5)
        np.testing.assert_allclose(back[12:29, 12:29], image[12:29, 12:29], atol=0.05)

    def test_rotated_ribbon_points_up(self):
        theta = math.radians(30)
        mask = tilted_ribbon(theta)
        region = (28, 68, 28, 68)
        original = dominant_orientation(gradient(solve_laplace(mask)), region)
        self.assertLess(abs(math.degrees(original - theta)), 5.0)

        rotated = rotate_patch(mask, angle_to_up(theta), order=0)
        upright = dominant_orientation(gradient(solve_laplace(rotated)), region)
        self.assertLess(abs(math.degrees(upright - UP)), 2.0)


class ExportTests(SimpleTestCase):
    def test_field_artifacts(self):
        mask = annulus_mask(41, 6, 16)[0]
        field = solve_laplace(mask)
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            export_field(field, tmp / "field.ptnsr")
            field_ppm(field, tmp / "field.ppm")
            orientation_ppm(gradient(field), tmp / "orientation.ppm", step=8)
            values = read_ptnsr(tmp / "field.ptnsr")
            self.assertEqual(read_ppm(tmp / "field.ppm").shape, (41, 41, 3))
            self.assertEqual(read_ppm(tmp / "orientation.ppm").shape, (41, 41, 3))
        np.testing.assert_allclose(values[field.domain], field.values[field.domain], atol=1e-6)
        self.assertTrue((values[~field.domain] == -1).all())
