import math
import unittest

import torch

from common.exceptions import ContractViolation, DataError
from main.dualquat import (IDENTITY_DQ, PoseSE3, camera_centers, camera_loss, camera_loss_terms, canonicalize_sign,
                           check_pose_set, check_unit, dq_conjugate, dq_mul, dq_to_matrix, dq_to_se3, identity_dq,
                           format_pose_lines, matrix_to_dq, normalize_raw_dq, parse_pose_lines, random_unit_dq,
                           se3_exp, se3_to_dq, with_identity_first)
from main.selftest import run_dualquat, toy_pose_fit


def _generator(seed=0):
    return torch.Generator().manual_seed(seed)


class AlgebraTest(unittest.TestCase):
    def test_identity_is_neutral(self):
        a = random_unit_dq(_generator(), 5)
        identity = identity_dq(5, dtype=torch.float64)
        self.assertTrue(torch.allclose(dq_mul(identity, a), canonicalize_sign(a), atol=1e-12))
        self.assertTrue(torch.allclose(dq_mul(a, identity), canonicalize_sign(a), atol=1e-12))

    def test_conjugate_is_inverse(self):
        a = random_unit_dq(_generator(1), 8)
        product = dq_mul(a, dq_conjugate(a))
        self.assertTrue(torch.allclose(product, identity_dq(8, dtype=torch.float64), atol=1e-12))

    def test_product_is_unit(self):
        generator = _generator(2)
        a, b = random_unit_dq(generator, 16), random_unit_dq(generator, 16)
        check_unit(dq_mul(a, b))

    def test_non_unit_operand_rejected(self):
        a = random_unit_dq(_generator(3), 2)
        with self.assertRaises(ContractViolation):
            dq_mul(2.0 * a, a)

    def test_sign_canonicalization(self):
        a = random_unit_dq(_generator(4), 6)
        self.assertTrue(torch.equal(canonicalize_sign(a), canonicalize_sign(-a)))
        self.assertTrue(bool((canonicalize_sign(a)[:, 0] >= 0).all()))

    def test_canonical_sign_with_zero_scalar(self):
        dq = torch.tensor([0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        self.assertEqual(float(canonicalize_sign(dq)[1]), 1.0)


class NormalizeTest(unittest.TestCase):
    def test_output_is_unit_and_idempotent(self):
        raw = torch.randn(10, 8, generator=_generator(5), dtype=torch.float64)
        raw[:, 0] = raw[:, 0].abs() + 0.1
        once = normalize_raw_dq(raw)
        check_unit(once)
        self.assertTrue(torch.allclose(normalize_raw_dq(once), once, atol=1e-12))

    def test_identity_bias_gives_identity(self):
        raw = torch.tensor(IDENTITY_DQ, dtype=torch.float64)
        self.assertTrue(torch.equal(normalize_raw_dq(raw), raw))

    def test_zero_real_part(self):
        raw = torch.zeros(8, dtype=torch.float64)
        raw[4] = 1.0
        with self.assertRaises(ContractViolation):
            normalize_raw_dq(raw)


class ConversionTest(unittest.TestCase):
    def test_matrix_round_trip(self):
        a = random_unit_dq(_generator(6), 12)
        self.assertTrue(torch.allclose(matrix_to_dq(dq_to_matrix(a)), canonicalize_sign(a), atol=1e-9))

    def test_dq_translation_matches_se3(self):
        rotation = torch.eye(3, dtype=torch.float64)
        translation = torch.tensor([0.3, -0.2, 1.5], dtype=torch.float64)
        pose = dq_to_se3(se3_to_dq(PoseSE3(rotation, translation)))
        self.assertTrue(torch.allclose(pose.translation, translation, atol=1e-12))

    def test_camera_center(self):
        rotation = torch.eye(3, dtype=torch.float64)
        pose = PoseSE3(rotation, torch.tensor([0.0, 0.0, -2.0], dtype=torch.float64))
        self.assertTrue(torch.allclose(camera_centers(pose), torch.tensor([0.0, 0.0, 2.0], dtype=torch.float64)))

    def test_zero_twist_is_identity(self):
        pose = se3_exp(torch.zeros(6, dtype=torch.float64))
        self.assertTrue(torch.allclose(pose.rotation, torch.eye(3, dtype=torch.float64)))
        self.assertTrue(torch.allclose(pose.translation, torch.zeros(3, dtype=torch.float64)))

    def test_rotation_twist_angle(self):
        twist = torch.tensor([0.0, 0.0, math.pi / 2, 0.0, 0.0, 0.0], dtype=torch.float64)
        rotation = se3_exp(twist).rotation
        expected = torch.tensor([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
        self.assertTrue(torch.allclose(rotation, expected, atol=1e-12))


class PoseSetTest(unittest.TestCase):
    def test_identity_first(self):
        poses = with_identity_first(random_unit_dq(_generator(7), 3))
        self.assertEqual(tuple(poses.shape), (4, 8))
        check_pose_set(poses)

    def test_first_pose_must_be_identity(self):
        poses = random_unit_dq(_generator(8), 3)
        with self.assertRaises(ContractViolation):
            check_pose_set(poses)

    def test_pose_file_round_trip(self):
        poses = with_identity_first(random_unit_dq(_generator(9), 2))
        indices, parsed = parse_pose_lines(format_pose_lines(poses, [0, 3, 6]))
        self.assertEqual(indices, [0, 3, 6])
        self.assertTrue(torch.equal(parsed, poses))

    def test_bad_pose_line(self):
        with self.assertRaises(DataError):
            parse_pose_lines("0 1 0 0 0 0 0 0\n")


class CameraLossTest(unittest.TestCase):
    def setUp(self):
        generator = _generator(10)
        self.gt = with_identity_first(random_unit_dq(generator, 3, translation_scale=0.5))
        self.pred = with_identity_first(random_unit_dq(generator, 3, translation_scale=0.5))

    def test_zero_at_truth(self):
        self.assertLess(float(camera_loss(self.gt, self.gt)), 1e-12)
        self.assertLess(float(camera_loss(self.gt, self.gt, parameterization="quat_trans")), 1e-12)

    def test_double_cover(self):
        flipped = torch.cat((self.pred[:1], -self.pred[1:]))
        self.assertAlmostEqual(float(camera_loss(self.pred, self.gt)), float(camera_loss(flipped, self.gt)),
                               places=12)

    def test_terms(self):
        terms = camera_loss_terms(self.pred, self.gt)
        self.assertEqual(set(terms), {"camera_mse", "camera_align"})
        self.assertEqual(set(camera_loss_terms(self.pred, self.gt, align=False)), {"camera_mse"})
        self.assertGreater(float(terms["camera_align"]), 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ContractViolation):
            camera_loss(self.pred[:3], self.gt)

    def test_unknown_parameterization(self):
        with self.assertRaises(ContractViolation):
            camera_loss(self.pred, self.gt, parameterization="euler")

    def test_toy_fit_descends(self):
        history = toy_pose_fit(seed=0, steps=100)
        self.assertLess(history[-1], history[0])
        for earlier, later in zip(history, history[1:]):
            self.assertLessEqual(later, earlier)


class SelfTestSuiteTest(unittest.TestCase):
    def test_algebraic_checks(self):
        results = {r.name: r for r in run_dualquat()}
        for name in ("closure", "conjugate_product_identity", "se3_round_trip", "product_matches_se3_composition",
                     "loss_at_truth", "double_cover_insensitive", "inverse_involution"):
            self.assertTrue(results[name].passed, f"{name}: {results[name].detail}")
