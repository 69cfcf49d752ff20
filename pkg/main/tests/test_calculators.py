import base64
import os
import tempfile
import unittest

import pandas as pd
import torch

from common.exceptions import ContractViolation
from main.calculators import (PSNR_CAP, PhotometricTarget, PoseMetricReport, align_eval_poses, ate,
                              build_metric_report, confidence_auc, draw_trajectory, is_normalizable,
                              normalize_trajectory, pointmap_error, pose_metrics, psnr, refine_pose_photometric, rpe,
                              rpe_terms, scene_extent, similarity_align, ssim, write_metric_report)
from main.dualquat import IDENTITY_DQ, PoseSE3, camera_centers, dq_to_se3, random_unit_dq, se3_to_dq
from main.forms import RenderConfig
from main.gsplat import CameraModel, render
from main.selftest import random_gaussians

F64 = torch.float64


def _trajectory(seed, count=5):
    return random_unit_dq(torch.Generator().manual_seed(seed), count)


def _from_centres(rotation, centres):
    return PoseSE3(rotation, -(rotation @ centres.unsqueeze(-1)).squeeze(-1))


class ImageMetricTest(unittest.TestCase):
    def test_psnr(self):
        a = torch.zeros(4, 4, 3)
        self.assertAlmostEqual(psnr(a, a + 0.1), 20.0, places=5)
        self.assertEqual(psnr(a, a), PSNR_CAP)

    def test_psnr_falls_as_noise_grows(self):
        generator = torch.Generator().manual_seed(1)
        image = torch.rand(12, 12, 3, generator=generator, dtype=F64)
        noise = torch.randn(12, 12, 3, generator=generator, dtype=F64)
        scores = [psnr(image + sigma * noise, image) for sigma in (0.01, 0.02, 0.05, 0.1, 0.2)]
        self.assertTrue(all(b < a for a, b in zip(scores, scores[1:])))

    def test_ssim(self):
        generator = torch.Generator().manual_seed(0)
        a = torch.rand(16, 16, 3, generator=generator)
        b = (a + 0.2 * torch.rand(16, 16, 3, generator=generator)).clamp(0, 1)
        self.assertAlmostEqual(ssim(a, a), 1.0, places=9)
        self.assertLess(ssim(a, b), 1.0)
        self.assertAlmostEqual(ssim(a, b), ssim(b, a), places=12)

    def test_shapes_must_agree(self):
        with self.assertRaises(ContractViolation):
            psnr(torch.zeros(4, 4, 3), torch.zeros(4, 5, 3))
        with self.assertRaises(ContractViolation):
            ssim(torch.zeros(4, 4), torch.zeros(4, 4))


class TrajectoryTest(unittest.TestCase):
    def test_normalize(self):
        normalized = normalize_trajectory(_trajectory(1))
        self.assertTrue(torch.allclose(normalized[0], torch.tensor(IDENTITY_DQ, dtype=F64), atol=1e-12))
        self.assertAlmostEqual(float(dq_to_se3(normalized[-1]).translation.norm()), 1.0, places=12)
        self.assertTrue(torch.allclose(normalize_trajectory(normalized), normalized, atol=1e-12))

    def test_zero_translation_cannot_normalize(self):
        still = torch.tensor([IDENTITY_DQ] * 3, dtype=F64)
        self.assertFalse(is_normalizable(still))
        self.assertTrue(is_normalizable(_trajectory(1)))
        with self.assertRaises(ContractViolation):
            normalize_trajectory(still)

    def test_ate_of_offset_trajectory(self):
        gt = dq_to_se3(_trajectory(2))
        offset = torch.tensor([0.3, -0.4, 0.0], dtype=F64)
        pred = _from_centres(gt.rotation, camera_centers(gt) + offset)
        self.assertAlmostEqual(ate(pred, gt), 0.5, places=12)
        self.assertAlmostEqual(ate(gt, gt), 0.0, places=12)

    def test_rpe_is_local(self):
        translations = torch.tensor([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0], [0.4, 0, 0]], dtype=F64)
        rotation = torch.eye(3, dtype=F64).expand(5, 3, 3)
        gt = PoseSE3(rotation, translations)
        shifted = translations.clone()
        shifted[3:] += torch.tensor([0.0, 0.2, 0.0], dtype=F64)
        trans, rot = rpe_terms(PoseSE3(rotation, shifted), gt)
        self.assertTrue(torch.allclose(trans, torch.tensor([0.0, 0.0, 0.2, 0.0], dtype=F64), atol=1e-12))
        self.assertEqual(float(rot.abs().max()), 0.0)
        self.assertAlmostEqual(rpe(PoseSE3(rotation, shifted), gt)[0], 0.1, places=12)

    def test_pose_metrics_ignore_global_scale(self):
        gt = _trajectory(3)
        se3 = dq_to_se3(gt)
        scaled = se3_to_dq(PoseSE3(se3.rotation, 3.0 * se3.translation))
        report = pose_metrics(scaled, gt)
        self.assertLess(report.ate, 1e-9)
        self.assertLess(report.rpe_rot, 1e-4)
        self.assertFalse(report.aligned)

    def test_report_values_are_non_negative(self):
        with self.assertRaises(ContractViolation):
            PoseMetricReport(-1.0, 0.0, 0.0)
        with self.assertRaises(ContractViolation):
            pose_metrics(_trajectory(4), _trajectory(4), align="photometric")


class SimilarityTest(unittest.TestCase):
    def test_recovers_similarity(self):
        gt = dq_to_se3(_trajectory(5, count=6))
        q = dq_to_se3(random_unit_dq(torch.Generator().manual_seed(9))).rotation
        u = torch.tensor([0.5, -1.0, 2.0], dtype=F64)
        centres = (q.T @ (camera_centers(gt) - u).unsqueeze(-1)).squeeze(-1) / 2.0
        pred = _from_centres(gt.rotation @ q, centres)
        result = similarity_align(pred, gt)
        self.assertFalse(result.degenerate)
        self.assertAlmostEqual(result.scale, 2.0, places=9)
        self.assertLess(ate(result.poses, gt), 1e-9)
        self.assertTrue(torch.allclose(result.poses.rotation, gt.rotation, atol=1e-9))

    def test_alignment_never_increases_ate(self):
        for seed in range(8):
            pred, gt = _trajectory(100 + seed, count=6), _trajectory(200 + seed, count=6)
            result = similarity_align(pred, gt)
            self.assertFalse(result.degenerate)
            self.assertLessEqual(ate(result.poses, gt), ate(pred, gt) + 1e-12)

    def test_two_views_fall_back(self):
        gt = _trajectory(6, count=2)
        result = similarity_align(gt, gt)
        self.assertTrue(result.degenerate)
        self.assertAlmostEqual(result.scale, 1.0, places=9)
        self.assertLess(ate(result.poses, gt), 1e-9)

    def test_collinear_centres_fall_back(self):
        rotation = torch.eye(3, dtype=F64).expand(3, 3, 3)
        gt = _from_centres(rotation, torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]], dtype=F64))
        pred = _from_centres(rotation, torch.tensor([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]], dtype=F64))
        result = similarity_align(pred, gt)
        self.assertTrue(result.degenerate)
        self.assertAlmostEqual(result.scale, 2.0, places=9)
        self.assertLess(ate(result.poses, gt), 1e-9)

    def test_mode_errors(self):
        poses = _trajectory(7)
        with self.assertRaises(ContractViolation):
            align_eval_poses(poses, poses, mode="procrustes")
        with self.assertRaises(ContractViolation):
            align_eval_poses(poses, mode="similarity")
        with self.assertRaises(ContractViolation):
            align_eval_poses(poses, mode="photometric")
        unchanged = align_eval_poses(poses, mode="none")
        self.assertTrue(torch.allclose(unchanged.poses.translation, dq_to_se3(poses).translation))


class PhotometricRefinementTest(unittest.TestCase):
    def setUp(self):
        self.intrinsics = torch.tensor([10.0, 10.0, 6.0, 6.0], dtype=F64)
        self.gaussians = random_gaussians(torch.Generator().manual_seed(3), 30)
        self.config = RenderConfig(cutoff_sigma=None)
        camera = CameraModel.identity(self.intrinsics, 12, 12, dtype=F64)
        self.target = render(self.gaussians, camera, cutoff_sigma=None).image
        self.start = se3_to_dq(PoseSE3(torch.eye(3, dtype=F64), torch.tensor([0.05, 0.0, 0.0], dtype=F64)))

    def test_history_never_increases(self):
        _, history = refine_pose_photometric(self.gaussians, self.start, self.intrinsics, self.target,
                                             render_config=self.config, steps=5)
        self.assertTrue(all(b <= a for a, b in zip(history, history[1:])))
        self.assertLess(history[-1], history[0])

    def test_align_eval_poses_photometric(self):
        target = PhotometricTarget(self.gaussians, self.target[None], self.intrinsics[None], self.config, steps=3)
        result = align_eval_poses(self.start[None], mode="photometric", photometric=target)
        self.assertEqual(tuple(result.poses.shape), (1, 8))
        self.assertEqual(len(result.history), 1)


class ReportTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_report_means_skip_missing_values(self):
        rows = [{"scene": "a", "psnr": 20.0, "lpips": None, "degenerate_alignment": False},
                {"scene": "b", "psnr": 30.0, "lpips": None, "degenerate_alignment": True}]
        report = build_metric_report(rows, "abc", align="similarity")
        self.assertEqual(report["mean"], {"psnr": 25.0, "lpips": None})
        self.assertEqual(report["align"], "similarity")
        json_path, csv_path = write_metric_report(report, os.path.join(self.tmp.name, "eval"))
        self.assertTrue(os.path.exists(json_path))
        table = pd.read_csv(csv_path)
        self.assertEqual(list(table["scene"]), ["a", "b"])

    def test_draw_trajectory(self):
        poses = _trajectory(8)
        encoded = draw_trajectory(poses, gt=poses)
        self.assertTrue(base64.b64decode(encoded).startswith(b"\x89PNG"))
        path = draw_trajectory(poses, path=os.path.join(self.tmp.name, "trajectory.png"))
        self.assertTrue(os.path.exists(path))


class PointMapMetricTest(unittest.TestCase):
    def setUp(self):
        generator = torch.Generator().manual_seed(4)
        self.points = torch.rand(2, 6, 6, 3, generator=generator, dtype=F64)
        self.hits = torch.zeros(2, 6, 6, dtype=torch.bool)
        self.hits[:, 1:5, 1:5] = True

    def test_scene_extent(self):
        points = torch.zeros(1, 2, 2, 3, dtype=F64)
        points[0, 1, 1] = torch.tensor([3.0, 4.0, 0.0], dtype=F64)
        self.assertAlmostEqual(scene_extent(points, torch.ones(1, 2, 2, dtype=torch.bool)), 5.0, places=12)
        with self.assertRaises(ContractViolation):
            scene_extent(points, torch.zeros(1, 2, 2, dtype=torch.bool))

    def test_point_error_is_relative_to_extent(self):
        self.assertEqual(pointmap_error(self.points, self.points, self.hits), 0.0)
        shifted = self.points + torch.tensor([0.0, 0.0, 0.1], dtype=F64)
        self.assertAlmostEqual(pointmap_error(shifted, self.points, self.hits, extent=2.0), 0.05, places=12)
        extent = scene_extent(self.points, self.hits)
        self.assertAlmostEqual(pointmap_error(shifted, self.points, self.hits), 0.1 / extent, places=12)

    def test_background_points_are_ignored(self):
        corrupted = self.points.clone()
        corrupted[~self.hits] = 100.0
        self.assertEqual(pointmap_error(corrupted, self.points, self.hits), 0.0)

    def test_auc(self):
        hits = torch.tensor([False, False, True, True])
        self.assertAlmostEqual(confidence_auc(torch.tensor([0.1, 0.4, 0.35, 0.8]), hits), 0.75, places=12)
        self.assertEqual(confidence_auc(torch.tensor([0.1, 0.2, 0.3, 0.4]), hits), 1.0)
        self.assertEqual(confidence_auc(torch.tensor([0.4, 0.3, 0.2, 0.1]), hits), 0.0)
        self.assertEqual(confidence_auc(torch.ones(4), hits), 0.5)
        self.assertIsNone(confidence_auc(torch.ones(4), torch.ones(4, dtype=torch.bool)))
        with self.assertRaises(ContractViolation):
            confidence_auc(torch.ones(3), hits)
