import json
import unittest

import torch

from common.exceptions import ContractViolation
from main.forms import LossWeights
from main.losses import (CANONICAL_FRAME, ConfidenceMap, LossReport, PointMap, distill_loss, distill_terms,
                         photometric_loss, photometric_terms, render_supervision, total_loss)
from main.models import SplatCamModel
from main.scenegen import generate_scene, oracle_gaussians, sample_training_clip
from main.selftest import tiny_model_config, tiny_scene_config


class PhotometricTest(unittest.TestCase):
    def test_mse_only_without_backend(self):
        a, b = torch.zeros(1, 2, 2, 3), torch.full((1, 2, 2, 3), 0.5)
        self.assertEqual(set(photometric_terms(a, b)), {"img_mse"})
        self.assertAlmostEqual(float(photometric_loss(a, b)), 0.25)

    def test_perceptual_backend_is_weighted(self):
        a, b = torch.zeros(1, 2, 2, 3), torch.full((1, 2, 2, 3), 0.5)
        weights = LossWeights(img_mse=0.0, img_perceptual=2.0)
        loss = photometric_loss(a, b, perceptual=lambda x, y: (x - y).abs().mean(), weights=weights)
        self.assertAlmostEqual(float(loss), 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ContractViolation):
            photometric_loss(torch.zeros(1, 2, 2, 3), torch.zeros(1, 3, 2, 3))


class DistillTest(unittest.TestCase):
    def test_zero_at_prior(self):
        points = torch.randn(2, 3, 3, 3)
        confidence = torch.full((2, 3, 3), 0.5)
        loss = distill_loss(PointMap(points), ConfidenceMap(confidence), PointMap(points.clone()),
                            ConfidenceMap(confidence.clone(), allow_zero=True))
        self.assertEqual(float(loss), 0.0)

    def test_invalid_pixels_are_ignored(self):
        prior = torch.zeros(1, 2, 2, 3)
        pred = prior.clone()
        pred[0, 0, 0] = 10.0
        valid = torch.ones(1, 2, 2, dtype=torch.bool)
        valid[0, 0, 0] = False
        confidence = torch.ones(1, 2, 2)
        terms = distill_terms(PointMap(pred, valid), ConfidenceMap(confidence), PointMap(prior),
                              ConfidenceMap(confidence, allow_zero=True))
        self.assertEqual(float(terms["distill_point"]), 0.0)

    def test_prior_gradient_is_stopped(self):
        prior = torch.randn(1, 2, 2, 3, requires_grad=True)
        pred = torch.randn(1, 2, 2, 3, requires_grad=True)
        confidence = torch.ones(1, 2, 2)
        distill_loss(PointMap(pred), ConfidenceMap(confidence), PointMap(prior),
                     ConfidenceMap(confidence, allow_zero=True)).backward()
        self.assertIsNone(prior.grad)
        self.assertIsNotNone(pred.grad)

    def test_frames_must_agree(self):
        points = torch.zeros(1, 1, 1, 3)
        confidence = ConfidenceMap(torch.ones(1, 1, 1))
        with self.assertRaises(ContractViolation):
            distill_loss(PointMap(points), confidence, PointMap(points, frame="camera"), confidence)
        self.assertEqual(PointMap(points).frame, CANONICAL_FRAME)

    def test_confidence_must_be_positive(self):
        with self.assertRaises(ContractViolation):
            ConfidenceMap(torch.zeros(2))
        ConfidenceMap(torch.zeros(2), allow_zero=True)


class LossReportTest(unittest.TestCase):
    def test_weighted_sum_and_json(self):
        report = LossReport(torch.zeros(()), {"a": torch.tensor(2.0), "b": torch.tensor(3.0)}, {"a": 0.5})
        report.total = report.weighted_sum()
        self.assertEqual(float(report.total), 4.0)
        row = json.loads(report.to_json(step=3))
        self.assertEqual(row["step"], 3)
        self.assertEqual(row["components"], {"a": 2.0, "b": 3.0})
        self.assertTrue(report.is_finite())

    def test_first_non_finite(self):
        report = LossReport(torch.tensor(float("nan")), {"a": torch.tensor(1.0), "b": torch.tensor(float("inf"))})
        self.assertFalse(report.is_finite())
        self.assertEqual(report.first_non_finite(), "b")


class TotalLossTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        scene = generate_scene(3, tiny_scene_config())
        cls.clip = sample_training_clip(scene, 2, 2, start=0)

    def _output(self, phase):
        torch.manual_seed(0)
        model = SplatCamModel(tiny_model_config())
        images = self.clip.frames.images[None].float()
        intrinsics = self.clip.frames.intrinsics[None].float()
        return model(images, intrinsics, phase=phase)

    def test_nvs_components(self):
        report = total_loss(self._output("nvs"), [self.clip], "nvs")
        self.assertEqual(set(report.components), {"img_mse", "camera_mse", "camera_align"})
        self.assertEqual(report.weights["camera_mse"], LossWeights().camera)
        self.assertTrue(report.is_finite())

    def test_camera_weight_override(self):
        report = total_loss(self._output("nvs"), [self.clip], "nvs", camera_weight=0.0)
        self.assertAlmostEqual(float(report.total), float(report.components["img_mse"]), places=6)

    def test_distill_components(self):
        report = total_loss(self._output("distill"), [self.clip], "distill")
        self.assertEqual(set(report.components), {"distill_point", "distill_conf"})
        report.total.backward()

    def test_distill_needs_pointmap(self):
        with self.assertRaises(ContractViolation):
            total_loss(self._output("nvs"), [self.clip], "distill")

    def test_unknown_phase(self):
        with self.assertRaises(ContractViolation):
            total_loss(self._output("nvs"), [self.clip], "pretrain")

    def test_oracle_supervision_is_near_exact(self):
        gaussians = oracle_gaussians(self.clip, 0, dtype=torch.float64)
        rendered, targets = render_supervision(gaussians, self.clip)
        self.assertEqual(rendered.shape, targets.shape)
        self.assertLess(float(((rendered[0] - targets[0]) ** 2).mean()), 1e-4)
