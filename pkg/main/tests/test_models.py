import os
import tempfile
import unittest

import torch

from common.exceptions import ConfigError, ContractViolation, DataError
from main.dualquat import IDENTITY_DQ, check_unit
from main.forms import apply_ablations
from main.models import (SplatCamModel, count_parameters, load_checkpoint, pixel_unshuffle_tokens, quat_trans_to_dq,
                         read_checkpoint, save_checkpoint)
from main.attention import DecoderBlock
from main.selftest import decoder_block_check, end_to_end_check, modulation_outputs_identical, tiny_model_config


def _frames(batch=2, frames=3, seed=0):
    generator = torch.Generator().manual_seed(seed)
    images = torch.rand(batch, frames, 3, 16, 16, generator=generator)
    intrinsics = torch.tensor([14.0, 14.0, 8.0, 8.0]).expand(batch, frames, 4)
    return images, intrinsics


class ForwardTest(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = SplatCamModel(tiny_model_config())

    def test_one_gaussian_per_pixel(self):
        images, intrinsics = _frames()
        with torch.no_grad():
            output = self.model(images, intrinsics)
        gaussians = output.gaussians
        self.assertEqual(tuple(gaussians.means.shape), (2, 3 * 16 * 16, 3))
        self.assertEqual(tuple(gaussians.colors.shape), (2, 3 * 16 * 16, 3))
        self.assertEqual(tuple(output.poses.shape), (2, 3, 8))
        self.assertEqual(int(gaussians.source_frame[-1]), 2)
        self.assertEqual(int(gaussians.source_pixel[-1]), 16 * 16 - 1)
        gaussians[0].validate()

    def test_first_pose_is_identity(self):
        images, intrinsics = _frames()
        with torch.no_grad():
            poses = self.model(images, intrinsics).poses
        identity = torch.tensor(IDENTITY_DQ)
        self.assertTrue(torch.equal(poses[:, 0], identity.expand(2, 8)))
        check_unit(poses)

    def test_untrained_camera_head_predicts_identity(self):
        images, intrinsics = _frames()
        with torch.no_grad():
            poses = self.model(images, intrinsics).poses
        self.assertTrue(torch.allclose(poses, torch.tensor(IDENTITY_DQ).expand(2, 3, 8)))

    def test_attribute_ranges(self):
        images, intrinsics = _frames()
        with torch.no_grad():
            gaussians = self.model(images, intrinsics).gaussians
        self.assertTrue(bool(((gaussians.opacities > 0) & (gaussians.opacities < 1)).all()))
        self.assertTrue(bool((gaussians.scales > 0).all()))
        self.assertTrue(bool(((gaussians.colors > 0) & (gaussians.colors < 1)).all()))
        self.assertTrue(torch.allclose(gaussians.rotations.norm(dim=-1), torch.ones(2, 3 * 256), atol=1e-5))

    def test_pointmap_only_in_distill_phase(self):
        images, intrinsics = _frames()
        with torch.no_grad():
            nvs = self.model(images, intrinsics, phase="nvs")
            distill = self.model(images, intrinsics, phase="distill")
        with self.assertRaises(ContractViolation):
            nvs.require_pointmap()
        pointmap, confidence = distill.require_pointmap()
        self.assertEqual(tuple(pointmap.shape), (2, 3, 16, 16, 3))
        self.assertEqual(tuple(confidence.shape), (2, 3, 16, 16))
        self.assertTrue(bool((confidence > 0).all()))

    def test_unknown_phase(self):
        images, intrinsics = _frames()
        with self.assertRaises(ContractViolation):
            self.model(images, intrinsics, phase="finetune")

    def test_too_many_views(self):
        images, intrinsics = _frames(batch=1, frames=5)
        with self.assertRaises(ContractViolation):
            self.model(images, intrinsics)

    def test_wrong_resolution(self):
        with self.assertRaises(ContractViolation):
            self.model(torch.rand(1, 2, 3, 24, 24))

    def test_runs_without_intrinsics(self):
        images, _ = _frames(batch=1, frames=2)
        with torch.no_grad():
            output = self.model(images)
        self.assertEqual(len(output.gaussians[0]), 2 * 256)

    def test_single_view(self):
        images, intrinsics = _frames(batch=1, frames=1)
        with torch.no_grad():
            output = self.model(images, intrinsics)
        self.assertEqual(tuple(output.poses.shape), (1, 1, 8))


class ParameterizationTest(unittest.TestCase):
    def test_pixel_unshuffle_layout(self):
        tokens = torch.arange(16, dtype=torch.float32).reshape(1, 1, 4, 4)
        pixels = pixel_unshuffle_tokens(tokens, (2, 2), 2, 1)
        self.assertEqual(tuple(pixels.shape), (1, 1, 4, 4, 1))
        # token 1 covers the top-right 2x2 block
        self.assertEqual(pixels[0, 0, 0, 2, 0].item(), 4.0)
        self.assertEqual(pixels[0, 0, 1, 1, 0].item(), 3.0)

    def test_quat_trans_head_at_identity(self):
        raw = torch.tensor([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        self.assertTrue(torch.allclose(quat_trans_to_dq(raw), torch.tensor(IDENTITY_DQ)))

    def test_quat_trans_model(self):
        torch.manual_seed(0)
        model = SplatCamModel(tiny_model_config(pose_parameterization="quat_trans"))
        self.assertEqual(model.camera_head.out_features, 7)
        images, intrinsics = _frames(batch=1)
        with torch.no_grad():
            poses = model(images, intrinsics).poses
        self.assertTrue(torch.allclose(poses, torch.tensor(IDENTITY_DQ).expand(1, 3, 8)))

    def test_modulation_is_exact_identity_at_init(self):
        self.assertEqual(modulation_outputs_identical(), [])


class StageTransitionTest(unittest.TestCase):
    def test_freeze_distill_heads(self):
        model = SplatCamModel(tiny_model_config())
        model.freeze_distill_heads()
        for head in model.distill_heads():
            self.assertFalse(any(p.requires_grad for p in head.parameters()))
        self.assertTrue(all(p.requires_grad for p in model.center_head.parameters()))
        model.freeze_distill_heads(False)
        self.assertTrue(all(p.requires_grad for p in model.pointmap_head.parameters()))

    def test_seed_centers(self):
        model = SplatCamModel(tiny_model_config())
        model.seed_centers_from_pointmap()
        self.assertTrue(torch.equal(model.center_head.weight, model.pointmap_head.weight))
        self.assertTrue(torch.equal(model.center_head.bias, model.pointmap_head.bias))


class AblationTest(unittest.TestCase):
    def test_switches_and_records(self):
        config = apply_ablations(tiny_model_config(), ["no_cna", "full_camera_attention"])
        self.assertFalse(config.cna)
        self.assertFalse(config.causal_mask)
        self.assertEqual(config.ablations, ("no_cna", "full_camera_attention"))

    def test_unknown_ablation(self):
        with self.assertRaises(ConfigError):
            apply_ablations(tiny_model_config(), ["no_such_thing"])

    def test_no_cna_model_has_fewer_parameters(self):
        full = SplatCamModel(tiny_model_config())
        ablated = SplatCamModel(apply_ablations(tiny_model_config(), ["no_cna"]))
        self.assertLess(count_parameters(ablated), count_parameters(full))


class GradientTest(unittest.TestCase):
    def test_decoder_block_parameters(self):
        report = decoder_block_check()
        self.assertTrue(report.passed, f"max rel err {report.max_relative_error:.2e}")
        self.assertGreaterEqual(report.element_count, len(list(DecoderBlock(tiny_model_config()).parameters())))

    def test_end_to_end_covers_every_parameter(self):
        report = end_to_end_check(max_elements=2)
        self.assertTrue(report.passed, f"max rel err {report.max_relative_error:.2e}")
        self.assertGreaterEqual(report.element_count, len(list(SplatCamModel(tiny_model_config()).parameters())))


class CheckpointTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_round_trip(self):
        torch.manual_seed(0)
        model = SplatCamModel(apply_ablations(tiny_model_config(), ["no_modulation"]))
        path = save_checkpoint(os.path.join(self.tmp.name, "ckpt", "model.pt"), model, phase="nvs", seed=7,
                               extra={"config_digest": "abc"})
        loaded, payload = load_checkpoint(path)
        self.assertEqual(payload["seed"], 7)
        self.assertEqual(payload["phase"], "nvs")
        self.assertEqual(payload["ablations"], ["no_modulation"])
        self.assertEqual(loaded.config, model.config)
        images, intrinsics = _frames(batch=1)
        with torch.no_grad():
            a = model(images, intrinsics).gaussians.means
            b = loaded(images, intrinsics).gaussians.means
        self.assertTrue(torch.equal(a, b))
        self.assertFalse(os.path.exists(path + ".tmp"))

    def test_missing_file(self):
        with self.assertRaises(DataError):
            read_checkpoint(os.path.join(self.tmp.name, "absent.pt"))

    def test_foreign_file(self):
        path = os.path.join(self.tmp.name, "foreign.pt")
        torch.save({"weights": torch.zeros(2)}, path)
        with self.assertRaises(DataError):
            read_checkpoint(path)

    def test_garbage_file(self):
        path = os.path.join(self.tmp.name, "garbage.pt")
        with open(path, "wb") as handle:
            handle.write(b"not a checkpoint")
        with self.assertRaises(DataError):
            read_checkpoint(path)
