import os
import tempfile
import unittest

import numpy as np
import torch
from PIL import Image

from common.exceptions import ContractViolation, DataError, SceneGenerationError
from main.dualquat import IDENTITY_DQ, check_unit, dq_to_matrix, dq_to_se3
from main.scenegen import (catmull_rom, derive_seed, ellipsoid_surface_residual, generate_scene, ingest_image_folder,
                           load_scene, read_intrinsics_file, sample_training_clip, save_scene)
from main.selftest import tiny_scene_config


class GenerateSceneTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.config = tiny_scene_config(num_frames=6)
        cls.scene = generate_scene(11, cls.config)

    def test_deterministic_per_seed(self):
        again = generate_scene(11, self.config)
        self.assertTrue(torch.equal(again.frames.images, self.scene.frames.images))
        self.assertTrue(torch.equal(again.poses, self.scene.poses))
        other = generate_scene(12, self.config)
        self.assertFalse(torch.equal(other.frames.images, self.scene.frames.images))

    def test_canonical_normalized_trajectory(self):
        poses = self.scene.poses
        self.assertEqual(tuple(poses.shape), (6, 8))
        self.assertTrue(torch.equal(poses[0], torch.tensor(IDENTITY_DQ, dtype=poses.dtype)))
        check_unit(poses)
        self.assertAlmostEqual(float(dq_to_se3(poses[-1]).translation.norm()), 1.0, places=9)

    def test_shapes_and_ranges(self):
        scene = self.scene
        self.assertEqual(tuple(scene.frames.images.shape), (6, 3, 16, 16))
        self.assertEqual(tuple(scene.pointmap.points.shape), (6, 16, 16, 3))
        self.assertEqual(tuple(scene.target_images.shape), (5, 3, 16, 16))
        self.assertEqual(scene.target_indices, [0.5, 1.5, 2.5, 3.5, 4.5])
        self.assertGreaterEqual(float(scene.frames.images.min()), 0.0)
        self.assertLessEqual(float(scene.frames.images.max()), 1.0)

    def test_depth_matches_pointmap(self):
        for view in (0, 3, 5):
            hit = self.scene.confidence.values[view] > 0
            matrix = dq_to_matrix(self.scene.poses[view])
            camera = self.scene.pointmap.points[view] @ matrix[:3, :3].T + matrix[:3, 3]
            self.assertTrue(torch.allclose(camera[..., 2][hit], self.scene.depth[view][hit], atol=1e-9))

    def test_points_lie_on_primitives(self):
        hit = self.scene.confidence.values[0] > 0
        residual = ellipsoid_surface_residual(self.scene.primitives, self.scene.pointmap.points[0][hit])
        self.assertLess(float(residual.max()), 1e-6)

    def test_unreachable_coverage(self):
        config = tiny_scene_config(min_primitives=1, max_primitives=1, min_coverage=1.0, max_retries=0)
        with self.assertRaises(SceneGenerationError):
            generate_scene(0, config)


class ClipTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.scene = generate_scene(21, tiny_scene_config(num_frames=8, num_targets=2))

    def test_clip_is_renormalized(self):
        clip = sample_training_clip(self.scene, 3, 2, start=1)
        self.assertEqual(clip.frames.frame_indices, [1, 3, 5])
        self.assertTrue(torch.equal(clip.poses[0], torch.tensor(IDENTITY_DQ, dtype=clip.poses.dtype)))
        self.assertAlmostEqual(float(dq_to_se3(clip.poses[-1]).translation.norm()), 1.0, places=9)

    def test_targets_inside_span(self):
        clip = sample_training_clip(self.scene, 3, 2, start=1, num_targets=10)
        self.assertGreater(len(clip.target_indices), 0)
        for position in clip.target_indices:
            self.assertTrue(1 < position < 5)
            self.assertNotIn(position, (3.0,))

    def test_random_start_is_seeded(self):
        a = sample_training_clip(self.scene, 2, 3, generator=torch.Generator().manual_seed(4))
        b = sample_training_clip(self.scene, 2, 3, generator=torch.Generator().manual_seed(4))
        self.assertEqual(a.frames.frame_indices, b.frames.frame_indices)
        self.assertTrue(torch.equal(a.target_images, b.target_images))

    def test_span_too_long(self):
        with self.assertRaises(ContractViolation):
            sample_training_clip(self.scene, 4, 3)

    def test_single_view_has_no_targets(self):
        clip = sample_training_clip(self.scene, 1, 1, start=2)
        self.assertIsNone(clip.target_images)


class SeedTest(unittest.TestCase):
    def test_derive_seed(self):
        self.assertEqual(derive_seed(1, "scene", 3), derive_seed(1, "scene", 3))
        self.assertNotEqual(derive_seed(1, "scene", 3), derive_seed(1, "scene", 4))
        self.assertGreaterEqual(derive_seed(7, "x"), 0)

    def test_spline_passes_through_keys(self):
        keys = torch.tensor([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0], [4.0, 4.0]], dtype=torch.float64)
        values = catmull_rom(keys, torch.tensor([0.0, 1.0, 2.0, 3.0], dtype=torch.float64))
        self.assertTrue(torch.allclose(values, keys))


class SceneDirectoryTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_save_and_load(self):
        scene = generate_scene(31, tiny_scene_config())
        directory = save_scene(scene, os.path.join(self.tmp.name, "scene-31"))
        loaded = load_scene(directory)
        self.assertTrue(torch.equal(loaded.poses, scene.poses))
        self.assertTrue(torch.equal(loaded.frames.intrinsics, scene.frames.intrinsics))
        self.assertLessEqual(float((loaded.frames.images - scene.frames.images).abs().max()), 0.5 / 255 + 1e-6)
        self.assertTrue(torch.equal(loaded.depth, scene.depth))
        self.assertEqual(loaded.config, scene.config)
        self.assertEqual(loaded.target_indices, scene.target_indices)

    def test_not_a_scene(self):
        with self.assertRaises(DataError):
            load_scene(self.tmp.name)

    def _write_images(self, sizes):
        for index, (width, height) in enumerate(sizes):
            array = np.full((height, width, 3), 40 * index, dtype=np.uint8)
            Image.fromarray(array).save(os.path.join(self.tmp.name, f"{index:02d}.png"))

    def test_ingest_crops_and_scales_intrinsics(self):
        self._write_images([(40, 20), (40, 20)])
        frames = ingest_image_folder(self.tmp.name, 16, 16, intrinsics=torch.tensor([[20.0, 20.0, 20.0, 10.0]]))
        self.assertEqual(tuple(frames.images.shape), (2, 3, 16, 16))
        expected = torch.tensor([16.0, 16.0, 8.0, 8.0], dtype=torch.float64)
        self.assertTrue(torch.allclose(frames.intrinsics[1], expected))
        self.assertAlmostEqual(float(frames.images[1].mean()), 40 / 255, places=5)

    def test_ingest_rejects_mixed_sizes(self):
        self._write_images([(40, 20), (20, 20)])
        with self.assertRaises(DataError):
            ingest_image_folder(self.tmp.name, 16, 16)

    def test_ingest_empty_folder(self):
        with self.assertRaises(DataError):
            ingest_image_folder(self.tmp.name, 16, 16)

    def test_intrinsics_file_broadcast(self):
        path = os.path.join(self.tmp.name, "intrinsics.txt")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("# fx fy cx cy\n10 10 8 8\n")
        intrinsics = read_intrinsics_file(path, count=3)
        self.assertEqual(tuple(intrinsics.shape), (3, 4))
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("10 10 8\n")
        with self.assertRaises(DataError):
            read_intrinsics_file(path)
