import json
import os
import tempfile
import unittest

import click
import torch
import yaml

from common.exceptions import DataError
from main import views
from main.dualquat import IDENTITY_DQ
from main.forms import load_run_config
from main.models import SplatCamModel, save_checkpoint
from main.selftest import tiny_model_config, tiny_scene_config
from main.trainer import pool_seeds, schedule_for
from main.urls import EXIT_DATA, EXIT_OK, EXIT_USAGE, _ablation_list, _seed_list, main
from splatcam import settings


class CameraSpecTest(unittest.TestCase):
    def test_round_trip(self):
        intrinsics = torch.tensor([[10.0, 11.0, 6.0, 5.5]], dtype=torch.float64)
        poses = torch.tensor([IDENTITY_DQ], dtype=torch.float64)
        cameras = views.parse_camera_spec("# header\n" + views.format_camera_spec(intrinsics, poses))
        self.assertEqual(len(cameras), 1)
        self.assertTrue(torch.equal(cameras[0][0], intrinsics[0]))
        self.assertTrue(torch.equal(cameras[0][1], poses[0]))

    def test_bad_lines(self):
        with self.assertRaisesRegex(DataError, "line 2"):
            views.parse_camera_spec("10 10 6 6 | 1 0 0 0 0 0 0 0\n10 10 6 6 1 0 0 0 0 0 0 0\n")
        with self.assertRaises(DataError):
            views.parse_camera_spec("10 10 6 | 1 0 0 0 0 0 0 0\n")
        with self.assertRaises(DataError):
            views.parse_camera_spec("10 10 6 6 | 2 0 0 0 0 0 0 0\n")
        with self.assertRaises(DataError):
            views.parse_camera_spec("# nothing here\n")


class ArgumentTest(unittest.TestCase):
    def test_seed_list(self):
        self.assertEqual(_seed_list("0, 1,5-7"), [0, 1, 5, 6, 7])
        with self.assertRaises(click.BadParameter):
            _seed_list("a-b")
        with self.assertRaises(click.BadParameter):
            _seed_list(" , ")

    def test_ablation_list(self):
        self.assertEqual(_ablation_list("no_cna, quat_trans,"), ["no_cna", "quat_trans"])
        self.assertEqual(_ablation_list(None), [])


class CommandTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.config_path = self._path("run.yaml")
        with open(self.config_path, "w", encoding="utf-8") as handle:
            yaml.safe_dump({"model": tiny_model_config().model_dump(mode="json"),
                            "scene": tiny_scene_config().model_dump(mode="json")}, handle)

    def _path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def _checkpoint(self):
        torch.manual_seed(0)
        return save_checkpoint(self._path("model.pt"), SplatCamModel(tiny_model_config()), phase="nvs", seed=0)

    def test_exit_codes(self):
        self.assertEqual(main(["train", self.config_path, "--ablate", "bogus", "--out", self._path("a")]),
                         EXIT_USAGE)
        self.assertEqual(main(["train", self.config_path, "--resume", self._path("absent.pt"),
                               "--out", self._path("b")]), EXIT_DATA)
        self.assertEqual(main(["train", self._path("absent.yaml")]), EXIT_USAGE)
        self.assertEqual(main(["selftest", "--suite", "bogus", "--out", self._path("c")]), EXIT_USAGE)
        self.assertEqual(main(["generate", "--seeds", "x-y"]), EXIT_USAGE)
        self.assertEqual(main(["no-such-command"]), EXIT_USAGE)

    def test_selftest_mask_suite(self):
        self.assertEqual(main(["selftest", "--suite", "mask", "--out", self._path("selftest")]), EXIT_OK)
        with open(self._path("selftest", "selftest.json"), "r", encoding="utf-8") as handle:
            summary = json.load(handle)
        self.assertTrue(summary["suites"]["mask"]["passed"])

    def test_generate_writes_scenes_and_manifest(self):
        manifest = views.cmd_generate([3, 4], self._path("scenes"), self.config_path)
        self.assertEqual(manifest.result, {"scenes": 2})
        self.assertTrue(os.path.isdir(self._path("scenes", "scene-3")))
        with open(self._path("scenes", "manifest.json"), "r", encoding="utf-8") as handle:
            written = json.load(handle)
        self.assertEqual(written["command"], "generate")
        self.assertEqual(len(written["code_digest"]), 64)
        self.assertIsNotNone(written["config_digest"])

    def test_infer_then_render(self):
        views.cmd_generate([5], self._path("scenes"), self.config_path)
        infer = views.cmd_infer(self._checkpoint(), self._path("scenes", "scene-5"), self._path("infer"), views=2)
        self.assertEqual(infer.result["gaussians"], 2 * 16 * 16)
        with open(self._path("infer", "poses.txt"), "r", encoding="utf-8") as handle:
            lines = [line for line in handle if not line.startswith("#")]
        self.assertEqual(len(lines), 2)

        spec_path = self._path("cameras.txt")
        with open(spec_path, "w", encoding="utf-8") as handle:
            handle.write(views.format_camera_spec(torch.tensor([[14.0, 14.0, 8.0, 8.0]] * 2),
                                                  torch.tensor([IDENTITY_DQ] * 2)))
        rendered = views.cmd_render(self._path("infer", "gaussians.ply"), spec_path, self._path("render"))
        self.assertEqual(rendered.result["cameras"], 2)
        self.assertTrue(os.path.exists(self._path("render", "rgb_001.png")))
        self.assertTrue(os.path.exists(self._path("render", "depth_001.png")))

    def test_infer_rejects_too_many_views(self):
        views.cmd_generate([6], self._path("scenes"), self.config_path)
        self.assertEqual(main(["infer", self._checkpoint(), self._path("scenes", "scene-6"), "--views", "6",
                               "--out", self._path("infer")]), EXIT_USAGE)
        self.assertEqual(main(["infer", self._checkpoint(), self._path("missing"), "--out", self._path("infer")]),
                         EXIT_DATA)

    def test_eval_writes_report(self):
        manifest = views.cmd_eval(self._checkpoint(), [1_000_000], self._path("eval"), views=2, align="similarity",
                                  config_path=self.config_path)
        self.assertIn("psnr", manifest.result)
        # the untrained camera head collapses every pose onto frame 1
        self.assertIsNone(manifest.result["ate"])
        table = views.load_metric_table(self._path("eval", "metrics.csv"))
        self.assertEqual(list(table["seed"]), [1_000_000])
        self.assertTrue(os.path.exists(self._path("eval", "trajectory-1000000.png")))

    def test_eval_reports_point_maps(self):
        manifest = views.cmd_eval(self._checkpoint(), [1_000_000], self._path("eval"), views=2,
                                  config_path=self.config_path)
        self.assertGreater(manifest.result["point_error"], 0.0)
        auc = manifest.result["confidence_auc"]
        self.assertTrue(auc is None or 0.0 <= auc <= 1.0)

    def test_eval_single_view_scores_the_input(self):
        self.assertEqual(main(["eval", self._checkpoint(), "--seeds", "1000000", "--views", "1",
                               "--config", self.config_path, "--out", self._path("eval")]), EXIT_OK)
        with open(self._path("eval", "metrics.json"), "r", encoding="utf-8") as handle:
            report = json.load(handle)
        row = report["scenes"][0]
        self.assertEqual(row["scored_views"], "input")
        self.assertEqual(row["views"], 1)
        self.assertGreater(row["psnr"], 0.0)
        self.assertNotIn("ate", row)

    def test_missing_metric_table(self):
        with self.assertRaises(DataError):
            views.load_metric_table(self._path("nope.csv"))

    def test_compare_trains_every_variant_on_the_same_scenes(self):
        stages = [{"name": "distill", "phase": "distill", "views": 2, "interval_start": 1, "interval_end": 2,
                   "steps": 1},
                  {"name": "nvs2", "phase": "nvs", "views": 2, "interval_start": 1, "interval_end": 2, "steps": 2}]
        config_path = self._path("compare.yaml")
        with open(config_path, "w", encoding="utf-8") as handle:
            yaml.safe_dump({"seed": 3, "model": tiny_model_config().model_dump(mode="json"),
                            "scene": tiny_scene_config().model_dump(mode="json"),
                            "train": {"views": 2, "batch_size": 1, "stages": stages, "scene_pool": 2,
                                      "checkpoint_every": 10, "validate_every": 1000, "queue_size": 2}}, handle)
        manifest = views.cmd_compare(config_path, ["no_cna"], self._path("compare"))
        self.assertEqual(set(manifest.result["psnr"]), {"full", "no_cna"})
        self.assertIsInstance(manifest.result["full_is_best"], bool)
        with open(self._path("compare", "comparison.json"), "r", encoding="utf-8") as handle:
            report = json.load(handle)
        self.assertEqual(report["scene_seeds"], pool_seeds(3, 2))
        self.assertEqual([row["steps"] for row in report["variants"]], [3, 3])
        self.assertEqual(list(views.load_metric_table(self._path("compare", "comparison.csv"))["variant"]),
                         ["full", "no_cna"])
        self.assertEqual(main(["compare", config_path, "--ablate", "bogus", "--out", self._path("x")]), EXIT_USAGE)


class OverfitConfigTest(unittest.TestCase):
    def test_shipped_config_matches_the_toy_target(self):
        config = load_run_config(os.path.join(settings.BASE_DIR, "configs", "overfit.yaml"))
        self.assertEqual((config.model.encoder_depth, config.model.decoder_depth, config.model.width), (2, 2, 64))
        self.assertEqual((config.model.image_height, config.model.image_width), (32, 32))
        self.assertEqual((config.train.views, config.train.scene_pool), (4, 8))
        stages = schedule_for(config.train).stages
        self.assertEqual([stage.name for stage in stages], ["distill", "nvs2", "nvs4"])
        self.assertTrue(all(stage.camera_weight == 0.1 for stage in stages))
        self.assertEqual(len(views.held_in_seeds(config)), 8)
