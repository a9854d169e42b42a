import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest.mock import patch

from src.api.settings import (
    THREADS_ENV,
    AblationSettings,
    GenerateSettings,
    TrainSettings,
    load_settings,
    parse_modality_paths,
    resolve_threads,
)
from src.app import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, build_settings, main
from src.services.acw_service import DEFAULT_BUDGET, AcwTrainConfig
from src.services.errors import ConfigError
from src.services.model_service import load_model

SMALL_CAMERAS = {"cameras": {"resolution": 32, "focal": 55.0}}


def run(*argv: str) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts: str) -> str:
        return str(self.root.joinpath(*parts))

    def write_config(self, name: str, values: dict) -> str:
        path = self.path(name)
        Path(path).write_text(json.dumps(values), encoding="utf-8")
        return path


class TestToyModelCommand(CliTestCase):
    def test_writes_a_loadable_model(self):
        code, out, _ = run("toy-model", "--seed", "3", "--v-rings", "8", "--out", self.path("m.mdl"), "--quiet")
        self.assertEqual(code, EXIT_OK)
        model = load_model(self.path("m.mdl"))
        self.assertEqual(model.n_vertices, 1 + 8 * 16)
        self.assertIn("V=129 K_id=20 K_exp=10", out)

    def test_same_seed_same_bytes(self):
        for name in ("a.mdl", "b.mdl"):
            run("toy-model", "--seed", "3", "--v-rings", "6", "--out", self.path(name), "--quiet")
        self.assertEqual(Path(self.path("a.mdl")).read_bytes(), Path(self.path("b.mdl")).read_bytes())

    def test_invalid_ring_count(self):
        code, _, err = run("toy-model", "--seed", "1", "--v-rings", "2", "--out", self.path("m.mdl"))
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("v_rings", err)
        self.assertFalse(Path(self.path("m.mdl")).exists())

    def test_unknown_config_key(self):
        config = self.write_config("c.json", {"seed": 1, "bogus": 2})
        code, _, err = run("toy-model", "--config", config, "--out", self.path("m.mdl"))
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("unknown config key 'bogus'", err)

    def test_missing_seed(self):
        code, _, err = run("toy-model", "--out", self.path("m.mdl"))
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("seed is required", err)

    def test_flags_override_the_config_file(self):
        config = self.write_config("c.json", {"seed": 1, "v_rings": 2, "out": self.path("m.mdl")})
        code, _, _ = run("toy-model", "--config", config, "--v-rings", "6", "--quiet")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(load_model(self.path("m.mdl")).n_vertices, 1 + 6 * 12)


class TestGenerateAndVerify(CliTestCase):
    def setUp(self):
        super().setUp()
        run("toy-model", "--seed", "2", "--v-rings", "8", "--k-id", "4", "--k-exp", "2",
            "--out", self.path("m.mdl"), "--quiet")
        self.config = self.write_config("gen.json", SMALL_CAMERAS)

    def generate(self, out_dir: str, *extra: str) -> tuple[int, str, str]:
        return run("generate", "--config", self.config, "--model", self.path("m.mdl"), "--out-dir", out_dir,
                   "--seed", "9", "--identities", "2", "--expressions", "0", "--quiet", *extra)

    def test_generate_then_verify(self):
        code, out, _ = self.generate(self.path("a"))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("generated 24 images", out)
        code, out, _ = run("verify", "--dataset", self.path("a"), "--quiet")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("24 passed, 0 failed", out)

    def test_thread_count_does_not_change_the_dataset(self):
        self.generate(self.path("a"), "--threads", "1")
        self.generate(self.path("b"), "--threads", "2")
        code, out, _ = run("verify", "--dataset", self.path("a"), "--against", self.path("b"), "--quiet")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("0 differing files", out)

    def test_verify_reports_damage(self):
        self.generate(self.path("a"))
        next(Path(self.path("a", "id_00000")).glob("*.ppm")).unlink()
        code, out, _ = run("verify", "--dataset", self.path("a"), "--quiet")
        self.assertEqual(code, EXIT_RUNTIME)
        self.assertIn("missing", out)

    def test_threads_from_environment(self):
        with patch.dict(os.environ, {THREADS_ENV: "0"}):
            code, _, err = self.generate(self.path("a"))
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn(THREADS_ENV, err)

    def test_missing_model_file(self):
        code, _, _ = run("generate", "--model", self.path("nope.mdl"), "--out-dir", self.path("a"),
                         "--seed", "1", "--quiet")
        self.assertEqual(code, EXIT_RUNTIME)


class TestEmbeddingCommands(CliTestCase):
    def setUp(self):
        super().setUp()
        code, _, _ = run("toy-data", "--seed", "3", "--classes", "6", "--dim", "8", "--samples-per-class", "4",
                         "--out-dir", self.path("toy"), "--quiet")
        self.assertEqual(code, EXIT_OK)

    def emb(self, kind: str, modality: str) -> str:
        return f"{modality}={self.path('toy', f'{kind}_{modality}.emb')}"

    def train(self, *extra: str) -> tuple[int, str, str]:
        return run("train-acw", "--embeddings", self.emb("train", "rgb"), "--embeddings", self.emb("train", "depth"),
                   "--gallery", self.emb("gallery", "rgb"), "--gallery", self.emb("gallery", "depth"),
                   "--out-dir", self.path("heads"), "--seed", "1", "--quiet", *extra)

    def evaluate(self, out_dir: str, modalities: tuple[str, ...], *extra: str) -> dict:
        argv = ["evaluate", "--out-dir", self.path(out_dir), "--tags", self.path("toy", "probe_tags.csv"), "--quiet"]
        for m in modalities:
            argv += ["--gallery", self.emb("gallery", m), "--probes", self.emb("probes", m)]
        code, _, err = run(*argv, *extra)
        self.assertEqual(code, EXIT_OK, err)
        return json.loads(Path(self.path(out_dir, "report.json")).read_text())

    def test_toy_data_files(self):
        names = sorted(p.name for p in Path(self.path("toy")).iterdir())
        for kind in ("gallery", "probes", "train"):
            self.assertIn(f"{kind}_rgb.emb", names)
            self.assertIn(f"{kind}_depth.emb", names)
        self.assertIn("probe_tags.csv", names)
        config = json.loads(Path(self.path("toy", "toy_config.json")).read_text())
        self.assertEqual(config["seed"], 3)

    def test_train_writes_heads_and_history(self):
        code, _, _ = self.train("--epochs", "20", "--lr", "0")
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(Path(self.path("heads", "head_rgb.acw")).exists())
        self.assertTrue(Path(self.path("heads", "head_depth.acw")).exists())
        lines = Path(self.path("heads", "loss_history.csv")).read_text().splitlines()
        self.assertEqual(lines[0], "epoch,loss,lambda,confidence_rgb,confidence_depth")
        self.assertEqual(len(lines), 21)

    def test_train_with_missing_file(self):
        code, _, err = run("train-acw", "--embeddings", self.emb("train", "rgb"),
                           "--embeddings", f"depth={self.path('toy', 'nope.emb')}",
                           "--gallery", self.emb("gallery", "rgb"), "--gallery", self.emb("gallery", "depth"),
                           "--out-dir", self.path("heads"), "--seed", "1", "--quiet")
        self.assertEqual(code, EXIT_RUNTIME)
        self.assertIn("depth", err)

    def test_train_with_bad_pair(self):
        code, _, _ = run("train-acw", "--embeddings", "rgb", "--gallery", self.emb("gallery", "rgb"),
                         "--out-dir", self.path("heads"), "--seed", "1")
        self.assertEqual(code, EXIT_CONFIG)

    def test_single_modality_evaluation(self):
        report = self.evaluate("single", ("rgb",), "--mode", "single:rgb")
        self.assertEqual(report["mode"], "single:rgb")
        self.assertEqual(len(report["probes"]), 24)
        self.assertTrue(Path(self.path("single", "report.txt")).exists())

    def test_fixed_one_zero_equals_single(self):
        single = self.evaluate("single", ("rgb",), "--mode", "single:rgb")
        fixed = self.evaluate("fixed", ("rgb", "depth"), "--mode", "fixed", "--weights", "1,0")
        self.assertEqual(fixed["overall_rank1"], single["overall_rank1"])
        self.assertEqual([p["prediction"] for p in fixed["probes"]], [p["prediction"] for p in single["probes"]])

    def test_acw_evaluation_with_trained_heads(self):
        self.train("--epochs", "3")
        report = self.evaluate(
            "acw", ("rgb", "depth"), "--mode", "acw",
            "--heads", f"rgb={self.path('heads', 'head_rgb.acw')}",
            "--heads", f"depth={self.path('heads', 'head_depth.acw')}",
        )
        self.assertEqual(report["mode"], "acw")
        self.assertEqual(set(report["probes"][0]["confidences"]), {"rgb", "depth"})
        self.assertEqual(sum(s["count"] for s in report["subsets"].values()), 24)

    def test_weights_need_fixed_mode(self):
        argv = ["evaluate", "--out-dir", self.path("x"), "--mode", "acw", "--weights", "1,0",
                "--gallery", self.emb("gallery", "rgb"), "--probes", self.emb("probes", "rgb")]
        code, _, _ = run(*argv)
        self.assertEqual(code, EXIT_CONFIG)


class TestAblationCommand(CliTestCase):
    def test_small_ablation(self):
        code, out, _ = run("ablation", "--seed", "5", "--classes", "6", "--dim", "8", "--samples-per-class", "4",
                           "--epochs", "2", "--out-dir", self.path("abl"), "--quiet")
        self.assertEqual(code, EXIT_OK)
        payload = json.loads(Path(self.path("abl", "ablation.json")).read_text())
        self.assertEqual(list(payload["reports"]), ["single:rgb", "single:depth", "fixed:1,1", "acw"])
        self.assertEqual(len(payload["history"]["epochs"]), 2)
        self.assertIn("mean confidence", out)


class TestSettings(unittest.TestCase):
    def test_unknown_key_inside_nested_block(self):
        for values, key in (
            ({"seed": 1, "out_dir": "x", "train": {"epochz": 5}}, "train.epochz"),
            ({"seed": 1, "model": "m", "out_dir": "x", "cameras": {"focul": 5}}, "cameras.focul"),
        ):
            model = AblationSettings if "train" in values else GenerateSettings
            with self.assertRaises(ConfigError) as ctx:
                load_settings(model, None, values)
            self.assertEqual(str(ctx.exception), f"unknown config key '{key}'")

    def test_bare_budget_flag_uses_default(self):
        parser = build_parser()
        settings = build_settings(parser.parse_args(["ablation", "--seed", "1", "--out-dir", "x", "--budget"]))
        self.assertEqual(settings.train.budget, DEFAULT_BUDGET)
        settings = build_settings(parser.parse_args(["ablation", "--seed", "1", "--out-dir", "x", "--budget", "0.5"]))
        self.assertEqual(settings.train.budget, 0.5)
        settings = build_settings(parser.parse_args(["ablation", "--seed", "1", "--out-dir", "x"]))
        self.assertIsNone(settings.train.budget)
        self.assertEqual(AcwTrainConfig.model_validate({"budget": True}).budget, DEFAULT_BUDGET)

    def test_modality_paths(self):
        self.assertEqual(parse_modality_paths(["rgb=a.emb", "depth=b=c.emb"]), {"rgb": "a.emb", "depth": "b=c.emb"})
        self.assertIsNone(parse_modality_paths(None))
        with self.assertRaises(ConfigError):
            parse_modality_paths(["=a.emb"])

    def test_threads(self):
        with patch.dict(os.environ, {THREADS_ENV: "3"}):
            self.assertEqual(resolve_threads(None), 3)
            self.assertEqual(resolve_threads(2), 2)
        with patch.dict(os.environ, {THREADS_ENV: "many"}):
            with self.assertRaises(ConfigError):
                resolve_threads(None)

    def test_train_settings_accept_lambda_key(self):
        settings = load_settings(
            TrainSettings, None, {"embeddings": {"rgb": "a"}, "gallery": {"rgb": "b"}, "out_dir": "o", "seed": 0}
        )
        self.assertEqual(settings.train_config().lam, 0.1)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "c.json"
            path.write_text(json.dumps({"lambda": 0.3, "seed": 1}))
            settings = load_settings(
                TrainSettings, str(path), {"embeddings": {"rgb": "a"}, "gallery": {"rgb": "b"}, "out_dir": "o"}
            )
        self.assertEqual(settings.lam, 0.3)
        self.assertEqual(settings.seed, 1)


if __name__ == "__main__":
    unittest.main()
