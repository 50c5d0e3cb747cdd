import unittest
import io
import os
import json
import tempfile
import logging
from contextlib import redirect_stderr, redirect_stdout

import pandas as pd

from cli import RunManifest, build_parser, main

# Disable logging during tests
logging.disable(logging.CRITICAL)

STEM = "F_r1.0_s3"
TINY_MODEL = ["--epochs", "1", "--layers", "1", "--hidden", "4", "--history", "12", "--batch-size", "32"]


def run(argv):
    """Run the CLI, returning (exit code, last JSON document printed)"""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    text = out.getvalue().strip()
    try:
        return code, json.loads(text)
    except json.JSONDecodeError:
        return code, json.loads(text.splitlines()[-1])


class TestCli(unittest.TestCase):
    """End-to-end runs of every subcommand on a short simulated sequence"""

    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.TemporaryDirectory()
        cls.root = cls.tmpdir.name
        cls.data_dir = os.path.join(cls.root, "data")
        cls.train_dir = os.path.join(cls.root, "train")
        code, _ = run(["--out-dir", cls.data_dir, "--seed", "3", "gen-data", "--primitive", "F",
                       "--duration", "1.5", "--history", "12"])
        assert code == 0
        cls.dataset = os.path.join(cls.data_dir, f"{STEM}.csv")
        code, cls.train_result = run(["--out-dir", cls.train_dir, "--seed", "0", "train",
                                      "--data", cls.dataset] + TINY_MODEL)
        assert code == 0
        cls.checkpoint = os.path.join(cls.train_dir, "model.npz")

    @classmethod
    def tearDownClass(cls):
        cls.tmpdir.cleanup()

    def out_dir(self, name):
        return os.path.join(self.root, name)

    def test_gen_data_outputs(self):
        for name in (f"{STEM}.csv", f"{STEM}_gt.csv", "gen-data_manifest.json"):
            self.assertTrue(os.path.exists(os.path.join(self.data_dir, name)), name)
        manifest = RunManifest.load(os.path.join(self.data_dir, "gen-data_manifest.json"))
        self.assertEqual(manifest["subcommand"], "gen-data")
        self.assertEqual(manifest["seed"], 3)
        self.assertEqual(manifest["config"]["seed"], 3)

    def test_train_outputs(self):
        for name in ("history.csv", "model.npz", "training_history.png", "val_metrics.csv", "train_manifest.json"):
            self.assertTrue(os.path.exists(os.path.join(self.train_dir, name)), name)
        self.assertEqual(self.train_result["epochs"], 1)
        self.assertEqual(self.train_result["train_windows"] + self.train_result["val_windows"], 139)

    def test_eval(self):
        out = self.out_dir("eval")
        code, result = run(["--out-dir", out, "eval", "--checkpoint", self.checkpoint,
                            "--data", self.dataset, "--by-source"])
        self.assertEqual(code, 0)
        self.assertEqual(result["n_windows"], 139)
        self.assertEqual(list(result["by_source"]), [STEM])
        self.assertEqual(len(pd.read_csv(os.path.join(out, "metrics.csv"))), 7)
        self.assertTrue(os.path.exists(os.path.join(out, "metrics_by_source.csv")))

    def test_predict_then_estimate(self):
        out = self.out_dir("predict")
        code, result = run(["--out-dir", out, "predict", "--checkpoint", self.checkpoint, "--data", self.dataset])
        self.assertEqual(code, 0)
        self.assertEqual((result["rows"], result["warmup_rows"]), (150, 11))
        predictions = pd.read_csv(result["predictions"])
        self.assertEqual(list(predictions.columns), [f"c{i}" for i in range(6)] + ["warmup"])

        code, estimate = run(["--out-dir", out, "estimate", "--data", self.dataset,
                              "--contacts", result["predictions"]])
        self.assertEqual(code, 0)
        self.assertIsNotNone(estimate["drift_percent"])
        self.assertEqual(len(pd.read_csv(estimate["trajectory"])), 150)
        self.assertTrue(os.path.exists(os.path.splitext(estimate["trajectory"])[0] + ".png"))

    def test_estimate_with_true_contacts(self):
        code, estimate = run(["--out-dir", self.out_dir("estimate"), "estimate", "--data", self.dataset])
        self.assertEqual(code, 0)
        self.assertEqual(len(estimate["final_quaternion_wxyz"]), 4)
        self.assertLess(estimate["max_orthonormality_error"], 1e-9)

    def test_group_check(self):
        out = self.out_dir("group")
        code, result = run(["--out-dir", out, "group-check", "--plot"])
        self.assertEqual(code, 0)
        self.assertEqual(result["axioms"], "ok")
        self.assertEqual(result["composition_table"][0], ["e", "r", "r2", "f", "fr", "fr2"])
        self.assertEqual(result["elements"]["f"]["endcap_perm"], [3, 5, 4, 0, 2, 1])
        self.assertTrue(os.path.exists(os.path.join(out, "graph.png")))

    def test_grad_check_reports(self):
        code, result = run(["--out-dir", self.out_dir("grad"), "--seed", "1", "grad-check", "--tolerance", "1e9"])
        self.assertEqual(code, 0)
        self.assertTrue(result["passed"])
        self.assertGreaterEqual(result["max_relative_error"], 0.0)

    def test_grad_check_failure_exit(self):
        code, result = run(["--out-dir", self.out_dir("grad"), "--seed", "1", "grad-check",
                            "--tolerance", "1e-30"])
        self.assertEqual(code, 1)
        self.assertEqual(result["error"], "gradient")

    def test_manifest_replay_reproduces_training(self):
        replay_dir = self.out_dir("replay")
        code, _ = run(["--out-dir", replay_dir, "--manifest", os.path.join(self.train_dir, "train_manifest.json")])
        self.assertEqual(code, 0)
        with open(self.checkpoint, "rb") as one, open(os.path.join(replay_dir, "model.npz"), "rb") as two:
            self.assertEqual(one.read(), two.read())
        first = pd.read_csv(os.path.join(self.train_dir, "history.csv")).drop(columns="seconds")
        second = pd.read_csv(os.path.join(replay_dir, "history.csv")).drop(columns="seconds")
        self.assertTrue(first.equals(second))

    def test_error_exit_codes(self):
        code, result = run(["--out-dir", self.out_dir("errors"), "predict", "--checkpoint",
                            os.path.join(self.root, "absent.npz"), "--data", self.dataset])
        self.assertEqual((code, result["error"]), (21, "io"))

        code, result = run(["--out-dir", self.out_dir("errors"), "estimate", "--data",
                            os.path.join(self.root, "absent.csv")])
        self.assertEqual((code, result["error"]), (21, "io"))

        code, result = run(["--out-dir", self.out_dir("errors")])
        self.assertEqual((code, result["error"]), (2, "config"))

    def test_unknown_config_key(self):
        path = os.path.join(self.root, "bad.env")
        with open(path, "w") as fh:
            fh.write("epochs=1\nwarp_drive=9\n")
        code, result = run(["--out-dir", self.out_dir("errors"), "--config", path, "train",
                            "--data", self.dataset] + TINY_MODEL)
        self.assertEqual((code, result["error"]), (2, "config"))

    def test_parser_defaults(self):
        args = build_parser().parse_args(["grad-check"])
        self.assertEqual((args.layers, args.hidden, args.history, args.batch), (1, 4, 12, 4))
        self.assertIsNone(args.symmetry_enabled)


if __name__ == '__main__':
    unittest.main(verbosity=2)
