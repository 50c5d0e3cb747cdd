import unittest
import os
import json
import tempfile
import logging

import numpy as np

from errors import (ConfigInvalid, CorruptCheckpoint, EmptyDataset, FormatError, SequenceTooShort, ShapeMismatch,
                    TensegrityIOError, VersionMismatch)
from geometry import act_on_rows, canonical_group
from graphdata import SensorSequence, WindowDataset
from hgnn import init_params
from training import (Adam, HISTORY_COLUMNS, TrainConfig, ablate, augment_with_group, compute_metrics, evaluate,
                      evaluate_by_source, load_checkpoint, predict_dataset, predict_sequence, save_checkpoint,
                      split_dataset, subsample, train)

# Disable logging during tests
logging.disable(logging.CRITICAL)

L = 12


def make_sequence(T=30, seed=0, name="seq"):
    rng = np.random.default_rng(seed)
    return SensorSequence(
        sample_rate=100.0,
        time=np.arange(T) / 100.0,
        imu=rng.normal(size=(T, 3, 6)),
        tendon_lengths=0.2 + 0.01 * rng.normal(size=(T, 9)),
        contacts=rng.integers(0, 2, size=(T, 6)),
        name=name,
    )


def tiny_config(**changes):
    settings = dict(learning_rate=1e-3, batch_size=8, epochs=2, layers=1, hidden=4, history_length=L,
                    symmetry_enabled=False)
    settings.update(changes)
    return TrainConfig(**settings)


def brute_force_scores(labels, predictions):
    """Independent recount: exact-match accuracy, per-endcap confusion and F1"""
    n = len(labels)
    exact = sum(1 for row in range(n) if all(labels[row][i] == predictions[row][i] for i in range(6)))
    confusion, f1 = [], []
    for i in range(6):
        tp = fp = fn = tn = 0
        for row in range(n):
            truth, guess = labels[row][i], predictions[row][i]
            if truth == 1 and guess == 1:
                tp += 1
            elif truth == 0 and guess == 1:
                fp += 1
            elif truth == 1 and guess == 0:
                fn += 1
            else:
                tn += 1
        confusion.append((tn, fp, fn, tp))
        f1.append(0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn))
    return exact / n, confusion, f1


class TestMetrics(unittest.TestCase):

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for case in range(20):
            n = int(rng.integers(1, 101))
            labels = rng.integers(0, 2, size=(n, 6))
            predictions = labels.copy()
            flips = rng.random((n, 6)) < rng.uniform(0.0, 0.5)
            predictions[flips] = 1 - predictions[flips]
            if case % 5 == 0:
                labels[:, 2] = 0
                predictions[:, 2] = 0

            metrics = compute_metrics(labels, predictions)
            accuracy, confusion, f1 = brute_force_scores(labels.tolist(), predictions.tolist())
            self.assertAlmostEqual(metrics.exact_match_accuracy, accuracy, places=12)
            self.assertEqual([tuple(c) for c in metrics.confusion], confusion)
            for i in range(6):
                self.assertAlmostEqual(metrics.f1[i], f1[i], places=12)
            self.assertAlmostEqual(metrics.macro_f1, sum(f1) / 6, places=12)
            self.assertEqual(metrics.n_windows, n)

    def test_perfect_predictions(self):
        labels = np.array([[1, 0, 0, 1, 0, 1], [0, 1, 1, 0, 1, 0]])
        metrics = compute_metrics(labels, labels)
        self.assertEqual(metrics.exact_match_accuracy, 1.0)
        self.assertEqual(metrics.macro_f1, 1.0)

    def test_timing_ignored_by_equality(self):
        labels = np.array([[1, 0, 0, 1, 0, 1]])
        self.assertEqual(compute_metrics(labels, labels, 1.0), compute_metrics(labels, labels, 2.0))

    def test_frame(self):
        frame = compute_metrics(np.eye(6, dtype=int), np.eye(6, dtype=int)).to_frame()
        self.assertEqual(len(frame), 7)
        self.assertEqual(frame.iloc[-1]["endcap"], "all")

    def test_errors(self):
        with self.assertRaises(EmptyDataset):
            compute_metrics(np.zeros((0, 6)), np.zeros((0, 6)))
        with self.assertRaises(ShapeMismatch):
            compute_metrics(np.zeros((2, 6)), np.zeros((3, 6)))


class TestAdam(unittest.TestCase):

    def test_first_step_moves_by_learning_rate(self):
        params = init_params(1, 4, L, seed=0)
        before = params["dec.b2"].values.copy()
        for p in params.parameters():
            p.grad = np.zeros_like(p.values)
        params["dec.b2"].grad = np.array([2.5])
        Adam(params, 0.01).step()
        np.testing.assert_allclose(params["dec.b2"].values, before - 0.01, atol=1e-8)
        np.testing.assert_array_equal(params["dec.w2"].values, init_params(1, 4, L, seed=0)["dec.w2"].values)


class TestDatasets(unittest.TestCase):

    def setUp(self):
        self.dataset = WindowDataset([make_sequence(40, seed=0, name="a"), make_sequence(30, seed=1, name="b")], L)

    def test_split(self):
        first, second = split_dataset(self.dataset, 0.8, seed=3)
        self.assertEqual(len(first), int(round(0.8 * len(self.dataset))))
        self.assertEqual(len(first) + len(second), len(self.dataset))
        rows = {tuple(r) for r in first.entries} | {tuple(r) for r in second.entries}
        self.assertEqual(len(rows), len(self.dataset))
        again, _ = split_dataset(self.dataset, 0.8, seed=3)
        np.testing.assert_array_equal(again.entries, first.entries)
        with self.assertRaises(ConfigInvalid):
            split_dataset(self.dataset, 1.0)

    def test_subsample(self):
        self.assertIs(subsample(self.dataset, None), self.dataset)
        self.assertEqual(len(subsample(self.dataset, 10, seed=1)), 10)
        self.assertIs(subsample(self.dataset, 1000), self.dataset)

    def test_augment_with_group(self):
        group = canonical_group()
        augmented = augment_with_group(self.dataset, group)
        n = len(self.dataset)
        self.assertEqual(len(augmented), 6 * n)
        labels = self.dataset.labels()
        for k, g in enumerate(group):
            np.testing.assert_array_equal(augmented.labels()[k * n:(k + 1) * n],
                                          act_on_rows(labels, g.endcap_perm, axis=-1))


class TestTraining(unittest.TestCase):

    def test_memorizes_one_window(self):
        window = WindowDataset([make_sequence(L, seed=4)], L)
        config = tiny_config(learning_rate=0.05, batch_size=4, epochs=40, hidden=8)
        params, history = train(window.subset([0] * 16), window, config)
        self.assertEqual(list(history.columns), HISTORY_COLUMNS)
        self.assertEqual(len(history), 40)
        self.assertEqual(evaluate(params, window, symmetry_enabled=False).exact_match_accuracy, 1.0)
        self.assertLess(history["train_loss"].iloc[-1], history["train_loss"].iloc[0])

    def test_full_batch_loss_decreases_every_epoch(self):
        dataset = WindowDataset([make_sequence(L + 9, seed=5)], L)
        self.assertEqual(len(dataset), 10)
        _, history = train(dataset, dataset, tiny_config(learning_rate=1e-4, batch_size=10, epochs=5))
        losses = history["train_loss"].tolist()
        for before, after in zip(losses, losses[1:]):
            self.assertLess(after, before)

    def test_zero_learning_rate_keeps_loss(self):
        dataset = WindowDataset([make_sequence(L + 9, seed=5)], L)
        params, history = train(dataset, dataset, tiny_config(learning_rate=0.0, batch_size=10, epochs=3))
        for loss in history["train_loss"]:
            self.assertAlmostEqual(loss, history["train_loss"].iloc[0], places=10)
        fresh = init_params(1, 4, L, seed=np.random.default_rng(np.random.SeedSequence(0).spawn(2)[0]))
        np.testing.assert_array_equal(params["dec.w1"].values, fresh["dec.w1"].values)

    def test_deterministic(self):
        dataset = WindowDataset([make_sequence(30, seed=6)], L)
        config = tiny_config(symmetry_enabled=True, epochs=2)
        first_params, first = train(dataset, dataset, config)
        second_params, second = train(dataset, dataset, config)
        columns = ["epoch", "train_loss", "val_accuracy", "val_macro_f1"]
        self.assertTrue(first[columns].equals(second[columns]))
        for name, p in first_params.named_parameters():
            np.testing.assert_array_equal(p.values, second_params[name].values)

    def test_returns_best_validation_weights(self):
        dataset = WindowDataset([make_sequence(30, seed=7)], L)
        params, history = train(dataset, dataset, tiny_config(epochs=3, learning_rate=0.01))
        score = evaluate(params, dataset, symmetry_enabled=False).macro_f1
        self.assertAlmostEqual(score, history["val_macro_f1"].max(), places=12)

    def test_empty_validation_keeps_final_weights(self):
        dataset = WindowDataset([make_sequence(20, seed=8)], L)
        _, history = train(dataset, dataset.subset([]), tiny_config(epochs=1))
        self.assertTrue(np.isnan(history["val_macro_f1"].iloc[0]))

    def test_history_file(self):
        dataset = WindowDataset([make_sequence(20, seed=8)], L)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "history.csv")
            train(dataset, dataset, tiny_config(epochs=1), history_path=path)
            self.assertTrue(os.path.exists(path))

    def test_rejects_bad_inputs(self):
        dataset = WindowDataset([make_sequence(20, seed=8)], L)
        with self.assertRaises(ShapeMismatch):
            train(dataset, dataset, tiny_config(history_length=10))
        with self.assertRaises(EmptyDataset):
            train(dataset.subset([]), dataset, tiny_config())
        with self.assertRaises(ConfigInvalid):
            train(dataset, dataset, tiny_config(group_mode="mirror"))


class TestEvaluation(unittest.TestCase):

    def setUp(self):
        self.params = init_params(1, 4, L, seed=0)
        self.dataset = WindowDataset([make_sequence(20, seed=0, name="a"), make_sequence(15, seed=1, name="b")], L)

    def test_predict_dataset(self):
        logits, ms = predict_dataset(self.params, self.dataset, symmetry_enabled=True, batch_size=5)
        self.assertEqual(logits.shape, (len(self.dataset), 6))
        self.assertGreaterEqual(ms, 0.0)
        unbatched, _ = predict_dataset(self.params, self.dataset, symmetry_enabled=True, batch_size=100)
        np.testing.assert_allclose(logits, unbatched, atol=1e-10)

    def test_by_source(self):
        breakdown = evaluate_by_source(self.params, self.dataset)
        self.assertEqual(sorted(breakdown), ["a", "b"])
        self.assertEqual(breakdown["a"].n_windows, 9)
        self.assertEqual(breakdown["b"].n_windows, 4)

    def test_window_length_must_match(self):
        with self.assertRaises(ShapeMismatch):
            evaluate(self.params, WindowDataset([make_sequence(20)], 10))

    def test_unlabeled_data_rejected(self):
        unlabeled = make_sequence(20)
        unlabeled.contacts = None
        dataset = WindowDataset([unlabeled], L)
        with self.assertRaises(FormatError):
            evaluate(self.params, dataset)
        with self.assertRaises(FormatError):
            evaluate_by_source(self.params, dataset)
        with self.assertRaises(EmptyDataset):
            evaluate_by_source(self.params, self.dataset.subset([]))

    def test_predict_sequence_keeps_every_row(self):
        seq = make_sequence(20)
        frame = predict_sequence(self.params, seq)
        self.assertEqual(len(frame), 20)
        self.assertEqual(list(frame.columns), [f"c{i}" for i in range(6)] + ["warmup"])
        self.assertEqual(frame["warmup"].tolist(), [1] * (L - 1) + [0] * (20 - L + 1))
        self.assertEqual(int(frame.iloc[:L - 1, :6].values.sum()), 0)
        with self.assertRaises(SequenceTooShort):
            predict_sequence(self.params, make_sequence(L - 1))

    def test_ablate(self):
        table = ablate([make_sequence(30, seed=1)], [make_sequence(20, seed=2)], [(1, 8), (1, L)],
                       tiny_config(epochs=1))
        self.assertEqual(list(table["history_length"]), [8, L])
        self.assertIn("test_macro_f1", table.columns)
        self.assertTrue(((table["test_accuracy"] >= 0) & (table["test_accuracy"] <= 1)).all())


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.params = init_params(1, 4, L, seed=3, group_mode="physical")
        self.config = tiny_config(group_mode="physical")

    def tearDown(self):
        self.tmpdir.cleanup()

    def path(self, name):
        return os.path.join(self.tmpdir.name, name)

    def test_roundtrip(self):
        save_checkpoint(self.params, self.config, self.path("model.npz"))
        params, config = load_checkpoint(self.path("model.npz"))
        self.assertEqual((params.K, params.H, params.L, params.group_mode), (1, 4, L, "physical"))
        self.assertEqual(config, self.config)
        for name, p in self.params.named_parameters():
            np.testing.assert_array_equal(params[name].values, p.values)

    def test_bytes_are_deterministic(self):
        save_checkpoint(self.params, self.config, self.path("one.npz"))
        save_checkpoint(self.params, self.config, self.path("two.npz"))
        with open(self.path("one.npz"), "rb") as one, open(self.path("two.npz"), "rb") as two:
            self.assertEqual(one.read(), two.read())

    def test_missing_file(self):
        with self.assertRaises(TensegrityIOError):
            load_checkpoint(self.path("absent.npz"))

    def test_corrupt_file(self):
        with open(self.path("junk.npz"), "wb") as fh:
            fh.write(b"not a checkpoint")
        with self.assertRaises(CorruptCheckpoint):
            load_checkpoint(self.path("junk.npz"))

    def test_truncated_file(self):
        save_checkpoint(self.params, self.config, self.path("model.npz"))
        with open(self.path("model.npz"), "rb") as fh:
            raw = fh.read()
        with open(self.path("cut.npz"), "wb") as fh:
            fh.write(raw[:len(raw) // 2])
        with self.assertRaises(CorruptCheckpoint):
            load_checkpoint(self.path("cut.npz"))

    def test_reloaded_model_scores_the_same(self):
        dataset = WindowDataset([make_sequence(30, seed=9)], L)
        save_checkpoint(self.params, self.config, self.path("model.npz"))
        params, _ = load_checkpoint(self.path("model.npz"))
        for symmetry in (True, False):
            self.assertEqual(evaluate(params, dataset, symmetry_enabled=symmetry),
                             evaluate(self.params, dataset, symmetry_enabled=symmetry))

    def test_version_mismatch(self):
        np.savez(self.path("future.npz"), __meta__=np.array(json.dumps({"format_version": 99})))
        with self.assertRaises(VersionMismatch):
            load_checkpoint(self.path("future.npz"))


if __name__ == '__main__':
    unittest.main(verbosity=2)
