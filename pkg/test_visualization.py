import unittest
import os
import base64
import tempfile
import logging

import numpy as np
import pandas as pd

from geometry import build_canonical_topology
from graphdata import assemble_graph
from training import compute_metrics
from visualization import BLANK_PNG, TensegrityVisualization

# Disable logging during tests
logging.disable(logging.CRITICAL)

PNG_MAGIC = b"\x89PNG"


def decode(data_uri):
    prefix = "data:image/png;base64,"
    assert data_uri.startswith(prefix)
    return base64.b64decode(data_uri[len(prefix):])


class TestTensegrityVisualization(unittest.TestCase):
    """Figures come back as data URIs or as written PNG paths"""

    def setUp(self):
        self.plots = TensegrityVisualization()
        self.tmpdir = tempfile.TemporaryDirectory()
        self.history = pd.DataFrame({"epoch": [1, 2, 3], "train_loss": [0.7, 0.5, 0.4],
                                     "val_accuracy": [0.2, 0.4, 0.5], "val_macro_f1": [0.3, 0.5, 0.6],
                                     "seconds": [1.0, 1.0, 1.0]})

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_history_as_data_uri(self):
        self.assertTrue(decode(self.plots.plot_training_history(self.history)).startswith(PNG_MAGIC))

    def test_history_to_file(self):
        path = os.path.join(self.tmpdir.name, "history.png")
        self.assertEqual(self.plots.plot_training_history(self.history, path), path)
        with open(path, "rb") as fh:
            self.assertEqual(fh.read(4), PNG_MAGIC)

    def test_confusion(self):
        rng = np.random.default_rng(0)
        metrics = compute_metrics(rng.integers(0, 2, (30, 6)), rng.integers(0, 2, (30, 6)))
        self.assertTrue(decode(self.plots.plot_confusion(metrics)).startswith(PNG_MAGIC))

    def test_trajectory_with_and_without_truth(self):
        path = np.cumsum(np.full((50, 3), 0.01), axis=0)
        self.assertTrue(decode(self.plots.plot_trajectory(path)).startswith(PNG_MAGIC))
        self.assertTrue(decode(self.plots.plot_trajectory(path, path + 0.001)).startswith(PNG_MAGIC))

    def test_graph(self):
        graph = assemble_graph(build_canonical_topology()).nx_graph
        out = os.path.join(self.tmpdir.name, "graph.png")
        self.assertEqual(self.plots.plot_graph(graph, out), out)
        self.assertTrue(os.path.getsize(out) > 0)

    def test_bad_input_gives_placeholder(self):
        placeholder = self.plots.plot_training_history(pd.DataFrame({"epoch": [1]}))
        self.assertTrue(placeholder.startswith("data:image/png;base64,"))
        self.assertTrue(decode(self.plots.plot_trajectory(np.zeros((0, 3)))).startswith(PNG_MAGIC))

    def test_blank_fallback_is_png(self):
        self.assertTrue(decode(BLANK_PNG).startswith(PNG_MAGIC))


if __name__ == '__main__':
    unittest.main(verbosity=2)
