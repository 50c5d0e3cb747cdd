import unittest
import logging

import numpy as np
from scipy.special import expit

from autodiff import Tensor, finite_difference_check
from errors import ConfigInvalid, ShapeMismatch
from geometry import act_on_rows, build_canonical_topology, canonical_group
from graphdata import (EDGE_TYPE_NAMES, NODE_TYPES, HeteroGraph, apply_group_to_arrays, assemble_graph,
                       build_networkx_graph)
from hgnn import (ModelParams, bce_with_logits, contact_probabilities, decode, encode_inputs, hgnn_forward,
                  init_params, message_passing_layer, model_forward, parameter_shapes, predict_contacts,
                  sym_forward)

# Disable logging during tests
logging.disable(logging.CRITICAL)

K, H, L = 2, 8, 12


def random_windows(n, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, 3, L, 6)).astype(dtype), rng.normal(size=(n, 9, L, 1)).astype(dtype))


class TestParameters(unittest.TestCase):

    def test_shapes(self):
        shapes = parameter_shapes(K, H, L)
        self.assertEqual(shapes["enc.rod.w1"], (L * 6, H))
        self.assertEqual(shapes["enc.tendon.w1"], (L, H))
        self.assertEqual(shapes["mp2.msg.tendon_to_endcap.w"], (H + 4, H))
        self.assertEqual(shapes["mp1.upd.endcap.w"], (2 * H, H))
        self.assertEqual(shapes["dec.w2"], (H, 1))
        self.assertNotIn("mp3.upd.rod.w", shapes)

    def test_seeded_init_is_reproducible(self):
        a, b = init_params(K, H, L, seed=7), init_params(K, H, L, seed=7)
        for name, p in a.named_parameters():
            np.testing.assert_array_equal(p.values, b[name].values)
        c = init_params(K, H, L, seed=8)
        self.assertFalse(np.array_equal(a["dec.w1"].values, c["dec.w1"].values))

    def test_init_validation(self):
        with self.assertRaises(ConfigInvalid):
            init_params(0, H, L)
        with self.assertRaises(ConfigInvalid):
            init_params(K, H, L, group_mode="mirror")

    def test_state_dict_roundtrip(self):
        params = init_params(K, H, L, seed=1)
        restored = ModelParams.from_state_dict(K, H, L, "index-only", params.state_dict())
        self.assertEqual(restored.num_parameters(), params.num_parameters())
        np.testing.assert_array_equal(restored["mp1.msg.rod_to_endcap.w"].values,
                                      params["mp1.msg.rod_to_endcap.w"].values)
        with self.assertRaises(ShapeMismatch):
            ModelParams.from_state_dict(K, H, L + 1, "index-only", params.state_dict())

    def test_copy_is_independent(self):
        params = init_params(K, H, L, seed=1)
        clone = params.copy()
        clone["dec.b2"].values[0] += 1.0
        self.assertNotEqual(clone["dec.b2"].values[0], params["dec.b2"].values[0])


class TestForward(unittest.TestCase):

    def setUp(self):
        self.graph = assemble_graph(build_canonical_topology())
        self.params = init_params(K, H, L, seed=0)

    def test_pieces_compose_to_forward(self):
        rod, tendon = random_windows(3, seed=1)
        V = encode_inputs((rod, tendon), self.params)
        self.assertEqual(V["rod"].shape, (3, 3, H))
        self.assertEqual(V["tendon"].shape, (3, 9, H))
        self.assertEqual(V["endcap"].shape, (3, 6, H))
        for k in range(1, K + 1):
            V = message_passing_layer(V, self.graph, self.params, k)
        logits = decode(V["endcap"], self.params)
        np.testing.assert_array_equal(logits.values, hgnn_forward((rod, tendon), self.graph, self.params).values)

    def test_layer_index_checked(self):
        V = encode_inputs(random_windows(1, seed=1), self.params)
        with self.assertRaises(ConfigInvalid):
            message_passing_layer(V, self.graph, self.params, K + 1)

    def test_single_and_batched(self):
        rod, tendon = random_windows(4, seed=2)
        batched = hgnn_forward((rod, tendon), self.graph, self.params)
        single = hgnn_forward((rod[1], tendon[1]), self.graph, self.params)
        self.assertEqual(batched.shape, (4, 6))
        self.assertEqual(single.shape, (6,))
        np.testing.assert_allclose(single.values, batched.values[1], atol=1e-12)

    def test_wrong_history_length(self):
        rod, tendon = random_windows(2, seed=2)
        with self.assertRaises(ShapeMismatch):
            hgnn_forward((rod[:, :, :L - 1], tendon[:, :, :L - 1]), self.graph, self.params)

    def test_trivial_group_is_plain_forward(self):
        rod, tendon = random_windows(3, seed=3)
        trivial = canonical_group().subgroup(["e"])
        np.testing.assert_array_equal(sym_forward((rod, tendon), self.graph, self.params, trivial).values,
                                      hgnn_forward((rod, tendon), self.graph, self.params).values)
        np.testing.assert_array_equal(model_forward((rod, tendon), self.graph, self.params).values,
                                      hgnn_forward((rod, tendon), self.graph, self.params).values)

    def test_endcap_embeddings_start_identical(self):
        V = encode_inputs(random_windows(3, seed=4), self.params)["endcap"].values
        for k in range(1, 6):
            np.testing.assert_allclose(V[:, k], V[:, 0], atol=1e-12)

    def test_zero_message_weights_leave_only_the_update(self):
        V = encode_inputs(random_windows(2, seed=5), self.params)
        for etype in EDGE_TYPE_NAMES:
            self.params[f"mp1.msg.{etype}.w"].values[...] = 0.0
            self.params[f"mp1.msg.{etype}.b"].values[...] = 0.0
        updated = message_passing_layer(V, self.graph, self.params, 1)
        for ntype in NODE_TYPES:
            w, b = self.params[f"mp1.upd.{ntype}.w"].values, self.params[f"mp1.upd.{ntype}.b"].values
            expected = np.maximum(V[ntype].values @ w[:H] + b, 0.0)
            np.testing.assert_allclose(updated[ntype].values, expected, atol=1e-12)

    def test_duplicate_edge_counts_twice(self):
        nx_graph = build_networkx_graph(build_canonical_topology())
        nx_graph.add_edge(("rod", 0), ("endcap", 0), edge_type="rod_to_endcap")
        doubled = HeteroGraph.from_networkx(nx_graph)
        self.assertEqual(doubled.num_edges, 49)

        # endcap update passes the aggregated messages straight through
        self.params["mp1.upd.endcap.w"].values[...] = np.vstack([np.zeros((H, H)), np.eye(H)])
        self.params["mp1.upd.endcap.b"].values[...] = 0.0
        V = encode_inputs(random_windows(2, seed=6), self.params)
        once = message_passing_layer(V, self.graph, self.params, 1)["endcap"].values
        twice = message_passing_layer(V, doubled, self.params, 1)["endcap"].values

        onehot = np.broadcast_to(self.graph.edge_type_feature("rod_to_endcap"), (2, len(EDGE_TYPE_NAMES)))
        w, b = self.params["mp1.msg.rod_to_endcap.w"].values, self.params["mp1.msg.rod_to_endcap.b"].values
        message = np.maximum(np.concatenate([V["rod"].values[:, 0], onehot], axis=-1) @ w + b, 0.0)
        np.testing.assert_allclose(twice[:, 0] - once[:, 0], message, atol=1e-12)
        np.testing.assert_allclose(twice[:, 1:], once[:, 1:], atol=1e-12)

    def test_deep_network_logits_stay_finite(self):
        params = init_params(8, 16, L, seed=9)
        rng = np.random.default_rng(10)
        for _ in range(4):
            rod = rng.normal(size=(250, 3, L, 6)) * rng.uniform(0.01, 100.0, size=(250, 3, 1, 6))
            tendon = rng.normal(size=(250, 9, L, 1))
            rod = (rod - rod.mean(axis=2, keepdims=True)) / (rod.std(axis=2, keepdims=True) + 1e-8)
            tendon = (tendon - tendon.mean(axis=2, keepdims=True)) / (tendon.std(axis=2, keepdims=True) + 1e-8)
            logits = hgnn_forward((rod, tendon), self.graph, params).values
            self.assertEqual(logits.shape, (250, 6))
            self.assertTrue(np.all(np.isfinite(logits)))

    def test_endcaps_see_tendons_only_through_tendon_messages(self):
        rod, tendon = random_windows(4, seed=7)
        other_tendon = random_windows(4, seed=8)[1]
        changed = np.max(np.abs(hgnn_forward((rod, tendon), self.graph, self.params).values -
                                hgnn_forward((rod, other_tendon), self.graph, self.params).values))
        self.assertGreater(changed, 0.0)

        for k in range(1, K + 1):
            self.params[f"mp{k}.msg.tendon_to_endcap.w"].values[...] = 0.0
            self.params[f"mp{k}.msg.tendon_to_endcap.b"].values[...] = 0.0
        group = canonical_group()
        for forward in (lambda t: hgnn_forward((rod, t), self.graph, self.params),
                        lambda t: sym_forward((rod, t), self.graph, self.params, group)):
            np.testing.assert_array_equal(forward(tendon).values, forward(other_tendon).values)


class TestEquivariance(unittest.TestCase):
    """Group-averaged logits move with the endcaps under every group element"""

    def setUp(self):
        self.graph = assemble_graph(build_canonical_topology())
        self.group = canonical_group()

    def check_equivariance(self, mode, dtype, tolerance):
        rod, tendon = random_windows(20, seed=11, dtype=dtype)
        for seed in range(5):
            params = init_params(K, H, L, seed=seed, group_mode=mode, dtype=dtype)
            base = sym_forward((rod, tendon), self.graph, params, self.group).values
            for g in self.group:
                moved_rod, moved_tendon, _ = apply_group_to_arrays(g, rod, tendon, None, mode)
                moved = sym_forward((moved_rod, moved_tendon), self.graph, params, self.group).values
                expected = act_on_rows(base, g.endcap_perm, axis=-1)
                self.assertLess(np.max(np.abs(moved - expected)), tolerance, f"{mode} {g.label}")

    def test_index_only_double(self):
        self.check_equivariance("index-only", np.float64, 1e-9)

    def test_physical_double(self):
        self.check_equivariance("physical", np.float64, 1e-9)

    def test_physical_single(self):
        self.check_equivariance("physical", np.float32, 1e-4)

    def test_loss_invariant_under_joint_transform(self):
        rod, tendon = random_windows(8, seed=14)
        labels = np.random.default_rng(15).integers(0, 2, size=(8, 6))
        for mode in ("index-only", "physical"):
            params = init_params(K, H, L, seed=2, group_mode=mode)
            base = bce_with_logits(sym_forward((rod, tendon), self.graph, params, self.group), labels).item()
            for g in self.group:
                moved_rod, moved_tendon, moved_labels = apply_group_to_arrays(g, rod, tendon, labels, mode)
                moved = bce_with_logits(sym_forward((moved_rod, moved_tendon), self.graph, params, self.group),
                                        moved_labels).item()
                self.assertAlmostEqual(moved, base, delta=1e-10, msg=f"{mode} {g.label}")

    def test_symmetrizing_twice_changes_nothing(self):
        rod, tendon = random_windows(6, seed=16)
        for mode in ("index-only", "physical"):
            params = init_params(K, H, L, seed=3, group_mode=mode)
            once = sym_forward((rod, tendon), self.graph, params, self.group).values
            total = np.zeros_like(once)
            for g in self.group:
                moved_rod, moved_tendon, _ = apply_group_to_arrays(g, rod, tendon, None, mode)
                output = sym_forward((moved_rod, moved_tendon), self.graph, params, self.group).values
                total += output[..., list(g.endcap_perm)]
            np.testing.assert_allclose(total / len(self.group), once, atol=1e-9)

    def test_plain_network_already_permutation_equivariant(self):
        # typed message passing respects every graph automorphism
        rod, tendon = random_windows(5, seed=12)
        params = init_params(K, H, L, seed=0)
        base = hgnn_forward((rod, tendon), self.graph, params).values
        for g in self.group:
            moved_rod, moved_tendon, _ = apply_group_to_arrays(g, rod, tendon)
            moved = hgnn_forward((moved_rod, moved_tendon), self.graph, params).values
            np.testing.assert_allclose(moved, act_on_rows(base, g.endcap_perm, axis=-1), atol=1e-9)

    def test_plain_network_not_equivariant_under_sign_flips(self):
        rod, tendon = random_windows(5, seed=13)
        params = init_params(K, H, L, seed=0, group_mode="physical")
        f = self.group.by_label("f")
        base = hgnn_forward((rod, tendon), self.graph, params).values
        moved_rod, moved_tendon, _ = apply_group_to_arrays(f, rod, tendon, None, "physical")
        moved = hgnn_forward((moved_rod, moved_tendon), self.graph, params).values
        self.assertGreater(np.max(np.abs(moved - act_on_rows(base, f.endcap_perm, axis=-1))), 1e-6)


class TestLoss(unittest.TestCase):

    def test_zero_logits_give_log_two(self):
        loss = bce_with_logits(Tensor(np.zeros((4, 6))), np.random.default_rng(0).integers(0, 2, (4, 6)))
        self.assertAlmostEqual(loss.item(), np.log(2.0), places=12)

    def test_matches_probability_form(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-20.0, 20.0, size=(10000, 6))
        c = rng.integers(0, 2, size=(10000, 6)).astype(np.float64)
        direct = -(c * np.log(expit(x)) + (1.0 - c) * np.log(expit(-x))).mean()
        self.assertAlmostEqual(bce_with_logits(Tensor(x), c).item(), direct, delta=1e-9)

    def test_large_logits_stay_finite(self):
        loss = bce_with_logits(Tensor(np.array([[1e4, -1e4, 800.0, -800.0, 0.0, 5.0]])),
                               np.array([[0, 1, 1, 0, 1, 0]]))
        self.assertTrue(np.isfinite(loss.item()))

    def test_shape_checked(self):
        with self.assertRaises(ShapeMismatch):
            bce_with_logits(Tensor(np.zeros((2, 6))), np.zeros((2, 5)))

    def test_gradient_of_full_pipeline(self):
        graph = assemble_graph(build_canonical_topology())
        group = canonical_group()
        params = init_params(1, 4, L, seed=5, group_mode="physical")
        rod, tendon = random_windows(2, seed=6)
        labels = np.random.default_rng(7).integers(0, 2, (2, 6)).astype(np.float64)

        def loss(_):
            return bce_with_logits(model_forward((rod, tendon), graph, params, group), labels)

        error = finite_difference_check(loss, params.parameters(), max_entries=3,
                                        rng=np.random.default_rng(8))
        self.assertLess(error, 1e-4)


class TestPrediction(unittest.TestCase):

    def test_strict_threshold(self):
        logits = np.array([[0.0, 1e-9, -1e-9, 3.0, -3.0, 0.0]])
        np.testing.assert_array_equal(predict_contacts(logits), [[0, 1, 0, 1, 0, 0]])

    def test_custom_threshold(self):
        logits = np.log(np.array([[0.7, 0.8, 0.95, 0.1, 0.84, 0.9]]) /
                        (1 - np.array([[0.7, 0.8, 0.95, 0.1, 0.84, 0.9]])))
        np.testing.assert_array_equal(predict_contacts(logits, 0.85), [[0, 0, 1, 0, 0, 1]])
        with self.assertRaises(ConfigInvalid):
            predict_contacts(logits, 1.5)

    def test_probabilities(self):
        np.testing.assert_allclose(contact_probabilities(np.zeros(6)), np.full(6, 0.5))


if __name__ == '__main__':
    unittest.main(verbosity=2)
