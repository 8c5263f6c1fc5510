import math

import numpy as np
import pytest

from gated_cascade.gating import (
    NeuralTreeGate,
    SoftmaxGate,
    gate_backward,
    leaf_probabilities,
    left_child,
    right_child,
    routing_prob,
    softmax_gate,
)
from gated_cascade.tensor import ShapeError

from _fd import numeric_grad, rel_error
from _oracles import path_product_oracle


def random_tree(rng, feature_dim, depth, scale=1.0, dtype=np.float64):
    n = 2**depth - 1
    return NeuralTreeGate(
        (rng.normal(size=(feature_dim, n)) * scale).astype(dtype), (rng.normal(size=n) * scale).astype(dtype)
    )


class TestRoutingProb:
    def test_zero_parameters(self, rng):
        assert routing_prob(np.zeros(4), 0.0, rng.normal(size=4)) == 0.5

    def test_saturates_left(self, rng):
        assert routing_prob(np.zeros(3), 1e4, rng.normal(size=3)) == 1.0

    def test_against_scalar_oracle(self, rng):
        for _ in range(50):
            w, x, b = rng.normal(size=6), rng.normal(size=6), rng.normal()
            ref = 1.0 / (1.0 + math.exp(-(sum(wi * xi for wi, xi in zip(w, x)) + b)))
            assert abs(routing_prob(w, b, x) - ref) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            routing_prob(np.zeros(3), 0.0, np.zeros(4))


class TestTreeStructure:
    def test_children_indexing(self):
        assert (left_child(0), right_child(0)) == (1, 2)
        assert (left_child(2), right_child(2)) == (5, 6)

    def test_node_accessor(self, rng):
        tree = random_tree(rng, 3, 2)
        w, b = tree.node(2)
        np.testing.assert_array_equal(w, tree.weight.data[:, 2])
        assert b == tree.bias.data[2]

    def test_rejects_non_tree_node_count(self):
        with pytest.raises(ShapeError):
            NeuralTreeGate(np.zeros((3, 4)), np.zeros(4))


class TestLeafProbabilities:
    def test_depth_one(self):
        logit = math.log(0.7 / 0.3)
        tree = NeuralTreeGate(np.zeros((2, 1)), np.array([logit]))
        np.testing.assert_allclose(leaf_probabilities(tree, np.ones(2)), [0.7, 0.3], atol=1e-15)

    def test_depth_two_uniform(self):
        tree = NeuralTreeGate.zeros(5, 2, dtype=np.float64)
        np.testing.assert_array_equal(leaf_probabilities(tree, np.arange(5.0)), [0.25] * 4)

    def test_depth_three_against_path_products(self, rng):
        tree = random_tree(rng, 4, 3)
        x = rng.normal(size=4)
        mu = leaf_probabilities(tree, x)
        assert np.max(np.abs(mu - path_product_oracle(tree.weight.data, tree.bias.data, x))) < 1e-12

    def test_batch_matches_single(self, rng):
        tree = random_tree(rng, 4, 3)
        xs = rng.normal(size=(5, 4))
        batch = leaf_probabilities(tree, xs)
        for x, row in zip(xs, batch):
            np.testing.assert_allclose(leaf_probabilities(tree, x), row, rtol=0, atol=1e-14)

    def test_normalised_over_many_trees_single_precision(self):
        rng = np.random.default_rng(0)
        for trial in range(1000):
            depth = 1 + trial % 7
            tree = random_tree(rng, 6, depth, scale=rng.uniform(0.1, 5.0), dtype=np.float32)
            mu = leaf_probabilities(tree, rng.normal(size=(3, 6)).astype(np.float32))
            assert mu.dtype == np.float32
            assert np.all(np.abs(mu.sum(axis=1) - 1) < 1e-6)
            assert np.all((mu >= 0) & (mu <= 1))

    def test_normalised_double_precision(self, rng):
        for depth in range(1, 8):
            tree = random_tree(rng, 5, depth, scale=3.0)
            mu = leaf_probabilities(tree, rng.normal(size=(20, 5)))
            assert np.all(np.abs(mu.sum(axis=1) - 1) < 1e-12)

    @pytest.mark.parametrize("node", [0, 1, 2, 4])
    def test_sibling_swap_with_sign_flip_permutes_leaf_blocks(self, rng, node):
        depth = 3
        tree = random_tree(rng, 4, depth)
        x = rng.normal(size=4)
        before = leaf_probabilities(tree, x)

        w, b = tree.weight.data.copy(), tree.bias.data.copy()
        w[:, node], b[node] = -w[:, node], -b[node]

        def subtree(root):
            nodes, frontier = [], [root]
            while frontier:
                n = frontier.pop(0)
                if n < w.shape[1]:
                    nodes.append(n)
                    frontier += [left_child(n), right_child(n)]
            return nodes

        left, right = subtree(left_child(node)), subtree(right_child(node))
        w[:, left + right] = w[:, right + left]
        b[left + right] = b[right + left]
        after = leaf_probabilities(NeuralTreeGate(w, b), x)

        level = int(math.log2(node + 1))
        span = 2 ** (depth - level)
        start = (node - (2**level - 1)) * span
        half = span // 2
        expected = before.copy()
        expected[start : start + half] = before[start + half : start + span]
        expected[start + half : start + span] = before[start : start + half]
        np.testing.assert_allclose(after, expected, atol=1e-14)


class TestSoftmaxGate:
    def test_zero_parameters_uniform(self, rng):
        gate = SoftmaxGate.zeros(4, 8, dtype=np.float64)
        np.testing.assert_allclose(softmax_gate(gate, rng.normal(size=4)), 1 / 8, atol=1e-15)

    def test_saturated_bias_is_one_hot(self, rng):
        bias = np.zeros(5)
        bias[3] = 1e6
        gate = SoftmaxGate(np.zeros((4, 5)), bias)
        np.testing.assert_array_equal(softmax_gate(gate, rng.normal(size=4)), np.eye(5)[3])

    def test_against_affine_softmax_composition(self, rng):
        gate = SoftmaxGate(rng.normal(size=(6, 4)), rng.normal(size=4))
        x = rng.normal(size=6)
        z = x @ gate.weight.data + gate.bias.data
        ref = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        assert np.max(np.abs(softmax_gate(gate, x) - ref)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            softmax_gate(SoftmaxGate.zeros(4, 3), np.zeros(5))


class TestGateBackward:
    def _fd_check(self, gate, x, upstream):
        grads, gx = gate_backward(gate, x, upstream)

        def f():
            return float(np.dot(upstream, leaf_or_softmax(gate, x)))

        for name, p in (("weight", gate.weight), ("bias", gate.bias)):
            assert rel_error(grads[name], numeric_grad(f, p.data)) < 1e-6
        assert rel_error(gx, numeric_grad(f, x)) < 1e-6

    def test_uniform_tree_one_hot_upstream(self, rng):
        tree = NeuralTreeGate.zeros(5, 3, dtype=np.float64)
        x = rng.normal(size=5)
        for leaf in range(8):
            self._fd_check(tree, x, np.eye(8)[leaf])

    def test_random_tree_and_softmax(self, rng):
        self._fd_check(random_tree(rng, 5, 3), rng.normal(size=5), rng.normal(size=8))
        gate = SoftmaxGate(rng.normal(size=(5, 6)), rng.normal(size=6))
        self._fd_check(gate, rng.normal(size=5), rng.normal(size=6))

    def test_zero_upstream_gives_zero(self, rng):
        tree = random_tree(rng, 4, 3)
        grads, gx = gate_backward(tree, rng.normal(size=4), np.zeros(8))
        assert not np.any(grads["weight"]) and not np.any(grads["bias"]) and not np.any(gx)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_saturated_nodes_stay_finite(self, rng, dtype):
        depth = 4
        n = 2**depth - 1
        bias = np.where(rng.uniform(size=n) < 0.5, -30.0, 30.0).astype(dtype)
        tree = NeuralTreeGate(np.zeros((3, n), dtype), bias)
        grads, gx = gate_backward(tree, rng.normal(size=3), rng.normal(size=2**depth))
        for g in (grads["weight"], grads["bias"], gx):
            assert np.all(np.isfinite(g))

    def test_saturation_beyond_float_range_stays_finite(self, rng):
        tree = NeuralTreeGate(np.zeros((2, 7), np.float32), np.full(7, 1e4, np.float32))
        grads, _ = gate_backward(tree, rng.normal(size=2), np.ones(8))
        assert np.all(np.isfinite(grads["bias"]))


def leaf_or_softmax(gate, x):
    if isinstance(gate, NeuralTreeGate):
        return leaf_probabilities(gate, x)
    return softmax_gate(gate, x)
