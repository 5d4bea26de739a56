#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Test script for deskinfer tensor kernels.
This script tests matmul, linear, layer norm, masked softmax and attention.
"""

import os
import sys
import math
import logging
import unittest

import numpy as np

# Add parent directory to path to import application modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from deskinfer.core.tensor_math import (
    AttentionMask, MacCounter, MaskKind, gelu, layer_norm, linear, masked_softmax, matmul, max_abs_diff,
    mlp_forward, multi_head_attention, tensor,
)
from deskinfer.errors import DimensionError, NumericalError

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler()
    ]
)

LENGTH_KINDS = (MaskKind.LENGTH_BASED, MaskKind.CAUSAL_LENGTH_BASED)


def reference_attention(x, weights, heads, causal):
    """Attention computed one batch, head and query position at a time."""
    wq, bq, wk, bk, wv, bv, wo, bo = (np.asarray(w) for w in weights)
    q, k, v = x @ wq + bq, x @ wk + bk, x @ wv + bv
    batch, seq, hidden = x.shape
    dim = hidden // heads
    context = np.zeros((batch, seq, hidden))
    for b in range(batch):
        for h in range(heads):
            cols = slice(h * dim, (h + 1) * dim)
            for i in range(seq):
                keys = range(i + 1) if causal else range(seq)
                scores = [float(q[b, i, cols] @ k[b, j, cols]) / math.sqrt(dim) for j in keys]
                top = max(scores)
                weights_i = [math.exp(s - top) for s in scores]
                total = sum(weights_i)
                for j, w in zip(keys, weights_i):
                    context[b, i, cols] += (w / total) * v[b, j, cols]
    return context @ wo + bo


class TestTensor(unittest.TestCase):
    """Test tensor construction."""

    def test_tensor_is_read_only_float64(self):
        """Test that tensors are float64 and cannot be written."""
        t = tensor([[1, 2], [3, 4]])
        self.assertEqual(t.dtype, np.float64)
        with self.assertRaises(ValueError):
            t[0, 0] = 5.0

    def test_tensor_from_flat_data(self):
        """Test reshaping flat row-major data."""
        t = tensor([1, 2, 3, 4, 5, 6], shape=(2, 3))
        self.assertEqual(t.shape, (2, 3))
        self.assertEqual(t[1, 0], 4.0)

    def test_tensor_rejects_bad_input(self):
        """Test shape mismatch, empty dimensions and non-finite values."""
        with self.assertRaises(DimensionError):
            tensor([1, 2, 3], shape=(2, 2))
        with self.assertRaises(DimensionError):
            tensor(np.zeros((0, 3)))
        with self.assertRaises(NumericalError):
            tensor([1.0, np.nan])
        with self.assertRaises(NumericalError):
            tensor([np.inf])


class TestMatmul(unittest.TestCase):
    """Test matmul and linear."""

    def setUp(self):
        """Set up test environment."""
        rng = np.random.default_rng(7)
        self.a = tensor(rng.standard_normal((5, 6)))
        self.b = tensor(rng.standard_normal((6, 3)))

    def test_matmul_matches_numpy(self):
        """Test the product against numpy."""
        self.assertLess(max_abs_diff(matmul(self.a, self.b), tensor(self.a @ self.b)), 1e-12)

    def test_rows_are_independent(self):
        """Test that a row's result does not depend on the other rows."""
        full = matmul(self.a, self.b)
        for i in range(self.a.shape[0]):
            single = matmul(tensor(self.a[i:i + 1]), self.b)
            self.assertTrue(np.array_equal(single[0], full[i]))
        subset = matmul(tensor(self.a[[4, 1]]), self.b)
        self.assertTrue(np.array_equal(subset, full[[4, 1]]))

    def test_matmul_dimension_mismatch(self):
        """Test that inner dimensions must agree."""
        with self.assertRaises(DimensionError):
            matmul(self.a, self.a)

    def test_linear_counts_macs(self):
        """Test that linear adds rows * k * n to the counter."""
        macs = MacCounter()
        x = tensor(np.ones((2, 3, 6)))
        out = linear(x, self.b, tensor(np.ones(3)), macs)
        self.assertEqual(out.shape, (2, 3, 3))
        self.assertEqual(macs.value, 2 * 3 * 6 * 3)
        macs.reset()
        self.assertEqual(macs.value, 0)

    def test_linear_bias_shape(self):
        """Test that a wrong bias shape is rejected."""
        with self.assertRaises(DimensionError):
            linear(self.a, self.b, tensor(np.ones(4)))


class TestNormalization(unittest.TestCase):
    """Test layer norm and GELU."""

    def test_layer_norm_rows(self):
        """Test that each row is normalized to mean 0 and variance 1."""
        rng = np.random.default_rng(1)
        x = tensor(rng.standard_normal((4, 8)) * 3 + 2)
        out = layer_norm(x, tensor(np.ones(8)), tensor(np.zeros(8)), eps=0.0)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-12)

    def test_layer_norm_constant_row(self):
        """Test that a constant row normalizes to beta even with eps 0."""
        x = tensor(np.full((1, 4), 3.0))
        beta = tensor([0.5, 0.5, 0.5, 0.5])
        out = layer_norm(x, tensor(np.ones(4)), beta, eps=0.0)
        np.testing.assert_array_equal(out[0], beta)

    def test_layer_norm_width_mismatch(self):
        """Test that gamma must match the hidden width."""
        with self.assertRaises(DimensionError):
            layer_norm(tensor(np.ones((2, 4))), tensor(np.ones(3)), tensor(np.zeros(3)))

    def test_gelu(self):
        """Test fixed points of the tanh approximation."""
        out = gelu(tensor([0.0, 10.0, -10.0]))
        self.assertEqual(out[0], 0.0)
        self.assertAlmostEqual(out[1], 10.0, places=9)
        self.assertAlmostEqual(out[2], 0.0, places=9)


class TestMaskedSoftmax(unittest.TestCase):
    """Test attention masks and masked softmax."""

    def setUp(self):
        """Set up test environment."""
        rng = np.random.default_rng(3)
        self.scores = tensor(rng.standard_normal((2, 1, 4, 4)))

    def test_causal_mask(self):
        """Test that future positions get exactly zero weight."""
        probs = masked_softmax(self.scores, AttentionMask(MaskKind.CAUSAL))
        upper = np.triu(np.ones((4, 4), dtype=bool), k=1)
        self.assertTrue(np.all(probs[:, :, upper] == 0.0))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_length_mask(self):
        """Test that padded key positions get exactly zero weight."""
        mask = AttentionMask(MaskKind.LENGTH_BASED, (2, 4))
        probs = masked_softmax(self.scores, mask)
        self.assertTrue(np.all(probs[0, :, :, 2:] == 0.0))
        self.assertTrue(np.all(probs[1] > 0.0))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_mask_for_batch(self):
        """Test the mask kinds picked for padded and unpadded batches."""
        self.assertIs(AttentionMask.for_batch(True, None).kind, MaskKind.CAUSAL)
        self.assertIs(AttentionMask.for_batch(False, None).kind, MaskKind.NONE)
        self.assertIs(AttentionMask.for_batch(True, [1, 2]).kind, MaskKind.CAUSAL_LENGTH_BASED)
        self.assertIs(AttentionMask.for_batch(False, [1, 2]).kind, MaskKind.LENGTH_BASED)

    def test_mask_validation(self):
        """Test that length-based masks need valid lengths that fit the batch."""
        with self.assertRaises(DimensionError):
            AttentionMask(MaskKind.LENGTH_BASED)
        with self.assertRaises(DimensionError):
            AttentionMask(MaskKind.LENGTH_BASED, (0, 2))
        with self.assertRaises(DimensionError):
            masked_softmax(self.scores, AttentionMask(MaskKind.LENGTH_BASED, (5, 4)))
        with self.assertRaises(DimensionError):
            masked_softmax(self.scores, AttentionMask(MaskKind.LENGTH_BASED, (4,)))


class TestAttention(unittest.TestCase):
    """Test multi-head attention."""

    def setUp(self):
        """Set up test environment."""
        rng = np.random.default_rng(5)
        self.hidden = 8
        self.weights = []
        for _ in range(4):
            self.weights.append(tensor(rng.uniform(-0.1, 0.1, (self.hidden, self.hidden))))
            self.weights.append(tensor(rng.uniform(-0.1, 0.1, self.hidden)))
        self.x = tensor(rng.standard_normal((2, 3, self.hidden)))

    def test_output_shape_and_macs(self):
        """Test the output shape and the four projections' MACs."""
        macs = MacCounter()
        out = multi_head_attention(self.x, *self.weights, heads=2, mask=AttentionMask(MaskKind.CAUSAL),
                                   macs=macs)
        self.assertEqual(out.shape, (2, 3, self.hidden))
        self.assertEqual(macs.value, 4 * 2 * 3 * self.hidden * self.hidden)

    def test_heads_must_divide_hidden(self):
        """Test that the head count must divide the hidden size."""
        with self.assertRaises(DimensionError):
            multi_head_attention(self.x, *self.weights, heads=3, mask=AttentionMask())

    def test_max_abs_diff_shapes(self):
        """Test that comparing different shapes is rejected."""
        with self.assertRaises(DimensionError):
            max_abs_diff(tensor(np.ones(2)), tensor(np.ones(3)))

    def test_matches_per_head_loop(self):
        """Test every head against a position-by-position softmax over its keys."""
        heads = 2
        for kind in (MaskKind.NONE, MaskKind.CAUSAL):
            with self.subTest(kind=kind):
                out = multi_head_attention(self.x, *self.weights, heads=heads, mask=AttentionMask(kind))
                expected = reference_attention(self.x, self.weights, heads, causal=kind is MaskKind.CAUSAL)
                np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_constant_scores_average_values(self):
        """Test that zero query weights give the mean of the values over all keys."""
        wq, bq = tensor(np.zeros((self.hidden, self.hidden))), tensor(np.zeros(self.hidden))
        _, _, wk, bk, wv, bv, wo, bo = self.weights
        out = multi_head_attention(self.x, wq, bq, wk, bk, wv, bv, wo, bo, heads=1, mask=AttentionMask())
        values = self.x @ wv + bv
        expected = np.broadcast_to(values.mean(axis=1, keepdims=True), values.shape) @ wo + bo
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_single_position(self):
        """Test that one position attends only to itself."""
        x = tensor(self.x[:, :1, :])
        _, _, _, _, wv, bv, wo, bo = self.weights
        out = multi_head_attention(x, *self.weights, heads=2, mask=AttentionMask(MaskKind.CAUSAL))
        np.testing.assert_allclose(out, (x @ wv + bv) @ wo + bo, rtol=0, atol=1e-12)


class TestMlp(unittest.TestCase):
    """Test the feed-forward block."""

    def setUp(self):
        """Set up test environment."""
        rng = np.random.default_rng(9)
        self.x = tensor(rng.standard_normal((2, 3, 4)))
        self.w1 = tensor(rng.uniform(-0.5, 0.5, (4, 16)))
        self.b1 = tensor(rng.uniform(-0.5, 0.5, 16))
        self.w2 = tensor(rng.uniform(-0.5, 0.5, (16, 4)))
        self.b2 = tensor(rng.uniform(-0.5, 0.5, 4))

    def test_zero_path_returns_bias(self):
        """Test that zero first-layer weights leave only the output bias."""
        zeros_w, zeros_b = tensor(np.zeros((4, 16))), tensor(np.zeros(16))
        out = mlp_forward(self.x, zeros_w, zeros_b, self.w2, self.b2)
        np.testing.assert_array_equal(out, np.broadcast_to(self.b2, out.shape))

    def test_matches_composition(self):
        """Test linear, tanh GELU, linear written out by hand."""
        macs = MacCounter()
        out = mlp_forward(self.x, self.w1, self.b1, self.w2, self.b2, macs)
        h = self.x @ self.w1 + self.b1
        h = 0.5 * h * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (h + 0.044715 * h ** 3)))
        np.testing.assert_allclose(out, h @ self.w2 + self.b2, rtol=0, atol=1e-9)
        self.assertEqual(macs.value, 2 * 2 * 3 * 4 * 16)

    def test_inconsistent_weights(self):
        """Test that mismatched weight shapes are rejected."""
        with self.assertRaises(DimensionError):
            mlp_forward(self.x, self.w1, self.b1, tensor(np.zeros((8, 4))), self.b2)


class TestNumericsOverSeeds(unittest.TestCase):
    """Test kernel properties over many random seeds."""

    SEEDS = range(100)

    def test_softmax_rows_sum_to_one(self):
        """Test normalization under every mask kind."""
        for seed in self.SEEDS:
            rng = np.random.default_rng(seed)
            batch, seq = int(rng.integers(1, 4)), int(rng.integers(1, 9))
            scores = tensor(rng.standard_normal((batch, 2, seq, seq)) * 10.0)
            lens = tuple(int(n) for n in rng.integers(1, seq + 1, size=batch))
            for kind in MaskKind:
                mask = AttentionMask(kind, lens if kind in LENGTH_KINDS else None)
                probs = masked_softmax(scores, mask)
                np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
                self.assertTrue(np.all(probs[~np.broadcast_to(mask.allowed(batch, seq), probs.shape)] == 0.0))

    def test_layer_norm_statistics(self):
        """Test zero mean and unit variance of every normalized row."""
        for seed in self.SEEDS:
            rng = np.random.default_rng(seed)
            hidden = int(rng.integers(2, 33))
            x = tensor(rng.standard_normal((3, hidden)) * rng.uniform(0.1, 100.0) + rng.uniform(-50, 50))
            out = layer_norm(x, tensor(np.ones(hidden)), tensor(np.zeros(hidden)), eps=0.0)
            np.testing.assert_allclose(out.mean(axis=-1), 0.0, rtol=0, atol=1e-12)
            np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=0, atol=1e-10)

    def test_matmul_and_attention(self):
        """Test matmul against numpy and attention against the per-head loop."""
        for seed in self.SEEDS:
            rng = np.random.default_rng(seed)
            a = tensor(rng.standard_normal((3, 5)))
            b = tensor(rng.standard_normal((5, 4)))
            np.testing.assert_allclose(matmul(a, b), a @ b, rtol=0, atol=1e-12)
            weights = []
            for _ in range(4):
                weights.append(tensor(rng.uniform(-0.3, 0.3, (8, 8))))
                weights.append(tensor(rng.uniform(-0.3, 0.3, 8)))
            x = tensor(rng.standard_normal((1, 4, 8)))
            out = multi_head_attention(x, *weights, heads=2, mask=AttentionMask(MaskKind.CAUSAL))
            np.testing.assert_allclose(out, reference_attention(x, weights, 2, causal=True), rtol=0, atol=1e-12)


def run_tests():
    """Run all tests."""
    unittest.main()


if __name__ == "__main__":
    run_tests()
