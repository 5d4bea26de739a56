#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Test script for the deskinfer reference model.
This script tests parameter building, batches, checkpoints and the serial forward pass.
"""

import os
import sys
import shutil
import logging
import tempfile
import unittest

import numpy as np

# Add parent directory to path to import application modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from deskinfer.core.model import (
    Batch, ModelConfig, build_layer, build_model, embed, layer_param_count, load_checkpoint, make_batch,
    param_count, random_batch, save_checkpoint, serial_forward, valid_max_abs_diff,
)
from deskinfer.core.tensor_math import MacCounter, layer_norm, max_abs_diff, tensor
from deskinfer.errors import ConfigurationError, ValidationError

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler()
    ]
)


class TestModelConfig(unittest.TestCase):
    """Test ModelConfig and parameter counts."""

    def test_defaults(self):
        """Test derived sizes of the default configuration."""
        config = ModelConfig()
        self.assertEqual(config.hidden, 32)
        self.assertEqual(config.ffn_dim, 128)

    def test_gpt3_layer_param_count(self):
        """Test the per-layer parameter count at GPT-3 width."""
        config = ModelConfig(num_layers=96, num_heads=96, head_dim=128, vocab_size=50257, max_seq=2048)
        self.assertEqual(layer_param_count(config), 1812099072)

    def test_param_count_matches_built_model(self):
        """Test that param_count agrees with the built tensors."""
        config = ModelConfig(num_layers=2)
        params = build_model(config)
        self.assertEqual(param_count(config) * 8, params.nbytes)

    def test_invalid_config(self):
        """Test rejected configurations."""
        with self.assertRaises(ConfigurationError):
            ModelConfig(num_heads=0)
        with self.assertRaises(ConfigurationError):
            ModelConfig(norm_position="middle")
        with self.assertRaises(ConfigurationError):
            ModelConfig(num_layers=-1)

    def test_from_dict_ignores_unknown_keys(self):
        """Test building a config from a dictionary with extra keys."""
        config = ModelConfig.from_dict({'num_layers': 2, 'comment': 'tiny'})
        self.assertEqual(config.num_layers, 2)
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)


class TestBuildModel(unittest.TestCase):
    """Test deterministic parameter building."""

    def setUp(self):
        """Set up test environment."""
        self.config = ModelConfig()

    def test_same_seed_same_parameters(self):
        """Test that building twice is bit-identical."""
        self.assertEqual(build_model(self.config).checksum(), build_model(self.config).checksum())

    def test_different_seed_different_parameters(self):
        """Test that the seed changes the parameters."""
        other = ModelConfig(seed=1)
        self.assertNotEqual(build_model(self.config).checksum(), build_model(other).checksum())

    def test_layer_built_alone_matches_model(self):
        """Test that a worker building only its layer gets the same values."""
        params = build_model(self.config)
        layer = build_layer(self.config, 2)
        for (name, expected), (_, actual) in zip(params.layers[2].tensors(), layer.tensors()):
            self.assertTrue(np.array_equal(expected, actual), name)

    def test_initial_ranges(self):
        """Test uniform weights and unit layer norms."""
        layer = build_model(self.config).layers[0]
        self.assertLessEqual(np.abs(layer.wq).max(), 0.02)
        self.assertTrue(np.all(layer.ln1_gamma == 1.0))
        self.assertTrue(np.all(layer.ln2_beta == 0.0))

    def test_layer_index_out_of_range(self):
        """Test that building a missing layer is rejected."""
        with self.assertRaises(ConfigurationError):
            build_layer(self.config, self.config.num_layers)


class TestBatch(unittest.TestCase):
    """Test batch construction and validation."""

    def setUp(self):
        """Set up test environment."""
        self.config = ModelConfig()

    def test_make_batch_pads(self):
        """Test padding with the pad id."""
        batch = make_batch(0, [[5, 6, 7], [8]], s_pad=4)
        self.assertEqual(batch.token_ids.shape, (2, 4))
        self.assertEqual(batch.seq_lens, (3, 1))
        self.assertEqual(batch.valid_tokens, 4)
        self.assertTrue(np.all(batch.token_ids[1, 1:] == 0))

    def test_tokens_beyond_length_rejected(self):
        """Test that non-pad tokens past a sequence's length are rejected."""
        with self.assertRaises(ValidationError):
            Batch(0, np.array([[1, 2, 3]]), (2,))
        with self.assertRaises(ValidationError):
            Batch(0, np.array([[1, 2]]), (3,))

    def test_validate_against_model(self):
        """Test max_seq and vocabulary checks."""
        long_batch = make_batch(0, [[1] * (self.config.max_seq + 1)])
        with self.assertRaises(ValidationError):
            long_batch.validate(self.config)
        bad_token = make_batch(0, [[self.config.vocab_size]])
        with self.assertRaises(ValidationError):
            bad_token.validate(self.config)

    def test_random_batch_lengths(self):
        """Test that random batches honour given lengths."""
        rng = np.random.default_rng(0)
        batch = random_batch(rng, self.config, 3, 8, seq_lens=[8, 4, 1])
        self.assertEqual(batch.seq_lens, (8, 4, 1))
        batch.validate(self.config)


class TestSerialForward(unittest.TestCase):
    """Test the serial reference forward pass."""

    def setUp(self):
        """Set up test environment."""
        self.config = ModelConfig()
        self.params = build_model(self.config)

    def test_output_shape_and_macs(self):
        """Test output shape and linear MACs of one full pass."""
        batch = make_batch(0, [[1, 2, 3, 4], [5, 6]], s_pad=4)
        macs = MacCounter()
        out = serial_forward(self.params, batch, macs)
        self.assertEqual(out.shape, (2, 4, self.config.hidden))
        h = self.config.hidden
        self.assertEqual(macs.value, self.config.num_layers * 2 * 4 * 12 * h * h)

    def test_padding_does_not_change_valid_positions(self):
        """Test that a sequence's valid outputs do not depend on padding or batch mates."""
        seq = [3, 9, 27, 11, 5]
        alone = serial_forward(self.params, make_batch(0, [seq]))
        padded = serial_forward(self.params, make_batch(1, [[7, 7], seq], s_pad=12))
        self.assertLess(max_abs_diff(alone[0], tensor(padded[1, :len(seq)])), 1e-12)

    def test_causal_prefix(self):
        """Test that a decoder's prefix outputs ignore later tokens."""
        short = serial_forward(self.params, make_batch(0, [[4, 5, 6]]))
        longer = serial_forward(self.params, make_batch(0, [[4, 5, 6, 7, 8]]))
        self.assertLess(max_abs_diff(short[0], tensor(longer[0, :3])), 1e-12)

    def test_post_norm_variant(self):
        """Test that the post-norm layout runs and differs from pre-norm."""
        post = build_model(ModelConfig(norm_position="post"))
        batch = make_batch(0, [[1, 2, 3]])
        out = serial_forward(post, batch)
        self.assertEqual(out.shape, (1, 3, self.config.hidden))
        self.assertGreater(max_abs_diff(out, serial_forward(self.params, batch)), 0.0)

    def test_empty_layer_stack(self):
        """Test that a model without layers is embedding plus final norm."""
        config = ModelConfig(num_layers=0)
        params = build_model(config)
        batch = make_batch(0, [[1, 2]])
        expected = layer_norm(embed(params.embedding, params.position, batch.token_ids),
                              params.final_gamma, params.final_beta, config.layer_norm_eps)
        self.assertEqual(max_abs_diff(serial_forward(params, batch), expected), 0.0)

    def test_valid_max_abs_diff_ignores_padding(self):
        """Test that padding positions do not enter the comparison."""
        a = tensor(np.zeros((1, 3, 2)))
        b = np.zeros((1, 3, 2))
        b[0, 2] = 100.0
        self.assertEqual(valid_max_abs_diff(a, tensor(b), [2]), 0.0)
        self.assertEqual(valid_max_abs_diff(a, tensor(b), [3]), 100.0)


class TestCheckpoint(unittest.TestCase):
    """Test the checkpoint format."""

    def setUp(self):
        """Set up test environment."""
        self.temp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.temp_dir, "model.ckpt")
        self.params = build_model(ModelConfig(num_layers=2))

    def tearDown(self):
        """Clean up test environment."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_save_and_load(self):
        """Test that a loaded checkpoint is bit-identical."""
        save_checkpoint(self.params, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.config, self.params.config)
        self.assertEqual(loaded.checksum(), self.params.checksum())

    def test_header_then_data(self):
        """Test the JSON header line and the data size."""
        save_checkpoint(self.params, self.path)
        with open(self.path, 'rb') as f:
            header = f.readline()
            body = f.read()
        self.assertIn(b'"num_layers": 2', header)
        self.assertEqual(len(body), self.params.nbytes)

    def test_truncated_checkpoint(self):
        """Test that a short data section is rejected."""
        save_checkpoint(self.params, self.path)
        with open(self.path, 'rb+') as f:
            f.truncate(os.path.getsize(self.path) - 8)
        with self.assertRaises(ConfigurationError):
            load_checkpoint(self.path)

    def test_missing_checkpoint(self):
        """Test that a missing file is a configuration error."""
        with self.assertRaises(ConfigurationError):
            load_checkpoint(os.path.join(self.temp_dir, "absent.ckpt"))


def run_tests():
    """Run all tests."""
    unittest.main()


if __name__ == "__main__":
    run_tests()
