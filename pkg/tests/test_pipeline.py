#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Test script for the deskinfer pipeline.
This script tests key ordering, stage partitioning, result handles and
ordered execution under reordered command delivery.
"""

import os
import sys
import time
import shutil
import logging
import tempfile
import threading
import unittest
from unittest import mock

import numpy as np

# Add parent directory to path to import application modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from deskinfer.core.model import (
    ModelConfig, build_model, make_batch, random_batch, serial_forward, transformer_layer_forward, valid_max_abs_diff,
)
from deskinfer.core.tensor_math import tensor
from deskinfer.errors import ConfigurationError, ProtocolError, StageFailure
from deskinfer.runtime.engine import RuntimeConfig, initialize
from deskinfer.runtime.mempool import PoolConfig
from deskinfer.runtime.pipeline import (
    Command, ConsistencyQueue, LoopCounter, ResultHandle, TraceLog, engine_submit, partition_layers, result_wait,
    stage_params,
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler()
    ]
)


class TestConsistencyQueue(unittest.TestCase):
    """Test in-order release of keys."""

    def test_loop_counter(self):
        """Test consecutive keys."""
        counter = LoopCounter()
        self.assertEqual([counter.acquire() for _ in range(3)], [0, 1, 2])
        self.assertEqual(counter.value, 3)

    def test_out_of_order_inserts(self):
        """Test that keys pop in order whatever the insert order."""
        q = ConsistencyQueue()
        for key in (2, 0, 3, 1):
            q.insert(key, f"cmd{key}")
        popped = [q.pop_next(timeout=1) for _ in range(4)]
        self.assertEqual(popped, [(0, "cmd0"), (1, "cmd1"), (2, "cmd2"), (3, "cmd3")])
        self.assertEqual(len(q), 0)

    def test_pop_waits_for_missing_key(self):
        """Test that pop_next blocks until the next key arrives."""
        q = ConsistencyQueue()
        q.insert(1, "late")
        with self.assertRaises(ProtocolError):
            q.pop_next(timeout=0.05)
        threading.Timer(0.05, q.insert, args=(0, "early")).start()
        self.assertEqual(q.pop_next(timeout=2), (0, "early"))
        self.assertEqual(q.pop_next(timeout=1), (1, "late"))

    def test_duplicate_and_consumed_keys(self):
        """Test that a key is accepted only once."""
        q = ConsistencyQueue()
        q.insert(0, "a")
        with self.assertRaises(ProtocolError):
            q.insert(0, "b")
        q.pop_next(timeout=1)
        with self.assertRaises(ProtocolError):
            q.insert(0, "c")

    def test_capacity_admits_next_key(self):
        """Test that a full queue blocks far keys but admits the awaited one."""
        q = ConsistencyQueue(capacity=2)
        q.insert(1, "b")
        with self.assertRaises(ProtocolError):
            q.insert(2, "c", timeout=0.05)
        q.insert(0, "a", timeout=0.05)
        self.assertEqual(q.pop_next(timeout=1), (0, "a"))
        q.insert(2, "c", timeout=0.05)
        self.assertEqual(len(q), 2)

    def test_close(self):
        """Test that a closed queue ends the consumer."""
        q = ConsistencyQueue()
        q.close()
        self.assertIsNone(q.pop_next(timeout=1))
        with self.assertRaises(ConfigurationError):
            ConsistencyQueue(capacity=0)


class TestPartition(unittest.TestCase):
    """Test splitting layers into stages."""

    def test_even_split(self):
        """Test four equal stages."""
        plan = partition_layers(12, 4)
        self.assertEqual(plan.ranges, ((0, 3), (3, 6), (6, 9), (9, 12)))
        self.assertTrue(plan.is_first(0))
        self.assertTrue(plan.is_last(3))

    def test_uneven_split(self):
        """Test that earlier stages take the extra layer."""
        plan = partition_layers(5, 2)
        self.assertEqual([len(plan.layers_of(s)) for s in range(2)], [3, 2])

    def test_invalid_split(self):
        """Test rejected stage counts."""
        with self.assertRaises(ConfigurationError):
            partition_layers(3, 4)
        with self.assertRaises(ConfigurationError):
            partition_layers(3, 0)

    def test_stage_params(self):
        """Test embeddings on the first stage and the final norm on the last."""
        config = ModelConfig()
        plan = partition_layers(config.num_layers, 2)
        first = stage_params(config, plan, 0, 1, 0)
        last = stage_params(config, plan, 1, 2, 1)
        self.assertIsNotNone(first.embedding)
        self.assertIsNone(first.final_gamma)
        self.assertIsNone(last.embedding)
        self.assertEqual(len(last.layers), 2)
        self.assertEqual(last.layers[0].tp_rank, 1)


class TestResultHandle(unittest.TestCase):
    """Test result handles and commands."""

    def test_first_outcome_wins(self):
        """Test that later outcomes are ignored."""
        handle = ResultHandle(0, 10)
        self.assertTrue(handle._settle(tensor([1.0]), None))
        self.assertFalse(handle._settle(None, StageFailure(0, 1)))
        self.assertEqual(result_wait(handle, 1)[0], 1.0)

    def test_failure_is_raised(self):
        """Test that a failed key raises its StageFailure."""
        handle = ResultHandle(3, 3)
        handle._settle(None, StageFailure(3, 1, "boom"))
        with self.assertRaises(StageFailure) as cm:
            handle.wait(1)
        self.assertEqual((cm.exception.key, cm.exception.stage), (3, 1))

    def test_timeout(self):
        """Test waiting on a pending handle."""
        with self.assertRaises(ProtocolError):
            ResultHandle(0, 0).wait(0.01)

    def test_callbacks_run_before_waiters_wake(self):
        """Test callback ordering and late registration."""
        handle = ResultHandle(0, 0)
        calls = []
        handle.add_done_callback(lambda h: calls.append(h.done()))
        handle._settle(tensor([1.0]), None)
        handle.add_done_callback(lambda h: calls.append(h.done()))
        self.assertEqual(calls, [False, True])

    def test_command_tokens(self):
        """Test the token count a command costs with and without padding elimination."""
        batch = make_batch(0, [[1, 2, 3], [4]], s_pad=4)
        self.assertEqual(Command.for_batch(0, batch, False, True).tokens, 8)
        padded = Command.for_batch(0, batch, True, False)
        self.assertEqual(padded.tokens, 4)
        self.assertIsNone(padded.token_ids)


class TestTraceLog(unittest.TestCase):
    """Test the trace log."""

    def setUp(self):
        """Set up test environment."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up test environment."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_record_and_dump(self):
        """Test per-rank queries and the trace file lines."""
        trace = TraceLog()
        trace.record(0, "start", 0)
        trace.record(1, "start", 0)
        trace.record(0, "start", 1)
        self.assertEqual(trace.keys(0), [0, 1])
        path = os.path.join(self.temp_dir, "trace.txt")
        trace.dump(path)
        with open(path) as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertEqual(lines[2].split()[1:], ["0", "start", "1"])


class TestPipelineOrdering(unittest.TestCase):
    """Test ordered, deadlock-free execution with reordered command delivery."""

    def setUp(self):
        """Set up test environment."""
        self.config = ModelConfig()
        self.params = build_model(self.config)
        rng = np.random.default_rng(4)
        self.batches = [make_batch(i, [list(rng.integers(1, 64, size=n)) for n in (5, 3)], s_pad=6)
                        for i in range(8)]

    def test_keys_processed_in_order(self):
        """Test that every worker starts keys 0, 1, 2, ... despite delayed commands."""
        def delay(worker_id, cmd):
            time.sleep(0.002 * ((cmd.unique_key * 7 + worker_id * 3) % 5))

        rt = initialize(RuntimeConfig(model=self.config, tp_size=2, pp_size=2, control_delay=delay))
        try:
            handles = [rt.submit(b) for b in self.batches]
            # watchdog: a deadlock surfaces as a timeout, not a hang
            outputs = [h.wait(timeout=60) for h in handles]
            for batch, out in zip(self.batches, outputs):
                expected = serial_forward(self.params, batch)
                self.assertLessEqual(valid_max_abs_diff(out, expected, batch.seq_lens), 1e-9)
            for rank in range(4):
                self.assertEqual(rt.trace.keys(rank), list(range(len(self.batches))))
        finally:
            rt.shutdown()

    def test_stage_failure_reaches_handle(self):
        """Test that a failing stage fails its key and later keys still run."""
        rt = initialize(RuntimeConfig(model=self.config, pp_size=2, recv_timeout=0.5))
        try:
            first = rt.workers[0]
            original = first.process

            def failing(command):
                if command.unique_key == 0:
                    raise RuntimeError("injected")
                return original(command)

            with mock.patch.object(first, 'process', side_effect=failing):
                bad = rt.submit(self.batches[0])
                with self.assertRaises(StageFailure) as cm:
                    bad.wait(timeout=10)
                self.assertEqual(cm.exception.stage, 0)
                good = rt.submit(self.batches[1])
                out = good.wait(timeout=10)
            expected = serial_forward(self.params, self.batches[1])
            self.assertLessEqual(valid_max_abs_diff(out, expected, self.batches[1].seq_lens), 1e-9)
        finally:
            rt.shutdown()

    def test_pooled_stage_recovers_after_failure(self):
        """Test that a layer failing while staged leaves the pool usable for later keys."""
        pool = PoolConfig(enabled=True, local_capacity_layers=1)
        rt = initialize(RuntimeConfig(model=self.config, pool=pool, recv_timeout=0.5))
        calls = []

        def failing(*args, **kwargs):
            calls.append(1)
            # second call of key 0 is layer 1, an offloaded layer in a staging slot
            if len(calls) == 2:
                raise RuntimeError("injected")
            return transformer_layer_forward(*args, **kwargs)

        try:
            self.assertIn(1, rt.workers[0].pool.plan.offloaded)
            with mock.patch('deskinfer.runtime.pipeline.transformer_layer_forward', side_effect=failing):
                with self.assertRaises(StageFailure):
                    rt.submit(self.batches[0]).wait(timeout=10)
                outputs = [rt.submit(b).wait(timeout=10) for b in self.batches[1:4]]
            for batch, out in zip(self.batches[1:4], outputs):
                expected = serial_forward(self.params, batch)
                self.assertLessEqual(valid_max_abs_diff(out, expected, batch.seq_lens), 1e-9)
        finally:
            rt.shutdown()


class TestConcurrentSubmission(unittest.TestCase):
    """Test many callers submitting to a four-stage pipeline at once."""

    WATCHDOG = 30.0

    def setUp(self):
        """Set up test environment."""
        self.config = ModelConfig()
        self.params = build_model(self.config)

    def submit_from_threads(self, rt, batches, callers):
        """Submit batches from concurrent caller threads; returns (batch, handle) pairs."""
        results, lock = [], threading.Lock()
        start = threading.Barrier(callers)

        def caller(share):
            start.wait()
            for batch in share:
                handle = rt.submit(batch)
                with lock:
                    results.append((batch, handle))

        threads = [threading.Thread(target=caller, args=(batches[i::callers],)) for i in range(callers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(self.WATCHDOG)
            self.assertFalse(t.is_alive(), "submitter did not finish")
        return results

    def run_seed(self, seed, drce):
        rng = np.random.default_rng(seed)
        batches = [random_batch(rng, self.config, int(rng.integers(1, 9)), int(rng.choice([4, 8, 16])),
                                batch_id=i) for i in range(64)]
        a, b = int(rng.integers(1, 13)), int(rng.integers(1, 13))

        def delay(worker_id, cmd):
            time.sleep(0.0005 * ((cmd.unique_key * a + worker_id * b) % 4))

        rt = initialize(RuntimeConfig(model=self.config, pp_size=4, drce=drce, control_delay=delay))
        try:
            deadline = time.monotonic() + self.WATCHDOG
            pairs = self.submit_from_threads(rt, batches, callers=16)
            self.assertEqual(len(pairs), 64)
            for batch, handle in pairs:
                # watchdog: a deadlock surfaces as a timeout, not a hang
                out = handle.wait(timeout=max(0.1, deadline - time.monotonic()))
                expected = serial_forward(self.params, batch)
                self.assertLessEqual(valid_max_abs_diff(out, expected, batch.seq_lens), 1e-9)
            for worker in rt.workers:
                keys = rt.trace.keys(worker.ctx.rank)
                self.assertEqual(keys, list(range(64)))
        finally:
            rt.shutdown()

    def test_ordered_and_deadlock_free_over_seeds(self):
        """Test 64 random batches from 16 callers with delayed commands over 20 seeds."""
        for seed in range(20):
            with self.subTest(seed=seed):
                self.run_seed(seed, drce=bool(seed % 2))

    def test_concurrent_submitters_get_distinct_keys(self):
        """Test that 64 concurrent submissions receive keys 0..63 with no gaps."""
        batch = make_batch(0, [[1, 2, 3]], s_pad=4)
        rt = initialize(RuntimeConfig(model=self.config, pp_size=2))
        try:
            handles, lock = [], threading.Lock()
            start = threading.Barrier(64)

            def caller():
                start.wait()
                handle = engine_submit(rt.dispatcher, batch)
                with lock:
                    handles.append(handle)

            threads = [threading.Thread(target=caller) for _ in range(64)]
            for t in threads:
                t.start()
            for t in threads:
                t.join(self.WATCHDOG)
            self.assertEqual(sorted(h.key for h in handles), list(range(64)))
            for handle in handles:
                handle.wait(timeout=self.WATCHDOG)
        finally:
            rt.shutdown()


def run_tests():
    """Run all tests."""
    unittest.main()


if __name__ == "__main__":
    run_tests()
