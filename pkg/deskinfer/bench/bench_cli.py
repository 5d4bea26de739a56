#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Benchmark module for deskinfer.
This module sweeps batch and padding sizes over tensor-parallel, pipeline,
padding-elimination and memory-pool configurations. Every grid point is
checked against the serial model before it is timed, on the real clock or
on the virtual cost-model clock.
"""

import csv
import itertools
import json
import logging
import os
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.model import (
    Batch, ModelConfig, build_model, layer_param_count, random_batch, serial_forward, valid_max_abs_diff,
)
from ..errors import ConfigurationError, CorrectnessError
from ..runtime.comm import ALL_REDUCE, P2P_SEND
from ..runtime.cost_model import ComputeCostModel, simulate_pipeline
from ..runtime.drce import drce_savings
from ..runtime.engine import Runtime, RuntimeConfig, initialize
from ..runtime.mempool import PoolConfig, Timeline

SCHEMA_VERSION = "1"
FORMATS = ("csv", "json", "table")
CLOCKS = ("virtual", "real")
TOLERANCE = 1e-9

logger = logging.getLogger("bench")


@dataclass(frozen=True)
class SweepConfig:
    """Grid and run settings of one sweep."""

    model: ModelConfig = field(default_factory=ModelConfig)
    tp: Tuple[int, ...] = (1,)
    pp: Tuple[int, ...] = (1,)
    drce: Tuple[bool, ...] = (False,)
    pool: Tuple[bool, ...] = (False,)
    batch_sizes: Tuple[int, ...] = (1, 4)
    pad_sizes: Tuple[int, ...] = (16,)
    num_batches: int = 8
    warmup_runs: int = 3
    measured_runs: int = 10
    clock: str = "virtual"
    valid_fraction: Optional[float] = 0.5
    alpha: float = 1e-12
    link_gbps: float = 600.0
    out: Optional[str] = None
    format: str = "csv"
    seed: int = 0
    pool_config: PoolConfig = field(default_factory=PoolConfig)
    transport: str = "inprocess"
    recv_timeout: float = 30.0

    def __post_init__(self):
        for name in ("tp", "pp", "drce", "pool", "batch_sizes", "pad_sizes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.clock not in CLOCKS:
            raise ConfigurationError(f"unknown clock {self.clock!r}, expected one of {CLOCKS}")
        if self.format not in FORMATS:
            raise ConfigurationError(f"unknown format {self.format!r}, expected one of {FORMATS}")
        if self.num_batches < 1 or self.measured_runs < 1 or self.warmup_runs < 0:
            raise ConfigurationError("num_batches and measured_runs must be >= 1, warmup_runs >= 0")
        if any(s > self.model.max_seq or s < 1 for s in self.pad_sizes):
            raise ConfigurationError(f"pad sizes {self.pad_sizes} must lie in [1, {self.model.max_seq}]")
        if any(b < 1 for b in self.batch_sizes):
            raise ConfigurationError(f"batch sizes must be >= 1: {self.batch_sizes}")
        if self.valid_fraction is not None and not 0.0 < self.valid_fraction <= 1.0:
            raise ConfigurationError(f"valid_fraction must be in (0, 1], got {self.valid_fraction}")

    def grid(self) -> List[Tuple[int, int, bool, bool, int, int]]:
        return list(itertools.product(self.tp, self.pp, self.drce, self.pool, self.batch_sizes, self.pad_sizes))


COLUMNS = ("tp", "pp", "drce", "pool", "batch_size", "s_pad", "clock", "p50_latency", "p95_latency",
           "batches_per_s", "tokens_per_s", "all_reduce", "p2p", "linear_macs", "stall_time", "drce_ratio",
           "max_abs_diff")


@dataclass(frozen=True)
class BenchRow:
    tp: int
    pp: int
    drce: bool
    pool: bool
    batch_size: int
    s_pad: int
    clock: str
    p50_latency: float
    p95_latency: float
    batches_per_s: float
    tokens_per_s: float
    all_reduce: int
    p2p: int
    linear_macs: int
    stall_time: float
    drce_ratio: float
    max_abs_diff: float

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        return {name: data[name] for name in COLUMNS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BenchRow':
        return cls(**{f.name: data[f.name] for f in fields(cls)})


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)
    seed: int = 0
    clock: str = "virtual"
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {'schema_version': self.schema_version, 'seed': self.seed, 'clock': self.clock,
                'columns': list(COLUMNS), 'rows': [row.to_dict() for row in self.rows]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BenchReport':
        version = str(data.get('schema_version'))
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported report schema {version}")
        return cls([BenchRow.from_dict(r) for r in data.get('rows', [])], int(data.get('seed', 0)),
                   data.get('clock', 'virtual'), version)


def grid_point_name(tp: int, pp: int, drce: bool, pool: bool, batch_size: int, s_pad: int) -> str:
    return (f"tp={tp} pp={pp} drce={'on' if drce else 'off'} pool={'on' if pool else 'off'} "
            f"B={batch_size} S_pad={s_pad}")


def make_batches(config: SweepConfig, batch_size: int, s_pad: int) -> List[Batch]:
    """Seeded batches for one (B, S_pad) cell; identical across parallel layouts."""
    rng = np.random.default_rng([config.seed, batch_size, s_pad])
    lens = None
    if config.valid_fraction is not None:
        lens = [max(1, int(round(s_pad * config.valid_fraction)))] * batch_size
    return [random_batch(rng, config.model, batch_size, s_pad, lens, batch_id=i)
            for i in range(config.num_batches)]


class SweepRunner:
    """Runs every grid point of a SweepConfig."""

    def __init__(self, config: SweepConfig):
        self.config = config
        self.logger = logging.getLogger("bench")
        self.params = build_model(config.model)
        self.cost_model = ComputeCostModel(config.alpha, config.link_gbps)
        self._oracles: Dict[Tuple[int, int], List] = {}

    def _supported(self, tp: int, pp: int) -> bool:
        model = self.config.model
        if model.num_heads % tp or pp > model.num_layers:
            self.logger.warning(f"Skipping tp={tp} pp={pp}: does not fit {model.num_heads} heads, "
                                f"{model.num_layers} layers")
            return False
        return True

    def _oracle(self, batch_size: int, s_pad: int) -> Tuple[List[Batch], List]:
        key = (batch_size, s_pad)
        if key not in self._oracles:
            batches = make_batches(self.config, batch_size, s_pad)
            self._oracles[key] = (batches, [serial_forward(self.params, b) for b in batches])
        return self._oracles[key]

    def run(self) -> BenchReport:
        report = BenchReport(seed=self.config.seed, clock=self.config.clock)
        for point in self.config.grid():
            tp, pp = point[0], point[1]
            if not self._supported(tp, pp):
                continue
            report.rows.append(self.run_point(*point))
        return report

    def runtime_config(self, tp: int, pp: int, drce: bool, pool: bool) -> RuntimeConfig:
        return RuntimeConfig(model=self.config.model, tp_size=tp, pp_size=pp, drce=drce,
                             pool=replace(self.config.pool_config, enabled=pool),
                             transport=self.config.transport, recv_timeout=self.config.recv_timeout)

    def run_point(self, tp: int, pp: int, drce: bool, pool: bool, batch_size: int, s_pad: int) -> BenchRow:
        """
        Check, then time, one grid point.

        Raises:
            CorrectnessError: if any batch differs from the serial model beyond tolerance
        """
        name = grid_point_name(tp, pp, drce, pool, batch_size, s_pad)
        batches, oracles = self._oracle(batch_size, s_pad)
        self.logger.info(f"Running {name}")
        rt = initialize(self.runtime_config(tp, pp, drce, pool))
        try:
            counters, diff = self._check(rt, batches, oracles, name)
            if self.config.clock == "virtual":
                latencies, makespan, stall = self._time_virtual(rt, batches, drce, pool)
            else:
                latencies, makespan, stall = self._time_real(rt, batches, pool)
            self._write_timelines(rt, name, pool)
        finally:
            rt.shutdown()
        valid_tokens = sum(b.valid_tokens for b in batches)
        first = batches[0]
        return BenchRow(
            tp=tp, pp=pp, drce=drce, pool=pool, batch_size=batch_size, s_pad=s_pad, clock=self.config.clock,
            p50_latency=float(np.percentile(latencies, 50)), p95_latency=float(np.percentile(latencies, 95)),
            batches_per_s=len(batches) / makespan if makespan > 0 else 0.0,
            tokens_per_s=valid_tokens / makespan if makespan > 0 else 0.0,
            all_reduce=counters[ALL_REDUCE], p2p=counters[P2P_SEND], linear_macs=counters['linear_macs'],
            stall_time=stall, drce_ratio=drce_savings(first.batch_size, first.s_pad, first.seq_lens),
            max_abs_diff=diff)

    def _check(self, rt: Runtime, batches: Sequence[Batch], oracles: Sequence,
               name: str) -> Tuple[Dict[str, int], float]:
        chain = [w.ctx.rank for w in rt.workers if w.ctx.tp_rank == 0]
        rt.reset_counters()
        worst = 0.0
        counters: Dict[str, int] = {}
        for i, (batch, oracle) in enumerate(zip(batches, oracles)):
            out = rt.run(batch, timeout=self.config.recv_timeout * max(1, rt.config.pp_size))
            diff = valid_max_abs_diff(out, oracle, batch.seq_lens)
            worst = max(worst, diff)
            if diff > TOLERANCE:
                raise CorrectnessError(name, diff)
            if i == 0:
                counters = {ALL_REDUCE: rt.counters(ALL_REDUCE, chain), P2P_SEND: rt.counters(P2P_SEND, chain),
                            'linear_macs': rt.linear_macs()}
        return counters, worst

    def _time_virtual(self, rt: Runtime, batches: Sequence[Batch], drce: bool,
                      pool: bool) -> Tuple[np.ndarray, float, float]:
        model = self.config.model
        layer_params = layer_param_count(model)
        stage_workers = sorted((w for w in rt.workers if w.ctx.tp_rank == 0), key=lambda w: w.stage)
        costs = np.zeros((len(batches), len(stage_workers)))
        transfers, stall = [], 0.0
        for m, batch in enumerate(batches):
            tokens = batch.valid_tokens if drce else batch.batch_size * batch.s_pad
            per_layer = self.cost_model.tp_layer_cost(tokens, model.hidden, layer_params, rt.config.tp_size)
            transfers.append(self.cost_model.stage_transfer_cost(tokens, model.hidden))
            for s, worker in enumerate(stage_workers):
                if pool and worker.pool is not None:
                    timeline = self._virtual_timeline(worker, per_layer)
                    costs[m, s] = timeline.makespan()
                    if m == 0:
                        stall += timeline.total_stall()
                else:
                    costs[m, s] = per_layer * len(rt.plan.layers_of(worker.stage))
        schedule = simulate_pipeline(costs, len(batches), transfer_cost=max(transfers))
        return schedule.latencies, schedule.makespan, stall

    @staticmethod
    def _virtual_timeline(worker, per_layer: float) -> Timeline:
        def cost_fn(_):
            return per_layer

        runner = worker.pool.runner(worker.bandwidth, "virtual", cost_fn)
        _, timeline = runner.run(None, lambda i, params, x: x)
        worker.last_timeline = timeline
        return timeline

    def _time_real(self, rt: Runtime, batches: Sequence[Batch], pool: bool) -> Tuple[np.ndarray, float, float]:
        latencies: List[float] = []
        makespans: List[float] = []
        for run in range(self.config.warmup_runs + self.config.measured_runs):
            done: Dict[int, float] = {}
            lock = threading.Lock()

            def finished(handle, _done=done, _lock=lock):
                with _lock:
                    _done[handle.key] = time.perf_counter()

            start = time.perf_counter()
            handles = []
            for batch in batches:
                handle = rt.submit(batch)
                handle.add_done_callback(finished)
                handles.append((handle, time.perf_counter()))
            for handle, _ in handles:
                handle.wait(self.config.recv_timeout * max(1, rt.config.pp_size))
            if run >= self.config.warmup_runs:
                makespans.append(max(done.values()) - start)
                latencies.extend(done[h.key] - submitted for h, submitted in handles)
        stall = 0.0
        if pool:
            stall = sum(w.last_timeline.total_stall() for w in rt.workers
                        if w.ctx.tp_rank == 0 and w.last_timeline is not None)
        return np.asarray(latencies), float(np.median(makespans)), stall

    def _write_timelines(self, rt: Runtime, name: str, pool: bool) -> None:
        if not pool or not self.config.out:
            return
        stem = os.path.splitext(self.config.out)[0]
        slug = name.replace(" ", "_").replace("=", "")
        for worker in rt.workers:
            if worker.ctx.tp_rank == 0 and worker.last_timeline is not None:
                path = f"{stem}.{slug}.stage{worker.stage}.timeline.csv"
                worker.last_timeline.to_csv(path)
                self.logger.info(f"Wrote timeline {path}")


def run_sweep(config: SweepConfig) -> BenchReport:
    """
    Run every grid point of a sweep.

    Args:
        config: SweepConfig

    Returns:
        BenchReport with one row per supported grid point

    Raises:
        CorrectnessError: naming the first grid point that disagrees with the serial model
    """
    start = time.time()
    report = SweepRunner(config).run()
    logger.info(f"Sweep of {len(report.rows)} grid points finished in {time.time() - start:.2f}s")
    return report


def _format_table(report: BenchReport) -> str:
    rows = [[_cell(row.to_dict()[c]) for c in COLUMNS] for row in report.rows]
    widths = [max([len(c)] + [len(r[i]) for r in rows]) for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit(report: BenchReport, fmt: str = "csv", path: Optional[str] = None) -> bool:
    """
    Write a report as CSV, JSON or a fixed-width table.

    Args:
        report: BenchReport
        fmt: "csv", "json" or "table"
        path: Output file, or None for stdout

    Returns:
        True if the report was written, False otherwise
    """
    if fmt not in FORMATS:
        logger.error(f"Unsupported report format: {fmt}")
        return False
    try:
        f = open(path, 'w', newline='', encoding='utf-8') if path else sys.stdout
        try:
            if fmt == "csv":
                writer = csv.DictWriter(f, fieldnames=COLUMNS)
                writer.writeheader()
                writer.writerows(row.to_dict() for row in report.rows)
            elif fmt == "json":
                json.dump(report.to_dict(), f, indent=2)
                f.write("\n")
            else:
                f.write(_format_table(report))
        finally:
            if path:
                f.close()
        if path:
            logger.info(f"Report with {len(report.rows)} rows written to {path}")
        return True
    except OSError as e:
        logger.error(f"Failed to write report: {str(e)}")
        return False


def read_report(path: str) -> BenchReport:
    """Read a JSON report written by emit."""
    with open(path, 'r', encoding='utf-8') as f:
        return BenchReport.from_dict(json.load(f))
