#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Engine module for deskinfer.
This module provides the single controller of the runtime. Initialization
delegates layer ranges and tensor-parallel shards to workers and waits for
every worker to report ready; execution hands batches to the pipeline and
returns handles, so callers use the runtime like a serial model.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

from ..core.model import Batch, ModelConfig, ModelParams, load_checkpoint
from ..core.tensor_math import Tensor
from ..errors import ConfigurationError, WorkerInitError
from .comm import TRANSPORTS, CommWorld, control_close, init_contexts
from .mempool import PoolConfig
from .pipeline import (
    PipelineDispatcher, ResultHandle, StagePlan, StageParams, StageWorker, TraceLog, WorkerOptions,
    partition_layers, stage_params,
)


@dataclass(frozen=True)
class RuntimeConfig:
    """Launch configuration of one runtime."""

    model: ModelConfig = field(default_factory=ModelConfig)
    tp_size: int = 1
    pp_size: int = 1
    drce: bool = False
    pool: PoolConfig = field(default_factory=PoolConfig)
    dispatch_lanes: Optional[int] = None
    queue_capacity: int = 64
    checkpoint_path: Optional[str] = None
    transport: str = "inprocess"
    recv_timeout: float = 30.0
    collective_timeout: float = 30.0
    init_timeout: float = 60.0
    control_delay: Optional[Callable[[int, Any], None]] = None

    @property
    def world_size(self) -> int:
        return self.tp_size * self.pp_size

    @property
    def lanes(self) -> int:
        return self.dispatch_lanes or 2 * self.pp_size

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: if the parallel layout does not fit the model
        """
        if self.tp_size < 1 or self.pp_size < 1:
            raise ConfigurationError("tp_size and pp_size must be >= 1")
        if self.model.num_heads % self.tp_size:
            raise ConfigurationError(f"tp_size {self.tp_size} does not divide {self.model.num_heads} heads")
        if self.pp_size > self.model.num_layers:
            raise ConfigurationError(f"pp_size {self.pp_size} exceeds {self.model.num_layers} layers")
        if self.queue_capacity < 1:
            raise ConfigurationError("queue_capacity must be >= 1")
        if self.transport not in TRANSPORTS:
            raise ConfigurationError(f"unknown transport {self.transport!r}")
        if self.pool.plan is not None and self.pool.plan.num_layers != self.model.num_layers:
            raise ConfigurationError(f"placement plan covers {self.pool.plan.num_layers} layers, "
                                     f"model has {self.model.num_layers}")

    def describe(self) -> str:
        return (f"tp={self.tp_size} pp={self.pp_size} drce={'on' if self.drce else 'off'} "
                f"pool={'on' if self.pool.enabled else 'off'}")


class Runtime:
    """
    A live runtime: workers, communication world and the pipeline dispatcher.
    """

    def __init__(self, config: RuntimeConfig, world: CommWorld, plan: StagePlan, workers: List[StageWorker],
                 dispatcher: PipelineDispatcher, trace: TraceLog):
        self.logger = logging.getLogger("engine")
        self.config = config
        self.world = world
        self.plan = plan
        self.workers = workers
        self.dispatcher = dispatcher
        self.trace = trace
        self._closed = False

    def submit(self, batch: Batch) -> ResultHandle:
        """
        Submit a batch for inference and return without waiting.

        Raises:
            ValidationError: if the batch does not fit the model
            RuntimeShutdownError: after shutdown
        """
        batch.validate(self.config.model)
        handle = self.dispatcher.submit(batch)
        self.logger.debug(f"Submitted batch {batch.batch_id} as key {handle.key}")
        return handle

    def run(self, batch: Batch, timeout: Optional[float] = None) -> Tensor:
        """Submit and wait; the serial-looking call."""
        return self.submit(batch).wait(timeout)

    def run_many(self, batches: Sequence[Batch], timeout: Optional[float] = None) -> List[Tensor]:
        handles = [self.submit(b) for b in batches]
        return [h.wait(timeout) for h in handles]

    @property
    def registry_size(self) -> int:
        return self.dispatcher.in_flight

    def resident_bytes(self) -> Dict[int, int]:
        """Parameter bytes held by each worker, keyed by rank."""
        return {w.ctx.rank: w.resident_bytes() for w in self.workers}

    def counters(self, kind: str, ranks: Optional[Sequence[int]] = None) -> int:
        return self.world.total(kind, ranks)

    def linear_macs(self, ranks: Optional[Sequence[int]] = None) -> int:
        ranks = set(range(self.world.world_size) if ranks is None else ranks)
        return sum(w.macs.value for w in self.workers if w.ctx.rank in ranks)

    def reset_counters(self) -> None:
        self.world.reset_counters()
        for worker in self.workers:
            worker.macs.reset()

    def shutdown(self, timeout: Optional[float] = None) -> None:
        """
        Stop intake, let in-flight batches finish, then release workers and channels.
        Calling it again does nothing.
        """
        if self._closed:
            return
        self._closed = True
        self.logger.info(f"Shutting down runtime with {self.dispatcher.in_flight} batches in flight")
        self.dispatcher.stop_intake()
        self.dispatcher.drain(timeout)
        self.dispatcher.close()
        for endpoint in self.world.endpoints:
            control_close(endpoint)
        for worker in self.workers:
            worker.join(timeout=10)
        self.world.shutdown()
        self.logger.info("Runtime shut down")

    def __enter__(self) -> 'Runtime':
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.shutdown()


def _shipped_params(params: ModelParams, plan: StagePlan, stage: int, tp_size: int,
                    tp_rank: int) -> StageParams:
    return stage_params(params.config, plan, stage, tp_size, tp_rank,
                        layer_source=lambda i: params.layers[i],
                        embeddings=(params.embedding, params.position),
                        final_norm=(params.final_gamma, params.final_beta))


def initialize(config: RuntimeConfig) -> Runtime:
    """
    Create contexts, delegate layers to workers and wait until all are ready.

    With a checkpoint, the engine loads it and ships each worker only its
    slice; otherwise each worker builds its own layers from seeds.

    Args:
        config: RuntimeConfig

    Returns:
        A running Runtime

    Raises:
        ConfigurationError: on invalid config or a missing checkpoint, before any worker starts
        WorkerInitError: naming the first worker that failed to initialize
    """
    logger = logging.getLogger("engine")
    config.validate()
    checkpoint = None
    if config.checkpoint_path is not None:
        if not os.path.exists(config.checkpoint_path):
            raise ConfigurationError(f"checkpoint {config.checkpoint_path} does not exist")
        checkpoint = load_checkpoint(config.checkpoint_path)
        if checkpoint.config.to_dict() != config.model.to_dict():
            raise ConfigurationError("checkpoint model config differs from the launch config")

    plan = partition_layers(config.model.num_layers, config.pp_size)
    world = init_contexts(config.world_size, config.tp_size, config.pp_size, config.transport,
                          config.collective_timeout, config.control_delay)
    endpoints_by_stage = [[world.endpoints[world.contexts[0].rank_of(s, t)] for t in range(config.tp_size)]
                          for s in range(config.pp_size)]
    dispatcher = PipelineDispatcher(endpoints_by_stage, config.lanes, config.queue_capacity, config.drce)
    trace = TraceLog()
    options = WorkerOptions(config.recv_timeout, config.queue_capacity,
                            config.pool if config.pool.enabled else None)
    workers = [StageWorker(ctx, world.endpoints[ctx.rank], config.model, plan, dispatcher, trace, options)
               for ctx in world.contexts]

    with ThreadPoolExecutor(max_workers=config.world_size, thread_name_prefix="init") as pool:
        futures = []
        for worker in workers:
            shipped = None
            if checkpoint is not None:
                shipped = _shipped_params(checkpoint, plan, worker.stage, config.tp_size, worker.ctx.tp_rank)
            futures.append(pool.submit(worker.initialize, shipped))
        for worker, future in zip(workers, futures):
            try:
                future.result(timeout=config.init_timeout)
            except Exception as e:
                logger.error(f"Worker {worker.ctx.rank} failed to initialize: {e}")
                dispatcher.close()
                world.shutdown()
                raise WorkerInitError(worker.ctx.rank, f"worker {worker.ctx.rank} failed to initialize: {e}") from e

    for worker in workers:
        worker.start()
    logger.info(f"Runtime ready: {config.describe()}, world {config.world_size}, stages {plan.ranges}")
    return Runtime(config, world, plan, workers, dispatcher, trace)


def submit(runtime: Runtime, batch: Batch) -> ResultHandle:
    return runtime.submit(batch)


def shutdown(runtime: Runtime) -> None:
    runtime.shutdown()
