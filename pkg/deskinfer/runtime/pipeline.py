#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Pipeline module for deskinfer.
This module provides non-blocking pipeline execution: the engine hands every
batch a unique key from a loop counter and dispatches commands on several
lanes at once; each worker restores key order with a consistency queue, runs
its stage and forwards activations asynchronously to the next stage.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.model import (
    Batch, LayerParams, ModelConfig, build_embeddings, build_final_norm, build_layer, embed,
    transformer_layer_forward,
)
from ..core.tensor_math import AttentionMask, MacCounter, Tensor, layer_norm
from ..errors import (
    ConfigurationError, DeskInferError, DimensionError, ProtocolError, RuntimeShutdownError, StageFailure,
)
from .comm import (
    ControlEndpoint, GlobalContext, cancel_recv, control_send, control_serve, recv_async, send_async,
)
from .drce import PackedActivations, drce_layer_forward, pack, unpack
from .mempool import BandwidthModel, MemoryPool, PlacementPlan, PoolConfig, Timeline, plan_placement
from .tensor_parallel import shard_params, tp_layer_forward


class LoopCounter:
    """Monotone key source; every acquisition returns the next integer."""

    def __init__(self, start: int = 0):
        self._next = start
        self._lock = threading.Lock()

    def acquire(self) -> int:
        with self._lock:
            value = self._next
            self._next += 1
            return value

    @property
    def value(self) -> int:
        return self._next


class ConsistencyQueue:
    """
    Per-worker queue that releases items strictly in key order 0, 1, 2, ...

    Inserts may arrive in any order. pop_next always returns the key equal to
    the local counter, blocking until it arrives. Inserting a key at or beyond
    next_key + capacity blocks until the consumer catches up; the key the
    consumer waits for is always admitted.
    """

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ConfigurationError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: Dict[int, Any] = {}
        self._counter = LoopCounter()
        self._cond = threading.Condition()
        self._closed = False

    @property
    def next_key(self) -> int:
        return self._counter.value

    def insert(self, key: int, item: Any, timeout: Optional[float] = None) -> None:
        """
        Add an item under its unique key.

        Raises:
            ProtocolError: on a duplicate or already consumed key, or if the
                queue stays full past timeout
        """
        with self._cond:
            if key < self._counter.value or key in self._entries:
                raise ProtocolError(f"key {key} inserted twice")
            admitted = self._cond.wait_for(
                lambda: key < self._counter.value + self.capacity or self._closed, timeout)
            if not admitted:
                raise ProtocolError(f"queue full: key {key} waited {timeout}s")
            if self._closed:
                raise ProtocolError("queue is closed")
            self._entries[key] = item
            self._cond.notify_all()

    def pop_next(self, timeout: Optional[float] = None) -> Optional[Tuple[int, Any]]:
        """
        Take the entry for the next key.

        Returns:
            (key, item), or None once the queue is closed and the next key
            never arrived

        Raises:
            ProtocolError: on timeout
        """
        with self._cond:
            ready = self._cond.wait_for(
                lambda: self._counter.value in self._entries or self._closed, timeout)
            if not ready:
                raise ProtocolError(f"key {self._counter.value} did not arrive within {timeout}s")
            key = self._counter.value
            if key not in self._entries:
                return None
            item = self._entries.pop(key)
            self._counter.acquire()
            self._cond.notify_all()
            return key, item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self) -> int:
        with self._cond:
            return len(self._entries)


@dataclass(frozen=True)
class Command:
    """Per-batch instruction from the engine; only stage 0 carries the token ids."""

    unique_key: int
    batch_id: int
    batch_size: int
    s_pad: int
    seq_lens: Tuple[int, ...]
    token_ids: Optional[np.ndarray] = None
    drce: bool = False

    @classmethod
    def for_batch(cls, key: int, batch: Batch, drce: bool, with_payload: bool) -> 'Command':
        return cls(key, batch.batch_id, batch.batch_size, batch.s_pad, batch.seq_lens,
                   batch.token_ids if with_payload else None, drce)

    @property
    def tokens(self) -> int:
        return sum(self.seq_lens) if self.drce else self.batch_size * self.s_pad


@dataclass(frozen=True)
class StagePlan:
    """Contiguous layer ranges per stage; stage 0 embeds, the last stage normalizes."""

    num_layers: int
    ranges: Tuple[Tuple[int, int], ...]

    @property
    def pp_size(self) -> int:
        return len(self.ranges)

    def layers_of(self, stage: int) -> range:
        start, end = self.ranges[stage]
        return range(start, end)

    def is_first(self, stage: int) -> bool:
        return stage == 0

    def is_last(self, stage: int) -> bool:
        return stage == self.pp_size - 1


def partition_layers(num_layers: int, pp_size: int) -> StagePlan:
    """
    Split [0, L) into pp_size contiguous ranges whose sizes differ by at most
    one; earlier stages take the extra layers.

    Raises:
        ConfigurationError: if pp_size < 1 or pp_size > L
    """
    if pp_size < 1:
        raise ConfigurationError(f"pp_size must be >= 1, got {pp_size}")
    if pp_size > num_layers:
        raise ConfigurationError(f"cannot split {num_layers} layers into {pp_size} non-empty stages")
    size, extra = divmod(num_layers, pp_size)
    ranges, start = [], 0
    for stage in range(pp_size):
        end = start + size + (1 if stage < extra else 0)
        ranges.append((start, end))
        start = end
    return StagePlan(num_layers, tuple(ranges))


class ResultHandle:
    """Future for one submitted batch; the first outcome wins."""

    def __init__(self, key: int, batch_id: int):
        self.key = key
        self.batch_id = batch_id
        self._event = threading.Event()
        self._lock = threading.Lock()
        self._settled = False
        self._value: Optional[Tensor] = None
        self._error: Optional[BaseException] = None
        self._callbacks: List[Callable[['ResultHandle'], None]] = []

    def done(self) -> bool:
        return self._event.is_set()

    def _settle(self, value: Optional[Tensor], error: Optional[BaseException]) -> bool:
        with self._lock:
            if self._settled:
                return False
            self._settled = True
            self._value, self._error = value, error
            callbacks, self._callbacks = self._callbacks, []
        # callbacks run before waiters wake
        for callback in callbacks:
            callback(self)
        self._event.set()
        return True

    def add_done_callback(self, callback: Callable[['ResultHandle'], None]) -> None:
        with self._lock:
            if not self._settled:
                self._callbacks.append(callback)
                return
        callback(self)

    def wait(self, timeout: Optional[float] = None) -> Tensor:
        """
        Block until the last stage delivers this batch's hidden states.

        Raises:
            ProtocolError: on timeout
            StageFailure: if a stage failed this key
        """
        if not self._event.wait(timeout):
            raise ProtocolError(f"result for key {self.key} not ready after {timeout}s")
        if self._error is not None:
            raise self._error
        return self._value

    def __repr__(self) -> str:
        state = "pending" if not self.done() else ("failed" if self._error else "done")
        return f"ResultHandle(key={self.key}, batch={self.batch_id}, {state})"


def result_wait(handle: ResultHandle, timeout: Optional[float] = None) -> Tensor:
    return handle.wait(timeout)


@dataclass(frozen=True)
class TraceEvent:
    timestamp: float
    rank: int
    event: str
    key: int


class TraceLog:
    """In-memory record of per-rank pipeline events, mirrored to the "trace" logger."""

    def __init__(self):
        self.logger = logging.getLogger("trace")
        self._events: List[TraceEvent] = []
        self._lock = threading.Lock()

    def record(self, rank: int, event: str, key: int) -> None:
        entry = TraceEvent(time.time(), rank, event, key)
        with self._lock:
            self._events.append(entry)
        self.logger.debug(f"{entry.timestamp:.6f} {rank} {event} {key}")

    @property
    def events(self) -> List[TraceEvent]:
        with self._lock:
            return list(self._events)

    def keys(self, rank: int, event: str = "start") -> List[int]:
        return [e.key for e in self.events if e.rank == rank and e.event == event]

    def clear(self) -> None:
        with self._lock:
            self._events.clear()

    def dump(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for e in self.events:
                f.write(f"{e.timestamp:.6f} {e.rank} {e.event} {e.key}\n")


@dataclass
class StageParams:
    """Parameters one worker holds: its layers and, at the ends, embeddings or the final norm."""

    layers: Tuple[Any, ...]
    embedding: Optional[Tensor] = None
    position: Optional[Tensor] = None
    final_gamma: Optional[Tensor] = None
    final_beta: Optional[Tensor] = None

    @property
    def nbytes(self) -> int:
        extra = [t for t in (self.embedding, self.position, self.final_gamma, self.final_beta) if t is not None]
        return sum(layer.nbytes for layer in self.layers) + sum(t.nbytes for t in extra)


def stage_params(config: ModelConfig, plan: StagePlan, stage: int, tp_size: int, tp_rank: int,
                 layer_source: Optional[Callable[[int], LayerParams]] = None,
                 embeddings: Optional[Tuple[Tensor, Tensor]] = None,
                 final_norm: Optional[Tuple[Tensor, Tensor]] = None) -> StageParams:
    """
    Parameters of one (stage, tp_rank) worker, built from seeds unless sources are given.
    """
    layer_source = layer_source or (lambda i: build_layer(config, i))
    layers = []
    for index in plan.layers_of(stage):
        layer = layer_source(index)
        layers.append(layer if tp_size == 1 else shard_params(layer, tp_size, config.num_heads)[tp_rank])
    params = StageParams(tuple(layers))
    if plan.is_first(stage):
        params.embedding, params.position = embeddings or build_embeddings(config)
    if plan.is_last(stage):
        params.final_gamma, params.final_beta = final_norm or build_final_norm(config)
    return params


@dataclass
class WorkerOptions:
    recv_timeout: float = 30.0
    queue_capacity: int = 64
    pool: Optional[PoolConfig] = None


class ResultSink:
    """Where last-stage workers deliver results and any worker reports failures."""

    def deliver(self, key: int, output: Tensor) -> None:
        raise NotImplementedError

    def fail(self, key: int, error: StageFailure) -> None:
        raise NotImplementedError


class StageWorker:
    """
    One (stage, tp_rank) worker.

    A dispatcher thread moves commands from the control endpoint into the
    consistency queue; a compute thread pops keys in order and runs them.
    """

    def __init__(self, ctx: GlobalContext, endpoint: ControlEndpoint, config: ModelConfig, plan: StagePlan,
                 sink: ResultSink, trace: Optional[TraceLog] = None, options: Optional[WorkerOptions] = None):
        self.ctx = ctx
        self.endpoint = endpoint
        self.config = config
        self.plan = plan
        self.stage = ctx.pp_stage
        self.sink = sink
        self.trace = trace or TraceLog()
        self.options = options or WorkerOptions()
        self.logger = logging.getLogger(f"worker.{ctx.rank}")
        self.queue = ConsistencyQueue(self.options.queue_capacity)
        self.params: Optional[StageParams] = None
        self.macs = MacCounter()
        self.pool: Optional[MemoryPool] = None
        self.bandwidth: Optional[BandwidthModel] = None
        self.last_timeline: Optional[Timeline] = None
        self._threads: List[threading.Thread] = []

    @property
    def is_first(self) -> bool:
        return self.plan.is_first(self.stage)

    @property
    def is_last(self) -> bool:
        return self.plan.is_last(self.stage)

    def initialize(self, shipped: Optional[StageParams] = None) -> int:
        """
        Build or accept this worker's parameters.

        Args:
            shipped: Parameters sliced by the engine, or None to build from seeds

        Returns:
            Resident parameter bytes
        """
        self.params = shipped or stage_params(self.config, self.plan, self.stage, self.ctx.tp_size,
                                              self.ctx.tp_rank)
        owned = len(self.plan.layers_of(self.stage))
        if len(self.params.layers) != owned:
            raise ConfigurationError(f"worker {self.ctx.rank} got {len(self.params.layers)} layers, owns {owned}")
        pool = self.options.pool
        if pool is not None and pool.enabled and owned:
            self._setup_pool(pool, owned)
        self.logger.info(f"Stage {self.stage} tp {self.ctx.tp_rank} ready with layers "
                         f"{self.plan.ranges[self.stage]} ({self.params.nbytes} B)")
        return self.params.nbytes

    def _setup_pool(self, pool: PoolConfig, owned: int) -> None:
        start, end = self.plan.ranges[self.stage]
        if pool.plan is not None:
            placement = PlacementPlan(pool.plan.homes[start:end], pool.plan.prefetch_depth)
        else:
            placement = plan_placement(owned, min(pool.local_capacity_layers, owned), pool.prefetch_depth,
                                       pool.peer_capacities)
        layer_bytes = self.params.layers[0].nbytes
        self.pool = MemoryPool(placement, self.params.layers, layer_bytes, peer_capacities=None)
        self.bandwidth = pool.bandwidth(layer_bytes // 8)

    def resident_bytes(self) -> int:
        if self.params is None:
            return 0
        if self.pool is None:
            return self.params.nbytes
        offloaded = sum(self.params.layers[i].nbytes for i in self.pool.plan.offloaded)
        return self.params.nbytes - offloaded

    def start(self) -> None:
        if self.params is None:
            raise ProtocolError(f"worker {self.ctx.rank} started before initialization")
        self._threads = [
            threading.Thread(target=self._dispatch_loop, name=f"dispatch-{self.ctx.rank}", daemon=True),
            threading.Thread(target=self.stage_worker_loop, name=f"compute-{self.ctx.rank}", daemon=True),
        ]
        for thread in self._threads:
            thread.start()

    def join(self, timeout: Optional[float] = None) -> None:
        for thread in self._threads:
            thread.join(timeout)

    def _dispatch_loop(self) -> None:
        try:
            for command in control_serve(self.endpoint):
                self.queue.insert(command.unique_key, command)
        except DeskInferError as e:
            self.logger.error(f"Dispatcher stopped: {e}")
        finally:
            self.queue.close()

    def stage_worker_loop(self) -> None:
        """Pop keys in order and run them until the queue is closed."""
        while True:
            entry = self.queue.pop_next()
            if entry is None:
                break
            key, command = entry
            try:
                self.process(command)
            except Exception as e:
                self.logger.error(f"Key {key} failed in stage {self.stage}: {e}")
                self.sink.fail(key, StageFailure(key, self.stage, str(e)))
        self.logger.debug("Compute loop stopped")

    def _receive(self, command: Command) -> Any:
        src = self.ctx.rank_of(self.stage - 1, self.ctx.tp_rank)
        handle = recv_async(self.ctx, src, command.unique_key)
        try:
            payload = handle.wait(self.options.recv_timeout)
        except ProtocolError:
            cancel_recv(self.ctx, src, command.unique_key)
            raise
        self.trace.record(self.ctx.rank, "recv", command.unique_key)
        hidden = self.config.hidden
        if command.drce:
            if payload.shape != (sum(command.seq_lens), hidden):
                raise DimensionError(f"received {payload.shape} for {sum(command.seq_lens)} packed rows")
            return PackedActivations.from_rows(payload, command.seq_lens, command.s_pad)
        if payload.shape != (command.batch_size, command.s_pad, hidden):
            raise DimensionError(f"received {payload.shape}, command says "
                                 f"{(command.batch_size, command.s_pad, hidden)}")
        return payload

    def _layer(self, command: Command, mask: AttentionMask) -> Callable[[int, Any, Any], Any]:
        cfg = self.config
        sharded = self.ctx.tp_size > 1

        def compute(_, layer, x):
            if command.drce:
                return drce_layer_forward(x, layer, command.seq_lens, cfg.num_heads, cfg.causal,
                                          ctx=self.ctx if sharded else None, eps=cfg.layer_norm_eps,
                                          norm_position=cfg.norm_position, macs=self.macs)
            if sharded:
                return tp_layer_forward(self.ctx, x, layer, mask, cfg.layer_norm_eps, cfg.norm_position,
                                        self.macs)
            return transformer_layer_forward(x, layer, mask, cfg.num_heads, cfg.layer_norm_eps,
                                             cfg.norm_position, self.macs)
        return compute

    def process(self, command: Command) -> None:
        key = command.unique_key
        self.trace.record(self.ctx.rank, "start", key)
        if self.is_first:
            if command.token_ids is None:
                raise ProtocolError(f"stage 0 command for key {key} carries no tokens")
            x = embed(self.params.embedding, self.params.position, command.token_ids)
            if command.drce:
                x = pack(x, command.seq_lens)
        else:
            x = self._receive(command)

        mask = AttentionMask.for_batch(self.config.causal, command.seq_lens)
        compute = self._layer(command, mask)
        if self.pool is not None:
            x, self.last_timeline = self.pool.runner(self.bandwidth).run(x, compute)
        else:
            for i, layer in enumerate(self.params.layers):
                x = compute(i, layer, x)

        if self.is_last:
            out = self._finish(x)
            if self.ctx.tp_rank == 0:
                self.sink.deliver(key, out)
        else:
            dest = self.ctx.rank_of(self.stage + 1, self.ctx.tp_rank)
            payload = x.packed if isinstance(x, PackedActivations) else x
            send_async(self.ctx, dest, key, payload)
            self.trace.record(self.ctx.rank, "send", key)
        self.trace.record(self.ctx.rank, "finish", key)

    def _finish(self, x: Any) -> Tensor:
        eps = self.config.layer_norm_eps
        if isinstance(x, PackedActivations):
            return unpack(x.with_rows(layer_norm(x.packed, self.params.final_gamma, self.params.final_beta, eps)))
        return layer_norm(x, self.params.final_gamma, self.params.final_beta, eps)


class PipelineDispatcher(ResultSink):
    """
    Engine side of the pipeline.

    Keys come from one LoopCounter at submit time; a pool of dispatch lanes
    sends the commands, so arrival order at workers is arbitrary. At most
    queue_capacity batches are in flight; submit blocks beyond that.
    """

    def __init__(self, endpoints_by_stage: Sequence[Sequence[ControlEndpoint]], lanes: int = 2,
                 queue_capacity: int = 64, drce: bool = False):
        self.logger = logging.getLogger("dispatcher")
        self.endpoints_by_stage = [list(group) for group in endpoints_by_stage]
        self.counter = LoopCounter()
        self.drce = drce
        self._lanes = ThreadPoolExecutor(max_workers=max(1, lanes), thread_name_prefix="dispatch")
        self._slots = threading.BoundedSemaphore(queue_capacity)
        self._registry: Dict[int, ResultHandle] = {}
        self._lock = threading.Lock()
        self._accepting = True

    @property
    def in_flight(self) -> int:
        with self._lock:
            return len(self._registry)

    def handles(self) -> List[ResultHandle]:
        with self._lock:
            return list(self._registry.values())

    def submit(self, batch: Batch) -> ResultHandle:
        """
        Dispatch a batch and return immediately with its handle.

        Raises:
            RuntimeShutdownError: if intake is stopped
        """
        if not self._accepting:
            raise RuntimeShutdownError("runtime is shut down")
        self._slots.acquire()
        with self._lock:
            if not self._accepting:
                self._slots.release()
                raise RuntimeShutdownError("runtime is shut down")
            key = self.counter.acquire()
            handle = ResultHandle(key, batch.batch_id)
            self._registry[key] = handle
        handle.add_done_callback(self._release)
        self._lanes.submit(self._dispatch, key, batch)
        return handle

    def _dispatch(self, key: int, batch: Batch) -> None:
        try:
            for stage, endpoints in enumerate(self.endpoints_by_stage):
                command = Command.for_batch(key, batch, self.drce, with_payload=stage == 0)
                for endpoint in endpoints:
                    control_send(endpoint, command)
        except DeskInferError as e:
            self.logger.error(f"Dispatch of key {key} failed: {e}")
            self.fail(key, StageFailure(key, -1, str(e)))

    def _release(self, handle: ResultHandle) -> None:
        with self._lock:
            self._registry.pop(handle.key, None)
        self._slots.release()

    def deliver(self, key: int, output: Tensor) -> None:
        with self._lock:
            handle = self._registry.get(key)
        if handle is None:
            self.logger.warning(f"Result for unknown key {key}")
            return
        handle._settle(output, None)

    def fail(self, key: int, error: StageFailure) -> None:
        with self._lock:
            handle = self._registry.get(key)
        if handle is not None:
            handle._settle(None, error)

    def stop_intake(self) -> None:
        with self._lock:
            self._accepting = False

    def drain(self, timeout: Optional[float] = None) -> None:
        for handle in self.handles():
            handle._event.wait(timeout)

    def close(self) -> None:
        self._lanes.shutdown(wait=True)


def engine_submit(dispatcher: PipelineDispatcher, batch: Batch) -> ResultHandle:
    return dispatcher.submit(batch)
