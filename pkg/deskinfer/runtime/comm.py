#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Communication module for deskinfer.
This module provides the two communication contexts of the runtime: a
global SPMD context per rank for data-plane collectives and point-to-point
transfers, and control endpoints through which the engine commands workers.
Every data-plane operation is counted.
"""

import enum
import itertools
import logging
import queue
import socket
import threading
from collections import Counter
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..core.tensor_math import Tensor, tensor
from ..errors import ConfigurationError, DeliveryError, ProtocolError
from . import wire

ALL_REDUCE = "all_reduce"
P2P_SEND = "p2p_send"
P2P_RECV = "p2p_recv"

TRANSPORTS = ("inprocess", "socket")


class CommCounters:
    """Per-rank tallies of communication operations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Counter = Counter()

    def increment(self, kind: str, amount: int = 1) -> None:
        with self._lock:
            self._counts[kind] += amount

    def get(self, kind: str) -> int:
        with self._lock:
            return self._counts[kind]

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


class HandleState(enum.Enum):
    PENDING = "pending"
    DONE = "done"
    FAILED = "failed"


class CompletionHandle:
    """Completion of an asynchronous operation; settles exactly once."""

    _ids = itertools.count()

    def __init__(self, description: str = ""):
        self.op_id = next(CompletionHandle._ids)
        self.description = description
        self._lock = threading.Lock()
        self._event = threading.Event()
        self._state = HandleState.PENDING
        self._value: Any = None
        self._error: Optional[BaseException] = None

    @property
    def state(self) -> HandleState:
        return self._state

    def done(self) -> bool:
        return self._state is not HandleState.PENDING

    def _settle(self, state: HandleState, value: Any = None, error: Optional[BaseException] = None) -> None:
        with self._lock:
            if self._state is not HandleState.PENDING:
                raise ProtocolError(f"operation {self.op_id} ({self.description}) already {self._state.value}")
            self._state, self._value, self._error = state, value, error
            self._event.set()

    def _complete(self, value: Any = None) -> None:
        self._settle(HandleState.DONE, value=value)

    def _fail(self, error: BaseException) -> None:
        self._settle(HandleState.FAILED, error=error)

    def wait(self, timeout: Optional[float] = None) -> Any:
        """
        Block until the operation settles.

        Args:
            timeout: Seconds to wait, or None to wait forever

        Returns:
            The operation's value (the received tensor for receives)

        Raises:
            ProtocolError: on timeout, or the operation's own error if it failed
        """
        if not self._event.wait(timeout):
            raise ProtocolError(f"operation {self.op_id} ({self.description}) timed out after {timeout}s")
        if self._state is HandleState.FAILED:
            raise self._error
        return self._value

    def __repr__(self) -> str:
        return f"CompletionHandle({self.op_id}, {self.description!r}, {self._state.value})"


class _CollectiveSlot:
    def __init__(self, size: int):
        self.size = size
        self.contributions: Dict[int, Tensor] = {}
        self.result: Optional[Tensor] = None
        self.error: Optional[BaseException] = None
        self.readers = 0


class _Fabric:
    """Data plane shared by all ranks: tag-matched mailboxes and collective rendezvous."""

    def __init__(self, world_size: int, transport: str, collective_timeout: float):
        self.world_size = world_size
        self.transport = transport
        self.collective_timeout = collective_timeout
        self.logger = logging.getLogger("comm")
        self._lock = threading.Condition()
        self._mailbox: Dict[Tuple[int, int, int], Tensor] = {}
        self._waiters: Dict[Tuple[int, int, int], CompletionHandle] = {}
        self._in_flight: set = set()
        self._slots: Dict[Tuple[Tuple[int, ...], int], _CollectiveSlot] = {}
        self._closed = False
        self._links: Dict[Tuple[int, int], Tuple[socket.socket, socket.socket, threading.Lock]] = {}
        self._readers: List[threading.Thread] = []
        self._broken: Dict[Tuple[int, int], ProtocolError] = {}

    # point-to-point

    def send(self, src: int, dest: int, tag: int, payload: Tensor) -> CompletionHandle:
        key = (src, dest, tag)
        handle = CompletionHandle(f"send {src}->{dest} tag {tag}")
        with self._lock:
            if self._closed:
                raise ProtocolError("data plane is shut down")
            if key in self._in_flight:
                raise ProtocolError(f"tag {tag} from rank {src} to rank {dest} is still undelivered")
            self._in_flight.add(key)
        if self.transport == "socket" and src != dest:
            sock, _, lock = self._link(src, dest)
            with lock:
                sock.sendall(wire.encode_frame(wire.KIND_TENSOR, tag, payload))
        else:
            self._deliver(src, dest, tag, payload)
        handle._complete()
        return handle

    def _deliver(self, src: int, dest: int, tag: int, payload: Tensor) -> None:
        key = (src, dest, tag)
        with self._lock:
            waiter = self._waiters.pop(key, None)
            if waiter is None:
                self._mailbox[key] = payload
                return
            self._in_flight.discard(key)
        waiter._complete(payload)

    def recv(self, src: int, dest: int, tag: int) -> CompletionHandle:
        key = (src, dest, tag)
        handle = CompletionHandle(f"recv {src}->{dest} tag {tag}")
        with self._lock:
            if self._closed:
                handle._fail(ProtocolError("data plane is shut down"))
                return handle
            if key in self._waiters:
                raise ProtocolError(f"receive for tag {tag} from rank {src} already posted on rank {dest}")
            if key in self._mailbox:
                payload = self._mailbox.pop(key)
                self._in_flight.discard(key)
            elif (src, dest) in self._broken:
                handle._fail(self._broken[(src, dest)])
                return handle
            else:
                self._waiters[key] = handle
                return handle
        handle._complete(payload)
        return handle

    def cancel(self, src: int, dest: int, tag: int) -> None:
        """Drop a pending receive; it fails with ProtocolError."""
        with self._lock:
            waiter = self._waiters.pop((src, dest, tag), None)
        if waiter is not None and not waiter.done():
            waiter._fail(ProtocolError(f"receive for tag {tag} from rank {src} cancelled"))

    def _link(self, src: int, dest: int):
        with self._lock:
            if (src, dest) not in self._links:
                send_end, recv_end = socket.socketpair()
                self._links[(src, dest)] = (send_end, recv_end, threading.Lock())
                reader = threading.Thread(target=self._read_link, args=(src, dest, recv_end),
                                          name=f"link-{src}-{dest}", daemon=True)
                self._readers.append(reader)
                reader.start()
            return self._links[(src, dest)]

    def _read_link(self, src: int, dest: int, sock: socket.socket) -> None:
        while True:
            try:
                frame = wire.read_frame(sock)
            except OSError:
                return
            if frame is None:
                return
            try:
                kind, tag, payload = wire.decode_frame(frame)
            except ProtocolError as e:
                self.logger.error(f"Link {src}->{dest} received a malformed frame: {e}")
                self._break_link(src, dest, e)
                return
            if kind == wire.KIND_CLOSE:
                return
            self._deliver(src, dest, tag, payload)

    def _break_link(self, src: int, dest: int, error: ProtocolError) -> None:
        """Fail every pending and later receive on a link whose stream is unreadable."""
        broken = ProtocolError(f"link {src}->{dest} is broken: {error}")
        with self._lock:
            self._broken[(src, dest)] = broken
            stranded = [k for k in self._waiters if k[:2] == (src, dest)]
            waiters = [self._waiters.pop(k) for k in stranded]
        for waiter in waiters:
            waiter._fail(broken)

    # collectives

    def all_reduce(self, group: Tuple[int, ...], seq: int, rank: int, x: Tensor) -> Tensor:
        key = (group, seq)
        root = min(group)
        with self._lock:
            slot = self._slots.setdefault(key, _CollectiveSlot(len(group)))
            slot.contributions[rank] = x
            self._lock.notify_all()
            if rank == root:
                ready = self._lock.wait_for(
                    lambda: len(slot.contributions) == slot.size or self._closed, self.collective_timeout)
                if ready and not self._closed:
                    slot.result, slot.error = self._reduce(group, slot)
                elif self._closed:
                    slot.error = ProtocolError("data plane shut down during all_reduce")
                else:
                    slot.error = ProtocolError(
                        f"all_reduce over {group} timed out with {sorted(slot.contributions)} present")
                self._lock.notify_all()
            else:
                settled = self._lock.wait_for(
                    lambda: slot.result is not None or slot.error is not None or self._closed,
                    self.collective_timeout)
                if not settled or (self._closed and slot.result is None and slot.error is None):
                    slot.error = slot.error or ProtocolError(f"all_reduce over {group} did not complete")
            slot.readers += 1
            if slot.readers == slot.size:
                self._slots.pop(key, None)
            if slot.error is not None:
                raise slot.error
            return slot.result

    @staticmethod
    def _reduce(group: Tuple[int, ...], slot: _CollectiveSlot):
        shapes = {r: slot.contributions[r].shape for r in sorted(slot.contributions)}
        if len(set(shapes.values())) != 1:
            return None, ProtocolError(f"all_reduce shape divergence across group: {shapes}")
        ordered = sorted(group)
        acc = np.array(slot.contributions[ordered[0]], dtype=np.float64)
        for r in ordered[1:]:
            acc += slot.contributions[r]
        return tensor(acc), None

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            waiters = list(self._waiters.values())
            self._waiters.clear()
            links = list(self._links.values())
            self._lock.notify_all()
        for waiter in waiters:
            waiter._fail(ProtocolError("peer shut down before the message arrived"))
        for send_end, recv_end, lock in links:
            with lock:
                try:
                    send_end.sendall(wire.encode_frame(wire.KIND_CLOSE, 0))
                except OSError:
                    pass
        for reader in self._readers:
            reader.join(timeout=5)
        for send_end, recv_end, _ in links:
            send_end.close()
            recv_end.close()


class GlobalContext:
    """Per-rank SPMD view of the world."""

    def __init__(self, rank: int, world_size: int, tp_size: int, pp_size: int, fabric: _Fabric):
        self.rank = rank
        self.world_size = world_size
        self.tp_size = tp_size
        self.pp_size = pp_size
        self.tp_rank = rank % tp_size
        self.pp_stage = rank // tp_size
        self.tp_group = [self.pp_stage * tp_size + t for t in range(tp_size)]
        self.pp_group = [s * tp_size + self.tp_rank for s in range(pp_size)]
        self.counters = CommCounters()
        self._fabric = fabric
        self._collective_seq: Dict[Tuple[int, ...], int] = {}

    def rank_of(self, stage: int, tp_rank: int) -> int:
        return stage * self.tp_size + tp_rank

    def _next_seq(self, group: Tuple[int, ...]) -> int:
        seq = self._collective_seq.get(group, 0)
        self._collective_seq[group] = seq + 1
        return seq

    def __repr__(self) -> str:
        return (f"GlobalContext(rank={self.rank}, tp_rank={self.tp_rank}, stage={self.pp_stage}, "
                f"world={self.world_size})")


def all_reduce_sum(ctx: GlobalContext, x: Tensor, group: Optional[Sequence[int]] = None) -> Tensor:
    """
    Elementwise sum across a group; every member receives the same tensor.

    Contributions are gathered on the lowest rank and summed in ascending rank
    order, so the result is bit-identical on every member and across runs.

    Args:
        ctx: Calling rank's context
        x: Local contribution
        group: Ranks taking part (default: the caller's tp group)

    Returns:
        The summed tensor
    """
    group = tuple(group if group is not None else ctx.tp_group)
    if ctx.rank not in group:
        raise ProtocolError(f"rank {ctx.rank} is not a member of group {group}")
    ctx.counters.increment(ALL_REDUCE)
    if len(group) == 1:
        return tensor(x)
    return ctx._fabric.all_reduce(group, ctx._next_seq(group), ctx.rank, x)


def send_async(ctx: GlobalContext, dest_rank: int, tag: int, payload: Tensor) -> CompletionHandle:
    """
    Non-blocking send; the returned handle completes once the payload is handed to the transport.

    Raises:
        ProtocolError: if the same tag to the same destination is still undelivered
    """
    _check_rank(ctx, dest_rank)
    handle = ctx._fabric.send(ctx.rank, dest_rank, tag, payload)
    ctx.counters.increment(P2P_SEND)
    return handle


def recv_async(ctx: GlobalContext, src_rank: int, tag: int) -> CompletionHandle:
    """
    Non-blocking receive matched by (src, dest, tag); wait() on the handle yields the payload.
    """
    _check_rank(ctx, src_rank)
    ctx.counters.increment(P2P_RECV)
    return ctx._fabric.recv(src_rank, ctx.rank, tag)


def cancel_recv(ctx: GlobalContext, src_rank: int, tag: int) -> None:
    ctx._fabric.cancel(src_rank, ctx.rank, tag)


def _check_rank(ctx: GlobalContext, rank: int) -> None:
    if not 0 <= rank < ctx.world_size:
        raise ProtocolError(f"rank {rank} outside world of size {ctx.world_size}")


_CLOSE = object()


class ControlEndpoint:
    """A worker's control inbox: reliable and FIFO per sender."""

    def __init__(self, worker_id: int, delay_hook: Optional[Callable[[int, Any], None]] = None):
        self.worker_id = worker_id
        self.delay_hook = delay_hook
        self.inbox: "queue.Queue[Any]" = queue.Queue()
        self.connected = True

    def disconnect(self) -> None:
        self.connected = False


def control_send(endpoint: ControlEndpoint, cmd: Any) -> None:
    """
    Deliver a control message to one worker.

    Raises:
        DeliveryError: if the worker is disconnected
    """
    if not endpoint.connected:
        raise DeliveryError(endpoint.worker_id)
    if endpoint.delay_hook is not None:
        endpoint.delay_hook(endpoint.worker_id, cmd)
    endpoint.inbox.put(cmd)


def control_broadcast(endpoints: Sequence[ControlEndpoint], cmd: Any) -> None:
    for endpoint in endpoints:
        control_send(endpoint, cmd)


def control_serve(endpoint: ControlEndpoint) -> Iterator[Any]:
    """Yield control messages in arrival order until the endpoint is closed."""
    while True:
        item = endpoint.inbox.get()
        if item is _CLOSE:
            return
        yield item


def control_close(endpoint: ControlEndpoint) -> None:
    """Stop the endpoint's serve loop after everything already queued."""
    endpoint.inbox.put(_CLOSE)
    endpoint.disconnect()


class CommWorld:
    """All ranks' contexts and control endpoints of one runtime."""

    def __init__(self, contexts: List[GlobalContext], endpoints: List[ControlEndpoint], fabric: _Fabric):
        self.contexts = contexts
        self.endpoints = endpoints
        self._fabric = fabric

    @property
    def world_size(self) -> int:
        return len(self.contexts)

    def total(self, kind: str, ranks: Optional[Sequence[int]] = None) -> int:
        ranks = range(self.world_size) if ranks is None else ranks
        return sum(self.contexts[r].counters.get(kind) for r in ranks)

    def reset_counters(self) -> None:
        for ctx in self.contexts:
            ctx.counters.reset()

    def shutdown(self) -> None:
        self._fabric.close()


def init_contexts(world_size: int, tp_size: int, pp_size: Optional[int] = None,
                  transport: str = "inprocess", collective_timeout: float = 30.0,
                  control_delay: Optional[Callable[[int, Any], None]] = None) -> CommWorld:
    """
    Create the global and control contexts for every rank.

    Rank r has tp_rank = r mod tp_size and stage = r div tp_size.

    Args:
        world_size: Total ranks
        tp_size: Tensor-parallel group size
        pp_size: Pipeline depth (default: world_size / tp_size)
        transport: "inprocess" or "socket" data plane
        collective_timeout: Seconds a collective waits for its group
        control_delay: Optional hook called on every control send

    Returns:
        CommWorld

    Raises:
        ConfigurationError: if world_size is not tp_size x pp_size
    """
    if world_size < 1 or tp_size < 1:
        raise ConfigurationError("world_size and tp_size must be >= 1")
    if pp_size is None:
        if world_size % tp_size:
            raise ConfigurationError(f"world size {world_size} is not divisible by tp size {tp_size}")
        pp_size = world_size // tp_size
    if tp_size * pp_size != world_size:
        raise ConfigurationError(f"world size {world_size} != tp {tp_size} x pp {pp_size}")
    if transport not in TRANSPORTS:
        raise ConfigurationError(f"unknown transport {transport!r}, expected one of {TRANSPORTS}")
    fabric = _Fabric(world_size, transport, collective_timeout)
    contexts = [GlobalContext(r, world_size, tp_size, pp_size, fabric) for r in range(world_size)]
    endpoints = [ControlEndpoint(r, control_delay) for r in range(world_size)]
    logging.getLogger("comm").info(
        f"Initialized {world_size} ranks (tp={tp_size}, pp={pp_size}, transport={transport})")
    return CommWorld(contexts, endpoints, fabric)
