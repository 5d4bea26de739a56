#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Memory pool module for deskinfer.
This module treats the memory of peer devices and the host as one pool for
layer parameters. Layers that do not fit the local budget are spread evenly
through the stack, homed on peers first and on the host once every peer is
full, and fetched into staging slots ahead of use on a transfer lane that
runs concurrently with the compute lane.
"""

import csv
import enum
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.model import (
    Batch, ModelParams, batch_mask, embed, layer_param_count, transformer_layer_forward,
)
from ..core.tensor_math import Tensor, layer_norm, tensor
from ..errors import CapacityError, ConfigurationError, ProtocolError
from .cost_model import ComputeCostModel, transfer_time

CLOCKS = ("real", "virtual")

LANE_COMPUTE = "compute"
LANE_TRANSFER = "transfer"


class DeviceKind(enum.Enum):
    LOCAL = "local_accelerator"
    PEER = "peer_accelerator"
    HOST = "host"


@dataclass(frozen=True)
class Home:
    """Where a layer's parameters live between uses."""

    kind: DeviceKind
    device_id: Optional[int] = None

    @property
    def name(self) -> str:
        if self.kind is DeviceKind.PEER:
            return f"peer{self.device_id}"
        return "local" if self.kind is DeviceKind.LOCAL else "host"

    @classmethod
    def parse(cls, name: str) -> 'Home':
        if name == "local":
            return LOCAL
        if name == "host":
            return HOST
        if name.startswith("peer") and name[4:].isdigit():
            return cls(DeviceKind.PEER, int(name[4:]))
        raise ConfigurationError(f"unknown home {name!r}")


LOCAL = Home(DeviceKind.LOCAL)
HOST = Home(DeviceKind.HOST)


class MemoryBudget:
    """Byte budget of one device; every load and evict is checked."""

    def __init__(self, device_id: str, kind: DeviceKind, capacity_bytes: Optional[int]):
        self.device_id = device_id
        self.kind = kind
        self.capacity_bytes = capacity_bytes
        self.resident_bytes = 0
        self.peak_bytes = 0
        self._layers: Dict[Any, int] = {}
        self._lock = threading.Lock()

    def load(self, layer: Any, nbytes: int) -> None:
        """
        Reserve nbytes for a layer.

        Raises:
            CapacityError: if the reservation would exceed capacity
            ProtocolError: if the layer is already resident
        """
        with self._lock:
            if layer in self._layers:
                raise ProtocolError(f"layer {layer} is already resident on {self.device_id}")
            if self.capacity_bytes is not None and self.resident_bytes + nbytes > self.capacity_bytes:
                raise CapacityError(self.device_id, layer,
                                    f"loading layer {layer} ({nbytes} B) on {self.device_id} would hold "
                                    f"{self.resident_bytes + nbytes} of {self.capacity_bytes} B")
            self._layers[layer] = nbytes
            self.resident_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.resident_bytes)

    def evict(self, layer: Any) -> None:
        with self._lock:
            if layer not in self._layers:
                raise ProtocolError(f"evicting layer {layer} that was never loaded on {self.device_id}")
            self.resident_bytes -= self._layers.pop(layer)

    def free_bytes(self) -> float:
        if self.capacity_bytes is None:
            return float('inf')
        return self.capacity_bytes - self.resident_bytes

    def holds(self, layer: Any) -> bool:
        return layer in self._layers

    def __repr__(self) -> str:
        return f"MemoryBudget({self.device_id}, {self.resident_bytes}/{self.capacity_bytes})"


@dataclass(frozen=True)
class PlacementPlan:
    """Home of every layer plus the prefetch depth."""

    homes: Tuple[Home, ...]
    prefetch_depth: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'homes', tuple(self.homes))
        if self.prefetch_depth < 1:
            raise ConfigurationError(f"prefetch depth must be >= 1, got {self.prefetch_depth}")

    @property
    def num_layers(self) -> int:
        return len(self.homes)

    @property
    def offloaded(self) -> Tuple[int, ...]:
        return tuple(i for i, home in enumerate(self.homes) if home.kind is not DeviceKind.LOCAL)

    @property
    def local_layers(self) -> int:
        return self.num_layers - len(self.offloaded)

    def is_local(self, layer: int) -> bool:
        return self.homes[layer].kind is DeviceKind.LOCAL

    def to_dict(self) -> Dict:
        return {'homes': [h.name for h in self.homes], 'prefetch_depth': self.prefetch_depth}

    @classmethod
    def from_dict(cls, data: Dict) -> 'PlacementPlan':
        return cls(tuple(Home.parse(h) for h in data['homes']), int(data.get('prefetch_depth', 1)))

    @classmethod
    def all_local(cls, num_layers: int, prefetch_depth: int = 1) -> 'PlacementPlan':
        return cls((LOCAL,) * num_layers, prefetch_depth)


@dataclass(frozen=True)
class BandwidthModel:
    """Link rates in GB/s; peer_interference removes a fraction of the peer link."""

    param_bytes: int
    peer_link_gbps: float = 600.0
    host_link_gbps: float = 32.0
    peer_interference: float = 0.0

    def __post_init__(self):
        if self.peer_link_gbps <= 0 or self.host_link_gbps <= 0:
            raise ConfigurationError("link bandwidths must be positive")
        if not 0.0 <= self.peer_interference < 1.0:
            raise ConfigurationError(f"peer interference must be in [0, 1), got {self.peer_interference}")
        if self.param_bytes < 0:
            raise ConfigurationError("param_bytes must be non-negative")

    def link_gbps(self, home: Home) -> float:
        if home.kind is DeviceKind.PEER:
            return self.peer_link_gbps * (1.0 - self.peer_interference)
        return self.host_link_gbps

    def fetch_time(self, home: Home) -> float:
        if home.kind is DeviceKind.LOCAL:
            return 0.0
        return transfer_time(self.param_bytes, self.link_gbps(home))


def offload_indices(num_layers: int, local_capacity_layers: int) -> List[int]:
    """Last index of each of the L-n near-even contiguous groups of [0, L)."""
    groups = num_layers - local_capacity_layers
    if groups <= 0:
        return []
    size, extra = divmod(num_layers, groups)
    indices, end = [], 0
    for g in range(groups):
        end += size + (1 if g < extra else 0)
        indices.append(end - 1)
    return indices


def plan_placement(num_layers: int, local_capacity_layers: int, prefetch_depth: int = 1,
                   peer_capacities: Optional[Sequence[int]] = None) -> PlacementPlan:
    """
    Decide the home of every layer before inference starts.

    Offloaded layers are the last layer of each of L-n contiguous groups,
    assigned round-robin to peers that still have room, then to the host.

    Args:
        num_layers: Layers L to place
        local_capacity_layers: Layers n that stay local
        prefetch_depth: Layers k a fetch is issued ahead of use
        peer_capacities: Layer capacity of each peer device (default: no peers)

    Returns:
        PlacementPlan

    Raises:
        ConfigurationError: if n is 0 or capacities are negative
    """
    if local_capacity_layers < 1:
        raise ConfigurationError("local capacity must hold at least one layer")
    peers = list(peer_capacities or [])
    if any(c < 0 for c in peers):
        raise ConfigurationError(f"peer capacities must be non-negative: {peers}")
    homes = [LOCAL] * num_layers
    remaining, cursor = list(peers), 0
    for index in offload_indices(num_layers, local_capacity_layers):
        home = HOST
        for step in range(len(remaining)):
            peer = (cursor + step) % len(remaining)
            if remaining[peer] > 0:
                remaining[peer] -= 1
                cursor = peer + 1
                home = Home(DeviceKind.PEER, peer)
                break
        homes[index] = home
    plan = PlacementPlan(tuple(homes), prefetch_depth)
    logging.getLogger("mempool").debug(f"Placement for {num_layers} layers: offloaded {plan.offloaded}")
    return plan


@dataclass(frozen=True)
class Interval:
    lane: str
    layer: int
    start: float
    end: float
    kind: str


@dataclass(frozen=True)
class MemoryEvent:
    time: float
    op: str
    layer: int
    nbytes: int
    device_id: str = "local"


class Timeline:
    """Per-layer fetch, compute and stall intervals plus local memory events."""

    FIELDS = ("lane", "layer", "start", "end", "kind")

    def __init__(self):
        self.intervals: List[Interval] = []
        self.memory_events: List[MemoryEvent] = []
        self._lock = threading.Lock()

    def add_interval(self, lane: str, layer: int, start: float, end: float, kind: str) -> None:
        with self._lock:
            self.intervals.append(Interval(lane, layer, start, end, kind))

    def add_event(self, event_time: float, op: str, layer: int, nbytes: int, device_id: str = "local") -> None:
        with self._lock:
            self.memory_events.append(MemoryEvent(event_time, op, layer, nbytes, device_id))

    def of_kind(self, kind: str) -> List[Interval]:
        return [iv for iv in self.intervals if iv.kind == kind]

    def total_stall(self) -> float:
        return sum(iv.end - iv.start for iv in self.of_kind("stall"))

    def makespan(self) -> float:
        compute = self.of_kind("compute")
        return max((iv.end for iv in compute), default=0.0)

    def fetch_count(self) -> int:
        return len(self.of_kind("fetch"))

    def rows(self) -> List[Dict[str, Any]]:
        return [{'lane': iv.lane, 'layer': iv.layer, 'start': iv.start, 'end': iv.end, 'kind': iv.kind}
                for iv in sorted(self.intervals, key=lambda iv: (iv.start, iv.lane != LANE_TRANSFER))]

    def to_csv(self, path: str) -> None:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=self.FIELDS)
            writer.writeheader()
            writer.writerows(self.rows())


def budget_track(events: Sequence[MemoryEvent], capacity_bytes: Optional[int],
                 device_id: str = "local") -> MemoryBudget:
    """
    Replay memory events in timestamp order against a fresh budget.

    Returns:
        The budget after the last event (peak_bytes holds the high-water mark)

    Raises:
        CapacityError: naming the layer whose load exceeds capacity
        ProtocolError: if a layer is evicted before it is loaded
    """
    budget = MemoryBudget(device_id, DeviceKind.LOCAL, capacity_bytes)
    for event in sorted(events, key=lambda e: e.time):
        if event.device_id != device_id:
            continue
        if event.op == "load":
            budget.load(event.layer, event.nbytes)
        elif event.op == "evict":
            budget.evict(event.layer)
        else:
            raise ProtocolError(f"unknown memory event {event.op!r}")
    return budget


def _staged_copy(layer: Any) -> Any:
    return replace(layer, **{name: tensor(np.array(t)) for name, t in layer.tensors()})


class MemoryPool:
    """
    Home stores and budgets for one placement.

    Local layers are resident for the whole run; off-home layers are held by
    their peer or host store and copied into a local staging slot when fetched.
    """

    def __init__(self, plan: PlacementPlan, layers: Sequence[Any], layer_bytes: int,
                 local_capacity_bytes: Optional[int] = None,
                 peer_capacities: Optional[Sequence[int]] = None):
        """
        Initialize the pool.

        Args:
            plan: PlacementPlan over the given layers
            layers: Layer parameter objects, one per plan entry
            layer_bytes: Bytes of one layer
            local_capacity_bytes: Local budget (default: local layers plus k staging slots)
            peer_capacities: Capacity of each peer in layers (default: what the plan uses)
        """
        if len(layers) != plan.num_layers:
            raise ConfigurationError(f"plan covers {plan.num_layers} layers but {len(layers)} were given")
        self.logger = logging.getLogger("mempool")
        self.plan = plan
        self.layer_bytes = layer_bytes
        if local_capacity_bytes is None:
            local_capacity_bytes = (plan.local_layers + plan.prefetch_depth) * layer_bytes
        self.local = MemoryBudget("local", DeviceKind.LOCAL, local_capacity_bytes)
        used = {}
        for home in plan.homes:
            if home.kind is DeviceKind.PEER:
                used[home.device_id] = used.get(home.device_id, 0) + 1
        if peer_capacities is None:
            peer_capacities = [used.get(d, 0) for d in range(max(used, default=-1) + 1)]
        self.peer_capacities = list(peer_capacities)
        self.budgets: Dict[str, MemoryBudget] = {'local': self.local,
                                                 'host': MemoryBudget("host", DeviceKind.HOST, None)}
        for d, capacity in enumerate(self.peer_capacities):
            self.budgets[f"peer{d}"] = MemoryBudget(f"peer{d}", DeviceKind.PEER, capacity * layer_bytes)
        self._stores: Dict[int, Any] = {}
        for index, (home, layer) in enumerate(zip(plan.homes, layers)):
            if home.name not in self.budgets:
                raise ConfigurationError(f"layer {index} is homed on unknown device {home.name}")
            self.budgets[home.name].load(index, layer_bytes)
            self._stores[index] = layer
        self.logger.info(f"Pool holds {plan.local_layers} local and {len(plan.offloaded)} offloaded layers")

    def resident(self, index: int) -> Any:
        if not self.plan.is_local(index):
            raise ProtocolError(f"layer {index} is not resident locally")
        return self._stores[index]

    def fetch(self, index: int) -> Any:
        """Copy an off-home layer out of its home store."""
        return _staged_copy(self._stores[index])

    def validate(self) -> None:
        """
        Re-check budgets and the peer-before-host rule.

        Raises:
            CapacityError: if a budget is over capacity
            ConfigurationError: if a host layer could have fit on a peer
        """
        for budget in self.budgets.values():
            if budget.capacity_bytes is not None and budget.resident_bytes > budget.capacity_bytes:
                raise CapacityError(budget.device_id, None)
        on_host = [i for i, h in enumerate(self.plan.homes) if h.kind is DeviceKind.HOST]
        peer_room = [b for name, b in self.budgets.items()
                     if name.startswith("peer") and b.free_bytes() >= self.layer_bytes]
        if on_host and peer_room:
            raise ConfigurationError(f"layers {on_host} on host while {peer_room[0].device_id} has room")

    def runner(self, bandwidth: BandwidthModel, clock: str = "real",
               cost_fn: Optional[Callable[[int], float]] = None) -> 'PooledLayerRunner':
        return PooledLayerRunner(self, bandwidth, clock, cost_fn)


class PooledLayerRunner:
    """
    Two-lane layer executor.

    The compute lane runs layers in order; the transfer lane fetches
    off-home layers in order into at most prefetch_depth staging slots.
    The fetch for off-home layer j is issued when layer max(0, j - k) begins,
    or later when a slot is released. A staging slot is released as soon as
    its layer's compute ends.
    """

    def __init__(self, pool: MemoryPool, bandwidth: BandwidthModel, clock: str = "real",
                 cost_fn: Optional[Callable[[int], float]] = None):
        if clock not in CLOCKS:
            raise ConfigurationError(f"unknown clock {clock!r}, expected one of {CLOCKS}")
        if clock == "virtual" and cost_fn is None:
            raise ConfigurationError("the virtual clock needs a per-layer cost function")
        self.logger = logging.getLogger("mempool")
        self.pool = pool
        self.plan = pool.plan
        self.bandwidth = bandwidth
        self.clock = clock
        self.cost_fn = cost_fn
        self._origin = 0.0

    def _now(self) -> float:
        return time.perf_counter() - self._origin

    def run(self, x: Any, compute: Callable[[int, Any, Any], Any]) -> Tuple[Any, Timeline]:
        """
        Execute every layer of the plan in order.

        Args:
            x: Input activations
            compute: compute(index, layer_params, x) -> next activations

        Returns:
            (output activations, Timeline)
        """
        if self.clock == "virtual":
            return self._run_virtual(x, compute)
        return self._run_real(x, compute)

    def _due(self, pending: List[int], layer: int, free_slots: int) -> List[int]:
        k = self.plan.prefetch_depth
        due = []
        while pending and len(due) < free_slots and max(0, pending[0] - k) <= layer:
            due.append(pending.pop(0))
        return due

    def _run_virtual(self, x: Any, compute: Callable[[int, Any, Any], Any]) -> Tuple[Any, Timeline]:
        timeline = Timeline()
        self._load_resident(timeline)
        try:
            return self._virtual_lanes(x, compute, timeline)
        finally:
            self._release_staged()

    def _virtual_lanes(self, x: Any, compute: Callable[[int, Any, Any], Any],
                       timeline: Timeline) -> Tuple[Any, Timeline]:
        pending = list(self.plan.offloaded)
        ready: Dict[int, float] = {}
        free_slots, transfer_free, now = self.plan.prefetch_depth, 0.0, 0.0
        for i in range(self.plan.num_layers):
            for j in self._due(pending, i, free_slots):
                free_slots -= 1
                start = max(now, transfer_free)
                transfer_free = ready[j] = start + self.bandwidth.fetch_time(self.plan.homes[j])
                self.pool.local.load(j, self.pool.layer_bytes)
                timeline.add_event(start, "load", j, self.pool.layer_bytes)
                timeline.add_interval(LANE_TRANSFER, j, start, ready[j], "fetch")
            if self.plan.is_local(i):
                params = self.pool.resident(i)
            else:
                params = self.pool.fetch(i)
                if ready[i] > now:
                    timeline.add_interval(LANE_COMPUTE, i, now, ready[i], "stall")
                    now = ready[i]
            x = compute(i, params, x)
            end = now + self.cost_fn(i)
            timeline.add_interval(LANE_COMPUTE, i, now, end, "compute")
            now = end
            if not self.plan.is_local(i):
                self.pool.local.evict(i)
                timeline.add_event(now, "evict", i, self.pool.layer_bytes)
                free_slots += 1
        return x, timeline

    def _run_real(self, x: Any, compute: Callable[[int, Any, Any], Any]) -> Tuple[Any, Timeline]:
        timeline = Timeline()
        self._origin = time.perf_counter()
        self._load_resident(timeline)
        pending = list(self.plan.offloaded)
        futures: Dict[int, Future] = {}
        free_slots = self.plan.prefetch_depth

        def fetch(j: int):
            start = self._now()
            self.pool.local.load(j, self.pool.layer_bytes)
            timeline.add_event(start, "load", j, self.pool.layer_bytes)
            params = self.pool.fetch(j)
            timeline.add_interval(LANE_TRANSFER, j, start, self._now(), "fetch")
            return params

        try:
            with ThreadPoolExecutor(max_workers=1, thread_name_prefix="transfer") as lane:
                try:
                    for i in range(self.plan.num_layers):
                        for j in self._due(pending, i, free_slots):
                            free_slots -= 1
                            futures[j] = lane.submit(fetch, j)
                        if self.plan.is_local(i):
                            params = self.pool.resident(i)
                        else:
                            waited = self._now()
                            params = futures.pop(i).result()
                            arrived = self._now()
                            if arrived > waited:
                                timeline.add_interval(LANE_COMPUTE, i, waited, arrived, "stall")
                        start = self._now()
                        x = compute(i, params, x)
                        end = self._now()
                        timeline.add_interval(LANE_COMPUTE, i, start, end, "compute")
                        if not self.plan.is_local(i):
                            self.pool.local.evict(i)
                            timeline.add_event(end, "evict", i, self.pool.layer_bytes)
                            free_slots += 1
                finally:
                    for future in futures.values():
                        future.cancel()
        finally:
            # the lane has drained here, so no fetch can land after the release
            self._release_staged()
        return x, timeline

    def _release_staged(self) -> None:
        """Evict off-home layers a failed run left in staging slots."""
        stale = [j for j in self.plan.offloaded if self.pool.local.holds(j)]
        for j in stale:
            self.pool.local.evict(j)
        if stale:
            self.logger.warning(f"Released staged layers {stale} after an interrupted run")

    def _load_resident(self, timeline: Timeline) -> None:
        for i in range(self.plan.num_layers):
            if self.plan.is_local(i):
                if not self.pool.local.holds(i):
                    self.pool.local.load(i, self.pool.layer_bytes)
                timeline.add_event(0.0, "load", i, self.pool.layer_bytes)


def check_staging(plan: PlacementPlan, layer_bytes: int, local_capacity_bytes: int) -> None:
    """
    Raises:
        ConfigurationError: if the local budget cannot hold the resident layers plus k staging slots
    """
    needed = (plan.local_layers + plan.prefetch_depth) * layer_bytes
    if plan.offloaded and local_capacity_bytes < needed:
        raise ConfigurationError(
            f"local capacity {local_capacity_bytes} B cannot hold {plan.local_layers} resident layers "
            f"and {plan.prefetch_depth} staging slots ({needed} B)")


def pooled_forward(params: ModelParams, plan: PlacementPlan, batch: Batch,
                   cost_model: Optional[ComputeCostModel] = None,
                   bandwidth: Optional[BandwidthModel] = None, clock: Optional[str] = None,
                   local_capacity_bytes: Optional[int] = None,
                   peer_capacities: Optional[Sequence[int]] = None) -> Tuple[Tensor, Timeline]:
    """
    Serial forward pass with layer parameters served from the memory pool.

    Args:
        params: Full model parameters, placed into the pool per plan
        plan: PlacementPlan over params.layers
        batch: Input batch
        cost_model: Per-layer compute cost for the virtual clock
        bandwidth: Link model (default: 8-byte parameters, default links)
        clock: "real" or "virtual" (default: virtual when a cost model is given)
        local_capacity_bytes: Local budget (default: exactly resident + k slots)
        peer_capacities: Layer capacity per peer

    Returns:
        (final hidden states [B, S_pad, H], Timeline)

    Raises:
        ConfigurationError: if the staging area cannot hold k layers
    """
    config = params.config
    if plan.num_layers != config.num_layers:
        raise ConfigurationError(f"plan covers {plan.num_layers} layers, model has {config.num_layers}")
    layer_bytes = params.layers[0].nbytes if params.layers else 0
    if local_capacity_bytes is not None:
        check_staging(plan, layer_bytes, local_capacity_bytes)
    bandwidth = bandwidth or BandwidthModel(param_bytes=layer_bytes)
    clock = clock or ("virtual" if cost_model is not None else "real")
    cost_fn = None
    if cost_model is not None:
        per_layer = cost_model.layer_cost(batch.batch_size * batch.s_pad, layer_param_count(config))

        def cost_fn(_):
            return per_layer
    pool = MemoryPool(plan, params.layers, layer_bytes, local_capacity_bytes, peer_capacities)
    pool.validate()

    batch.validate(config)
    mask = batch_mask(config, batch)

    def compute(_, layer, h):
        return transformer_layer_forward(h, layer, mask, config.num_heads, config.layer_norm_eps,
                                         config.norm_position)

    x = embed(params.embedding, params.position, batch.token_ids)
    x, timeline = pool.runner(bandwidth, clock, cost_fn).run(x, compute)
    return layer_norm(x, params.final_gamma, params.final_beta, config.layer_norm_eps), timeline


@dataclass(frozen=True)
class PoolConfig:
    """Memory pool options of a runtime; a plan, when given, overrides the computed placement."""

    enabled: bool = False
    local_capacity_layers: int = 1
    prefetch_depth: int = 1
    peer_capacities: Tuple[int, ...] = ()
    peer_link_gbps: float = 600.0
    host_link_gbps: float = 32.0
    peer_interference: float = 0.0
    bytes_per_param: int = 8
    plan: Optional[PlacementPlan] = None

    def __post_init__(self):
        object.__setattr__(self, 'peer_capacities', tuple(int(c) for c in self.peer_capacities))
        if self.enabled and self.plan is None and self.local_capacity_layers < 1:
            raise ConfigurationError("local capacity must hold at least one layer")
        if self.prefetch_depth < 1:
            raise ConfigurationError(f"prefetch depth must be >= 1, got {self.prefetch_depth}")

    def bandwidth(self, layer_params: int) -> BandwidthModel:
        return BandwidthModel(layer_params * self.bytes_per_param, self.peer_link_gbps, self.host_link_gbps,
                              self.peer_interference)
