#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Cost model module for deskinfer.
This module provides the virtual clock used for overlap and speedup checks:
a calibratable per-layer compute cost, link transfer times, and an event
recurrence for pipelined execution of many batches over several stages.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import ConfigurationError


def transfer_time(nbytes: float, link_gbps: float) -> float:
    """
    Seconds to move nbytes over a link of link_gbps gigabytes per second.

    Args:
        nbytes: Bytes to move
        link_gbps: Link bandwidth in GB/s (10^9 bytes)

    Returns:
        nbytes / (link_gbps * 1e9)
    """
    if link_gbps <= 0:
        raise ConfigurationError(f"link bandwidth must be positive, got {link_gbps}")
    if nbytes < 0:
        raise ConfigurationError(f"byte count must be non-negative, got {nbytes}")
    return nbytes / (link_gbps * 1e9)


@dataclass(frozen=True)
class ComputeCostModel:
    """
    Virtual-clock costs of one transformer layer.

    Compute is alpha seconds per token per parameter; all-reduces and
    inter-stage transfers are costed by activation bytes over link_gbps.
    """

    alpha: float = 1e-12
    link_gbps: float = 600.0
    bytes_per_value: int = 8

    def __post_init__(self):
        if self.alpha <= 0 or self.link_gbps <= 0:
            raise ConfigurationError("alpha and link bandwidth must be positive")

    def layer_cost(self, tokens: int, layer_params: int, tp_size: int = 1) -> float:
        """Compute seconds for one layer over `tokens` rows, split across tp_size ranks."""
        return self.alpha * tokens * layer_params / tp_size

    def activation_bytes(self, tokens: int, hidden: int) -> int:
        return tokens * hidden * self.bytes_per_value

    def all_reduce_cost(self, tokens: int, hidden: int, tp_size: int) -> float:
        if tp_size == 1:
            return 0.0
        return transfer_time(self.activation_bytes(tokens, hidden), self.link_gbps)

    def tp_layer_cost(self, tokens: int, hidden: int, layer_params: int, tp_size: int = 1) -> float:
        """Layer compute plus its two all-reduces."""
        return (self.layer_cost(tokens, layer_params, tp_size)
                + 2 * self.all_reduce_cost(tokens, hidden, tp_size))

    def stage_transfer_cost(self, tokens: int, hidden: int) -> float:
        return transfer_time(self.activation_bytes(tokens, hidden), self.link_gbps)


@dataclass(frozen=True)
class PipelineSchedule:
    """Start and finish times per stage and batch, shape [P, M]."""

    start: np.ndarray
    finish: np.ndarray
    release: np.ndarray

    @property
    def num_stages(self) -> int:
        return self.finish.shape[0]

    @property
    def num_batches(self) -> int:
        return self.finish.shape[1]

    @property
    def makespan(self) -> float:
        return float(self.finish[-1].max()) if self.num_batches else 0.0

    @property
    def latencies(self) -> np.ndarray:
        return self.finish[-1] - self.release

    @property
    def throughput(self) -> float:
        """Batches per virtual second."""
        return self.num_batches / self.makespan if self.makespan > 0 else 0.0


def simulate_pipeline(stage_costs: Union[Sequence[float], Sequence[Sequence[float]]], num_batches: int,
                      transfer_cost: float = 0.0, blocking: bool = False,
                      release_times: Optional[Sequence[float]] = None) -> PipelineSchedule:
    """
    Run the pipeline recurrence on the virtual clock.

    Non-blocking: a stage starts batch m as soon as it finished m-1 and m's
    activations arrived, so F[s][m] = max(F[s][m-1], F[s-1][m] + t) + c.
    Blocking: every hand-off is a rendezvous; the sender stays occupied until
    the receiver has finished its previous batch and the transfer is done.

    Args:
        stage_costs: Per-stage compute cost, either [P] (same for every batch) or [M, P]
        num_batches: Number of batches M
        transfer_cost: Inter-stage transfer time t
        blocking: Use the rendezvous schedule
        release_times: Time each batch is submitted (default all 0)

    Returns:
        PipelineSchedule
    """
    costs = np.asarray(stage_costs, dtype=np.float64)
    if costs.ndim == 1:
        costs = np.broadcast_to(costs, (num_batches, costs.shape[0]))
    if costs.ndim != 2 or costs.shape[0] != num_batches or costs.shape[1] < 1:
        raise ConfigurationError(f"stage costs of shape {costs.shape} do not describe {num_batches} batches")
    if np.any(costs < 0) or transfer_cost < 0:
        raise ConfigurationError("costs must be non-negative")
    stages = costs.shape[1]
    release = np.zeros(num_batches) if release_times is None else np.asarray(release_times, dtype=np.float64)

    start = np.zeros((stages, num_batches))
    finish = np.zeros((stages, num_batches))
    # time stage s is free to take the next batch
    free = np.zeros(stages)
    for m in range(num_batches):
        arrival = release[m]
        for s in range(stages):
            start[s, m] = max(free[s], arrival)
            finish[s, m] = start[s, m] + costs[m, s]
            if s == stages - 1:
                free[s] = finish[s, m]
            elif blocking:
                handoff = max(finish[s, m], free[s + 1])
                arrival = handoff + transfer_cost
                free[s] = arrival
            else:
                arrival = finish[s, m] + transfer_cost
                free[s] = finish[s, m]
    return PipelineSchedule(start, finish, release)
