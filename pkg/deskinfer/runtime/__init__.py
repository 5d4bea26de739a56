"""
Runtime package for deskinfer.
This package contains communication, parallel execution, the memory pool and the engine.
"""

from .comm import (
    ALL_REDUCE, P2P_RECV, P2P_SEND, CommWorld, ControlEndpoint, GlobalContext, all_reduce_sum,
    control_broadcast, control_send, control_serve, init_contexts, recv_async, send_async,
)
from .cost_model import ComputeCostModel, PipelineSchedule, simulate_pipeline, transfer_time
from .drce import PackedActivations, drce_forward, drce_layer_forward, drce_savings, pack, unpack
from .engine import Runtime, RuntimeConfig, initialize, shutdown, submit
from .mempool import (
    BandwidthModel, DeviceKind, Home, MemoryBudget, MemoryPool, PlacementPlan, PoolConfig, PooledLayerRunner,
    Timeline, budget_track, plan_placement, pooled_forward,
)
from .pipeline import (
    Command, ConsistencyQueue, LoopCounter, ResultHandle, StagePlan, StageWorker, TraceLog, engine_submit,
    partition_layers, result_wait,
)
from .tensor_parallel import ShardedLayerParams, shard_params, tp_layer_forward

__all__ = [
    'ALL_REDUCE', 'P2P_RECV', 'P2P_SEND', 'CommWorld', 'ControlEndpoint', 'GlobalContext', 'all_reduce_sum',
    'control_broadcast', 'control_send', 'control_serve', 'init_contexts', 'recv_async', 'send_async',
    'ComputeCostModel', 'PipelineSchedule', 'simulate_pipeline', 'transfer_time',
    'PackedActivations', 'drce_forward', 'drce_layer_forward', 'drce_savings', 'pack', 'unpack',
    'Runtime', 'RuntimeConfig', 'initialize', 'shutdown', 'submit',
    'BandwidthModel', 'DeviceKind', 'Home', 'MemoryBudget', 'MemoryPool', 'PlacementPlan', 'PoolConfig',
    'PooledLayerRunner', 'Timeline', 'budget_track', 'plan_placement', 'pooled_forward',
    'Command', 'ConsistencyQueue', 'LoopCounter', 'ResultHandle', 'StagePlan', 'StageWorker', 'TraceLog',
    'engine_submit', 'partition_layers', 'result_wait',
    'ShardedLayerParams', 'shard_params', 'tp_layer_forward',
]
