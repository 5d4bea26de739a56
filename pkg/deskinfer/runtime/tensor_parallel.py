#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tensor parallel module for deskinfer.
This module shards transformer layers 1-D style: the first linear of each
module pair is split by columns, the second by rows, and the partial outputs
are summed with one all-reduce per module.
"""

from dataclasses import dataclass, fields
from typing import Iterator, List, Optional, Tuple

import numpy as np

from ..core.model import LayerParams, compose_layer
from ..core.tensor_math import (
    AttentionMask, MacCounter, Tensor, attention_context, gelu, linear, tensor,
)
from ..errors import ConfigurationError
from .comm import GlobalContext, all_reduce_sum


@dataclass(frozen=True)
class ShardedLayerParams:
    """One tensor-parallel rank's slice of a layer."""

    tp_rank: int
    tp_size: int
    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def tensors(self) -> Iterator[Tuple[str, Tensor]]:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                yield f.name, value

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for _, t in self.tensors())


def _columns(t: Tensor, rank: int, size: int) -> Tensor:
    width = t.shape[-1] // size
    return tensor(t[..., rank * width:(rank + 1) * width])


def _rows(t: Tensor, rank: int, size: int) -> Tensor:
    height = t.shape[0] // size
    return tensor(t[rank * height:(rank + 1) * height])


def shard_params(layer: LayerParams, tp_size: int, num_heads: int) -> List[ShardedLayerParams]:
    """
    Split a layer into tp_size shards.

    q/k/v weights and biases and the first MLP linear are split by output
    columns (q/k/v by whole heads); the output projection and second MLP
    linear are split by input rows. Second-linear biases and layer norms are
    replicated.

    Args:
        layer: Full layer parameters
        tp_size: Number of shards
        num_heads: Attention heads in the layer

    Returns:
        One ShardedLayerParams per tp rank

    Raises:
        ConfigurationError: if heads or the MLP width are not divisible by tp_size
    """
    if tp_size < 1:
        raise ConfigurationError(f"tp_size must be >= 1, got {tp_size}")
    if num_heads % tp_size:
        raise ConfigurationError(f"{num_heads} heads cannot be split across {tp_size} ranks")
    if layer.w1.shape[1] % tp_size:
        raise ConfigurationError(f"MLP width {layer.w1.shape[1]} cannot be split across {tp_size} ranks")
    shards = []
    for rank in range(tp_size):
        shards.append(ShardedLayerParams(
            tp_rank=rank, tp_size=tp_size, heads=num_heads // tp_size,
            wq=_columns(layer.wq, rank, tp_size), bq=_columns(layer.bq, rank, tp_size),
            wk=_columns(layer.wk, rank, tp_size), bk=_columns(layer.bk, rank, tp_size),
            wv=_columns(layer.wv, rank, tp_size), bv=_columns(layer.bv, rank, tp_size),
            wo=_rows(layer.wo, rank, tp_size), bo=layer.bo,
            w1=_columns(layer.w1, rank, tp_size), b1=_columns(layer.b1, rank, tp_size),
            w2=_rows(layer.w2, rank, tp_size), b2=layer.b2,
            ln1_gamma=layer.ln1_gamma, ln1_beta=layer.ln1_beta,
            ln2_gamma=layer.ln2_gamma, ln2_beta=layer.ln2_beta,
        ))
    return shards


def tp_mlp_forward(ctx: GlobalContext, x_full: Tensor, shard: ShardedLayerParams,
                   macs: Optional[MacCounter] = None) -> Tensor:
    """
    Sharded MLP: column linear -> GELU -> row linear -> all-reduce -> bias.

    Every rank of the tp group must call collectively with identical input.
    """
    partial = linear(gelu(linear(x_full, shard.w1, shard.b1, macs)), shard.w2, None, macs)
    return tensor(all_reduce_sum(ctx, partial) + shard.b2)


def tp_attention_forward(ctx: GlobalContext, x_full: Tensor, shard: ShardedLayerParams,
                         mask: AttentionMask, macs: Optional[MacCounter] = None) -> Tensor:
    """
    Sharded attention over this rank's heads, followed by the row-split output
    projection, one all-reduce and the output bias.
    """
    q = linear(x_full, shard.wq, shard.bq, macs)
    k = linear(x_full, shard.wk, shard.bk, macs)
    v = linear(x_full, shard.wv, shard.bv, macs)
    partial = linear(attention_context(q, k, v, shard.heads, mask), shard.wo, None, macs)
    return tensor(all_reduce_sum(ctx, partial) + shard.bo)


def tp_layer_forward(ctx: GlobalContext, x: Tensor, shard: ShardedLayerParams, mask: AttentionMask,
                     eps: float = 1e-5, norm_position: str = "pre",
                     macs: Optional[MacCounter] = None) -> Tensor:
    """
    Tensor-parallel transformer layer; performs exactly two all-reduces.

    Args:
        ctx: Calling rank's context
        x: Replicated layer input [B, S, H]
        shard: This rank's ShardedLayerParams
        mask: AttentionMask for the batch
        eps: Layer-norm epsilon
        norm_position: "pre" or "post"
        macs: Optional linear-layer counter

    Returns:
        Replicated layer output [B, S, H]
    """
    return compose_layer(
        x,
        lambda h: tp_attention_forward(ctx, h, shard, mask, macs),
        lambda h: tp_mlp_forward(ctx, h, shard, macs),
        shard, eps, norm_position)
