#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Redundant computation elimination for padded batches.
Valid tokens of all sequences are packed into one [T, H] matrix so that every
linear layer skips padding; only the attention score computation runs on the
padded layout. Sequence lengths come from the engine's command, so tensor
parallel ranks pack and unpack locally without extra communication.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..core.model import Batch, LayerParams, ModelParams, compose_layer, embed
from ..core.tensor_math import (
    AttentionMask, MacCounter, Tensor, attention_context, layer_norm, linear, mlp_forward, tensor,
)
from ..errors import DimensionError
from .comm import GlobalContext, all_reduce_sum
from .tensor_parallel import ShardedLayerParams, tp_mlp_forward


@dataclass(frozen=True)
class PackedActivations:
    """Valid rows of a padded batch, concatenated sequence by sequence."""

    packed: Tensor
    offsets: Tuple[int, ...]
    s_pad: int

    def __post_init__(self):
        offsets = tuple(int(o) for o in self.offsets)
        object.__setattr__(self, 'offsets', offsets)
        if len(offsets) < 2 or offsets[0] != 0:
            raise DimensionError(f"offsets must start at 0 and cover at least one sequence: {offsets}")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise DimensionError(f"offsets must be strictly increasing: {offsets}")
        if offsets[-1] != self.packed.shape[0]:
            raise DimensionError(f"offsets end at {offsets[-1]} but {self.packed.shape[0]} rows are packed")
        if any(b - a > self.s_pad for a, b in zip(offsets, offsets[1:])):
            raise DimensionError(f"a sequence is longer than the padded length {self.s_pad}")

    @property
    def seq_lens(self) -> Tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.offsets, self.offsets[1:]))

    @property
    def batch_size(self) -> int:
        return len(self.offsets) - 1

    @property
    def tokens(self) -> int:
        return self.offsets[-1]

    def with_rows(self, rows: Tensor) -> 'PackedActivations':
        return PackedActivations(rows, self.offsets, self.s_pad)

    @classmethod
    def from_rows(cls, rows: Tensor, seq_lens: Sequence[int], s_pad: int) -> 'PackedActivations':
        """Rebuild packed activations from rows plus command metadata."""
        return cls(rows, tuple(np.concatenate([[0], np.cumsum(seq_lens)]).tolist()), s_pad)


def pack(x: Tensor, seq_lens: Sequence[int]) -> PackedActivations:
    """
    Remove padding rows.

    Args:
        x: Tensor of shape [B, S_pad, H]
        seq_lens: Valid length of each sequence

    Returns:
        PackedActivations holding sum(seq_lens) rows
    """
    if x.ndim != 3 or len(seq_lens) != x.shape[0]:
        raise DimensionError(f"cannot pack {x.shape} with {len(seq_lens)} lengths")
    s_pad = x.shape[1]
    if any(not 1 <= n <= s_pad for n in seq_lens):
        raise DimensionError(f"lengths {tuple(seq_lens)} overflow padded length {s_pad}")
    rows = np.concatenate([x[b, :n] for b, n in enumerate(seq_lens)], axis=0)
    return PackedActivations.from_rows(tensor(rows), seq_lens, s_pad)


def unpack(p: PackedActivations) -> Tensor:
    """Restore the padded layout; padding rows are exactly zero."""
    out = np.zeros((p.batch_size, p.s_pad, p.packed.shape[-1]))
    for b, (start, end) in enumerate(zip(p.offsets, p.offsets[1:])):
        out[b, :end - start] = p.packed[start:end]
    return tensor(out)


def _packed_attention(p: PackedActivations, layer: Union[LayerParams, ShardedLayerParams],
                      heads: int, mask: AttentionMask, macs: Optional[MacCounter]) -> Tensor:
    q = unpack(p.with_rows(linear(p.packed, layer.wq, layer.bq, macs)))
    k = unpack(p.with_rows(linear(p.packed, layer.wk, layer.bk, macs)))
    v = unpack(p.with_rows(linear(p.packed, layer.wv, layer.bv, macs)))
    return pack(attention_context(q, k, v, heads, mask), p.seq_lens).packed


def drce_layer_forward(x: Union[Tensor, PackedActivations], layer: Union[LayerParams, ShardedLayerParams],
                       seq_lens: Sequence[int], heads: int, causal: bool = True,
                       ctx: Optional[GlobalContext] = None, eps: float = 1e-5,
                       norm_position: str = "pre",
                       macs: Optional[MacCounter] = None) -> Union[Tensor, PackedActivations]:
    """
    Transformer layer computed on packed rows.

    Layer norms, residuals and every linear run on the T valid rows; attention
    scores run on the padded layout with length-based masking.

    Args:
        x: Padded [B, S_pad, H] tensor or PackedActivations
        layer: Full LayerParams, or a ShardedLayerParams together with ctx
        seq_lens: Valid lengths from the command
        heads: Heads in the full layer
        causal: Whether the model is a decoder
        ctx: Tensor-parallel context when layer is a shard
        eps: Layer-norm epsilon
        norm_position: "pre" or "post"
        macs: Optional linear-layer counter

    Returns:
        Output in the same representation as x; padded output has zero padding rows
    """
    padded_input = not isinstance(x, PackedActivations)
    p = pack(x, seq_lens) if padded_input else x
    if p.seq_lens != tuple(seq_lens):
        raise DimensionError(f"packed lengths {p.seq_lens} disagree with command lengths {tuple(seq_lens)}")
    mask = AttentionMask.for_batch(causal, seq_lens)
    sharded = isinstance(layer, ShardedLayerParams)
    local_heads = layer.heads if sharded else heads

    def attn(rows):
        context = _packed_attention(p.with_rows(rows), layer, local_heads, mask, macs)
        if not sharded:
            return linear(context, layer.wo, layer.bo, macs)
        return tensor(all_reduce_sum(ctx, linear(context, layer.wo, None, macs)) + layer.bo)

    def mlp(rows):
        if sharded:
            return tp_mlp_forward(ctx, rows, layer, macs)
        return mlp_forward(rows, layer.w1, layer.b1, layer.w2, layer.b2, macs)

    out = p.with_rows(compose_layer(p.packed, attn, mlp, layer, eps, norm_position))
    return unpack(out) if padded_input else out


def drce_savings(batch_size: int, s_pad: int, seq_lens: Sequence[int]) -> float:
    """Fraction of padded tokens that are valid: sum(seq_lens) / (B * S_pad)."""
    if len(seq_lens) != batch_size or any(not 1 <= n <= s_pad for n in seq_lens):
        raise DimensionError(f"lengths {tuple(seq_lens)} invalid for B={batch_size}, S_pad={s_pad}")
    return sum(seq_lens) / (batch_size * s_pad)


def drce_forward(params: ModelParams, batch: Batch, macs: Optional[MacCounter] = None) -> Tensor:
    """Whole-model forward with padding removed; padding rows of the result are zero."""
    config = params.config
    batch.validate(config)
    p = pack(embed(params.embedding, params.position, batch.token_ids), batch.seq_lens)
    for layer in params.layers:
        p = drce_layer_forward(p, layer, batch.seq_lens, config.num_heads, config.causal,
                               eps=config.layer_norm_eps, norm_position=config.norm_position, macs=macs)
    return unpack(p.with_rows(layer_norm(p.packed, params.final_gamma, params.final_beta,
                                         config.layer_norm_eps)))
