#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tensor math module for deskinfer.
This module provides the dense kernels of a transformer forward pass on
float64 numpy arrays. Every function is pure and deterministic: reductions
run in a fixed order so that distributed reassembly can be compared with the
serial result at tight tolerance.
"""

import enum
import math
import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ..errors import DimensionError, NumericalError

# The universal value type. Arrays handed out by this module are float64 and
# read-only.
Tensor = np.ndarray

GELU_COEFF = 0.7978845608
GELU_CUBIC = 0.044715


def tensor(data, shape: Optional[Sequence[int]] = None) -> Tensor:
    """
    Build an immutable float64 tensor.

    Args:
        data: Nested sequence, flat sequence or array
        shape: Optional shape for flat row-major data

    Returns:
        Read-only float64 array
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise DimensionError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if any(dim < 1 for dim in arr.shape):
        raise DimensionError(f"tensor dimensions must be >= 1, got {arr.shape}")
    return _frozen(arr)


def _frozen(arr: np.ndarray) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value in tensor of shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class MacCounter:
    """Thread-safe tally of multiply-accumulates performed by linear layers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def add(self, count: int) -> None:
        with self._lock:
            self._value += int(count)

    @property
    def value(self) -> int:
        with self._lock:
            return self._value

    def reset(self) -> None:
        with self._lock:
            self._value = 0


class MaskKind(enum.Enum):
    NONE = "none"
    CAUSAL = "causal"
    LENGTH_BASED = "length_based"
    CAUSAL_LENGTH_BASED = "causal_length_based"


@dataclass(frozen=True)
class AttentionMask:
    """Which key positions each query may attend to."""

    kind: MaskKind = MaskKind.NONE
    valid_lengths: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind in (MaskKind.LENGTH_BASED, MaskKind.CAUSAL_LENGTH_BASED):
            if not self.valid_lengths:
                raise DimensionError(f"{self.kind.value} mask requires valid_lengths")
            if any(int(n) < 1 for n in self.valid_lengths):
                raise DimensionError(f"valid lengths must be >= 1, got {self.valid_lengths}")
            object.__setattr__(self, 'valid_lengths', tuple(int(n) for n in self.valid_lengths))

    @property
    def is_causal(self) -> bool:
        return self.kind in (MaskKind.CAUSAL, MaskKind.CAUSAL_LENGTH_BASED)

    @property
    def is_length_based(self) -> bool:
        return self.kind in (MaskKind.LENGTH_BASED, MaskKind.CAUSAL_LENGTH_BASED)

    @classmethod
    def for_batch(cls, causal: bool, seq_lens: Optional[Sequence[int]]) -> 'AttentionMask':
        """
        Build the mask used for a padded batch.

        Args:
            causal: Whether the model is a decoder
            seq_lens: Per-sequence valid lengths, or None for unpadded input

        Returns:
            AttentionMask combining causal and length-based masking as needed
        """
        if seq_lens is None:
            return cls(MaskKind.CAUSAL if causal else MaskKind.NONE)
        kind = MaskKind.CAUSAL_LENGTH_BASED if causal else MaskKind.LENGTH_BASED
        return cls(kind, tuple(seq_lens))

    def allowed(self, batch: int, seq: int) -> np.ndarray:
        """Boolean [batch, 1, seq, seq] matrix of attendable (query, key) pairs."""
        allowed = np.ones((batch, 1, seq, seq), dtype=bool)
        if self.is_causal:
            allowed &= np.tril(np.ones((seq, seq), dtype=bool))[None, None, :, :]
        if self.is_length_based:
            if len(self.valid_lengths) != batch:
                raise DimensionError(
                    f"mask has {len(self.valid_lengths)} lengths for batch of {batch}")
            if max(self.valid_lengths) > seq:
                raise DimensionError(
                    f"valid lengths {self.valid_lengths} exceed sequence length {seq}")
            key_pos = np.arange(seq)
            lens = np.array(self.valid_lengths)
            allowed &= (key_pos[None, :] < lens[:, None])[:, None, None, :]
        return allowed


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product with a fixed left-to-right summation order over k.

    Each output row depends only on the matching input row, so results do not
    change when rows are added, removed or reordered.

    Args:
        a: Tensor of shape [m, k]
        b: Tensor of shape [k, n]

    Returns:
        Tensor of shape [m, n]
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = a[:, 0:1] * b[0:1, :]
    step = np.empty_like(out)
    for i in range(1, a.shape[1]):
        np.multiply(a[:, i:i + 1], b[i:i + 1, :], out=step)
        np.add(out, step, out=out)
    return _frozen(out)


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           macs: Optional[MacCounter] = None) -> Tensor:
    """
    Apply x @ w (+ bias) over the last dimension of x.

    Args:
        x: Tensor of shape [..., k]
        w: Tensor of shape [k, n]
        bias: Optional tensor of shape [n]
        macs: Optional counter incremented by rows * k * n

    Returns:
        Tensor of shape [..., n]
    """
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear input {x.shape} does not match weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise DimensionError(f"bias {bias.shape} does not match weight {w.shape}")
    rows = int(np.prod(x.shape[:-1]))
    out = np.array(matmul(x.reshape(rows, x.shape[-1]), w))
    if bias is not None:
        out += bias
    if macs is not None:
        macs.add(rows * w.shape[0] * w.shape[1])
    return _frozen(out.reshape(x.shape[:-1] + (w.shape[1],)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize each row of the last dimension to mean 0 and variance 1, then
    scale by gamma and shift by beta.

    Args:
        x: Tensor of shape [..., H]
        gamma: Scale of shape [H]
        beta: Shift of shape [H]
        eps: Variance floor

    Returns:
        Tensor with the shape of x
    """
    hidden = x.shape[-1]
    if gamma.shape != (hidden,) or beta.shape != (hidden,):
        raise DimensionError(
            f"layer_norm width {hidden} does not match gamma {gamma.shape} / beta {beta.shape}")
    centered = x - np.mean(x, axis=-1, keepdims=True)
    denom = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    # a constant row with eps=0 is 0/0; its centered values are all zero
    normed = np.divide(centered, denom, out=np.zeros_like(centered), where=denom > 0)
    return _frozen(normed * gamma + beta)


def masked_softmax(scores: Tensor, mask: AttentionMask) -> Tensor:
    """
    Softmax over the last axis restricted to unmasked positions.

    Masked entries are exactly 0 and every row sums to 1 over the unmasked
    entries. Rows are stabilized by subtracting their unmasked maximum.

    Args:
        scores: Tensor of shape [B, h, S, S]
        mask: AttentionMask for the batch

    Returns:
        Tensor of shape [B, h, S, S]
    """
    if scores.ndim != 4 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"scores must be [B, h, S, S], got {scores.shape}")
    batch, _, seq, _ = scores.shape
    allowed = np.broadcast_to(mask.allowed(batch, seq), scores.shape)
    masked = np.where(allowed, scores, -np.inf)
    row_max = np.max(masked, axis=-1, keepdims=True)
    exps = np.where(allowed, np.exp(np.where(allowed, scores - row_max, 0.0)), 0.0)
    return _frozen(exps / np.sum(exps, axis=-1, keepdims=True))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = np.asarray(x, dtype=np.float64)
    return _frozen(0.5 * x * (1.0 + np.tanh(GELU_COEFF * (x + GELU_CUBIC * x * x * x))))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, S, heads*d] -> [B, heads, S, d]"""
    batch, seq, width = x.shape
    if width % heads:
        raise DimensionError(f"width {width} is not divisible by {heads} heads")
    return x.reshape(batch, seq, heads, width // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    """[B, heads, S, d] -> [B, S, heads*d]"""
    batch, heads, seq, dim = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(batch, seq, heads * dim)


def attention_context(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: AttentionMask) -> Tensor:
    """
    Scaled dot-product attention over projected queries, keys and values.

    Args:
        q, k, v: Tensors of shape [B, S, heads*d]
        heads: Number of heads held in q/k/v
        mask: AttentionMask for the batch

    Returns:
        Concatenated per-head context of shape [B, S, heads*d]
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    probs = masked_softmax(scores, mask)
    return _frozen(merge_heads(np.matmul(probs, vh)))


def multi_head_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                         wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                         heads: int, mask: AttentionMask,
                         macs: Optional[MacCounter] = None) -> Tensor:
    """
    Multi-head self-attention with output projection.

    Args:
        x: Tensor of shape [B, S, H]
        wq, wk, wv, wo: Projection weights of shape [H, H]
        bq, bk, bv, bo: Projection biases of shape [H]
        heads: Head count; H must be divisible by it
        mask: AttentionMask for the batch
        macs: Optional linear-layer counter

    Returns:
        Tensor of shape [B, S, H]
    """
    if x.ndim != 3:
        raise DimensionError(f"attention input must be [B, S, H], got {x.shape}")
    if x.shape[-1] % heads:
        raise DimensionError(f"hidden size {x.shape[-1]} is not divisible by {heads} heads")
    q = linear(x, wq, bq, macs)
    k = linear(x, wk, bk, macs)
    v = linear(x, wv, bv, macs)
    return linear(attention_context(q, k, v, heads, mask), wo, bo, macs)


def mlp_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                macs: Optional[MacCounter] = None) -> Tensor:
    """
    Two-layer feed-forward block: linear -> GELU -> linear.

    Args:
        x: Tensor of shape [..., H]
        w1: Tensor of shape [H, 4H]; b1 of shape [4H]
        w2: Tensor of shape [4H, H]; b2 of shape [H]
        macs: Optional linear-layer counter

    Returns:
        Tensor with the shape of x
    """
    if w1.shape[1] != w2.shape[0] or w1.shape[0] != w2.shape[1]:
        raise DimensionError(f"mlp weights {w1.shape} and {w2.shape} are inconsistent")
    return linear(gelu(linear(x, w1, b1, macs)), w2, b2, macs)


def max_abs_diff(a: Tensor, b: Tensor) -> float:
    """Largest elementwise absolute difference of two equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare shapes {a.shape} and {b.shape}")
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if a.size else 0.0
