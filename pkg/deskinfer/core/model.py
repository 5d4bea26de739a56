#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Model module for deskinfer.
This module defines the transformer configuration, its deterministic
parameters, input batches, the checkpoint format and the serial reference
forward pass that every distributed path is checked against.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, DimensionError, ValidationError
from .tensor_math import (
    AttentionMask, MacCounter, Tensor, layer_norm, max_abs_diff, mlp_forward, multi_head_attention, tensor,
)

PAD_ID = 0
INIT_RANGE = 0.02
NORM_POSITIONS = ("pre", "post")

logger = logging.getLogger("model")


@dataclass(frozen=True)
class ModelConfig:
    """Transformer architecture description."""

    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 8
    vocab_size: int = 64
    max_seq: int = 32
    causal: bool = True
    seed: int = 0
    norm_position: str = "pre"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_heads", "head_dim", "vocab_size", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        # an empty layer stack is allowed: the model reduces to embedding + final norm
        if self.num_layers < 0:
            raise ConfigurationError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.norm_position not in NORM_POSITIONS:
            raise ConfigurationError(f"norm_position must be one of {NORM_POSITIONS}")
        if self.layer_norm_eps < 0:
            raise ConfigurationError("layer_norm_eps must be >= 0")

    @property
    def hidden(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def ffn_dim(self) -> int:
        return 4 * self.hidden

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class LayerParams:
    """Parameters of one transformer layer, in checkpoint declaration order."""

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
            yield f.name, getattr(self, f.name)

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for _, t in self.tensors())


@dataclass(frozen=True)
class ModelParams:
    """All parameters of a model."""

    config: ModelConfig
    embedding: Tensor
    position: Tensor
    layers: Tuple[LayerParams, ...]
    final_gamma: Tensor
    final_beta: Tensor

    def __post_init__(self):
        if len(self.layers) != self.config.num_layers:
            raise ConfigurationError(
                f"expected {self.config.num_layers} layers, got {len(self.layers)}")

    def tensors(self) -> Iterator[Tuple[str, Tensor]]:
        """Yield (name, tensor) pairs in checkpoint declaration order."""
        yield "embedding", self.embedding
        yield "position", self.position
        for i, layer in enumerate(self.layers):
            for name, t in layer.tensors():
                yield f"layers.{i}.{name}", t
        yield "final_gamma", self.final_gamma
        yield "final_beta", self.final_beta

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for _, t in self.tensors())

    def checksum(self) -> str:
        """SHA-256 over the raw parameter bytes."""
        digest = hashlib.sha256()
        for _, t in self.tensors():
            digest.update(np.ascontiguousarray(t, dtype='<f8').tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class Batch:
    """A padded batch of token sequences."""

    batch_id: int
    token_ids: np.ndarray
    seq_lens: Tuple[int, ...]

    def __post_init__(self):
        ids = np.array(self.token_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValidationError(f"token_ids must be [B, S_pad], got shape {ids.shape}")
        ids.setflags(write=False)
        object.__setattr__(self, 'token_ids', ids)
        object.__setattr__(self, 'seq_lens', tuple(int(n) for n in self.seq_lens))
        if len(self.seq_lens) != ids.shape[0]:
            raise ValidationError(f"{len(self.seq_lens)} lengths for batch of {ids.shape[0]}")
        for i, n in enumerate(self.seq_lens):
            if not 1 <= n <= ids.shape[1]:
                raise ValidationError(f"sequence {i} length {n} outside [1, {ids.shape[1]}]")
            if np.any(ids[i, n:] != PAD_ID):
                raise ValidationError(f"sequence {i} has non-pad tokens beyond its length {n}")

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def s_pad(self) -> int:
        return self.token_ids.shape[1]

    @property
    def valid_tokens(self) -> int:
        return sum(self.seq_lens)

    def validate(self, config: ModelConfig) -> None:
        """
        Check the batch against a model configuration.

        Raises:
            ValidationError: if S_pad exceeds max_seq or a token id is out of range
        """
        if self.s_pad > config.max_seq:
            raise ValidationError(f"padded length {self.s_pad} exceeds max_seq {config.max_seq}")
        if self.token_ids.min() < 0 or self.token_ids.max() >= config.vocab_size:
            raise ValidationError(f"token ids must lie in [0, {config.vocab_size})")


def make_batch(batch_id: int, sequences: Sequence[Sequence[int]], s_pad: Optional[int] = None) -> Batch:
    """
    Pad token sequences into a Batch.

    Args:
        batch_id: Unique batch id
        sequences: Token id lists, each non-empty
        s_pad: Padded length (default: longest sequence)

    Returns:
        Batch padded with PAD_ID
    """
    lens = [len(s) for s in sequences]
    s_pad = s_pad or max(lens)
    ids = np.full((len(sequences), s_pad), PAD_ID, dtype=np.int64)
    for i, seq in enumerate(sequences):
        if len(seq) > s_pad:
            raise ValidationError(f"sequence {i} of length {len(seq)} exceeds padded length {s_pad}")
        ids[i, :len(seq)] = seq
    return Batch(batch_id, ids, tuple(lens))


def random_batch(rng: np.random.Generator, config: ModelConfig, batch_size: int, s_pad: int,
                 seq_lens: Optional[Sequence[int]] = None, batch_id: int = 0) -> Batch:
    """Random valid batch; lengths are drawn uniformly from [1, s_pad] unless given."""
    if seq_lens is None:
        seq_lens = rng.integers(1, s_pad + 1, size=batch_size)
    sequences = [rng.integers(1, config.vocab_size, size=int(n)) if config.vocab_size > 1
                 else np.zeros(int(n), dtype=np.int64) for n in seq_lens]
    return make_batch(batch_id, sequences, s_pad)


def _uniform(seed: int, stream: int, shape: Tuple[int, ...]) -> Tensor:
    rng = np.random.default_rng([seed, stream])
    return tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape))


def build_layer(config: ModelConfig, index: int) -> LayerParams:
    """
    Build the parameters of one layer from the seed stream owned by that layer.

    Args:
        config: Model configuration
        index: Layer index in [0, num_layers)

    Returns:
        LayerParams identical to build_model(config).layers[index]
    """
    if not 0 <= index < config.num_layers:
        raise ConfigurationError(f"layer index {index} outside [0, {config.num_layers})")
    # streams 0/1 are the embeddings; each layer owns a block of 16
    base = 16 * (index + 1)
    values = {name: _uniform(config.seed, base + i, shape)
              for i, (name, shape) in enumerate(_layer_shapes(config)[:12])}
    ones, zeros = tensor(np.ones(config.hidden)), tensor(np.zeros(config.hidden))
    return LayerParams(ln1_gamma=ones, ln1_beta=zeros, ln2_gamma=ones, ln2_beta=zeros, **values)


def build_embeddings(config: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Token and position embeddings."""
    return (_uniform(config.seed, 0, (config.vocab_size, config.hidden)),
            _uniform(config.seed, 1, (config.max_seq, config.hidden)))


def build_final_norm(config: ModelConfig) -> Tuple[Tensor, Tensor]:
    return tensor(np.ones(config.hidden)), tensor(np.zeros(config.hidden))


def build_model(config: ModelConfig) -> ModelParams:
    """
    Build deterministic model parameters.

    Weights and biases are uniform in [-0.02, 0.02]; layer-norm gammas are 1
    and betas 0. The same config always yields bit-identical parameters.

    Args:
        config: Model configuration

    Returns:
        ModelParams
    """
    embedding, position = build_embeddings(config)
    gamma, beta = build_final_norm(config)
    layers = tuple(build_layer(config, i) for i in range(config.num_layers))
    logger.debug(f"Built model with {config.num_layers} layers, hidden {config.hidden}")
    return ModelParams(config, embedding, position, layers, gamma, beta)


def layer_param_count(config: ModelConfig) -> int:
    """Parameters in one layer: 12H^2 + 13H."""
    hidden = config.hidden
    return 12 * hidden * hidden + 13 * hidden


def param_count(config: ModelConfig) -> int:
    hidden = config.hidden
    return ((config.vocab_size + config.max_seq) * hidden
            + config.num_layers * layer_param_count(config) + 2 * hidden)


def layer_param_bytes(config: ModelConfig, bytes_per_param: int = 8) -> int:
    return layer_param_count(config) * bytes_per_param


def embed(embedding: Tensor, position: Tensor, token_ids: np.ndarray) -> Tensor:
    """
    Token embedding lookup plus learned absolute positions.

    Args:
        embedding: Tensor of shape [V, H]
        position: Tensor of shape [S_max, H]
        token_ids: Integer array of shape [B, S_pad]

    Returns:
        Tensor of shape [B, S_pad, H]
    """
    ids = np.asarray(token_ids)
    if ids.min() < 0 or ids.max() >= embedding.shape[0]:
        raise ValidationError(f"token ids must lie in [0, {embedding.shape[0]})")
    if ids.shape[1] > position.shape[0]:
        raise ValidationError(f"sequence length {ids.shape[1]} exceeds max_seq {position.shape[0]}")
    return tensor(embedding[ids] + position[:ids.shape[1]][None, :, :])


def compose_layer(x: Tensor, attn: Callable[[Tensor], Tensor], mlp: Callable[[Tensor], Tensor],
                  layer, eps: float, norm_position: str = "pre") -> Tensor:
    """
    Residual structure shared by the serial, tensor-parallel and packed layers.

    Args:
        x: Layer input
        attn: Attention module applied to its (normalized) input
        mlp: MLP module applied to its (normalized) input
        layer: Any object carrying ln1/ln2 gamma and beta
        eps: Layer-norm epsilon
        norm_position: "pre" normalizes module inputs, "post" normalizes residual sums

    Returns:
        Layer output with the shape of x
    """
    if norm_position == "pre":
        h = tensor(x + attn(layer_norm(x, layer.ln1_gamma, layer.ln1_beta, eps)))
        return tensor(h + mlp(layer_norm(h, layer.ln2_gamma, layer.ln2_beta, eps)))
    h = layer_norm(tensor(x + attn(x)), layer.ln1_gamma, layer.ln1_beta, eps)
    return layer_norm(tensor(h + mlp(h)), layer.ln2_gamma, layer.ln2_beta, eps)


def transformer_layer_forward(x: Tensor, layer: LayerParams, mask: AttentionMask, heads: int,
                              eps: float = 1e-5, norm_position: str = "pre",
                              macs: Optional[MacCounter] = None) -> Tensor:
    """
    One transformer layer: attention and MLP modules with residual connections.

    Args:
        x: Tensor of shape [B, S, H]
        layer: LayerParams
        mask: AttentionMask for the batch
        heads: Head count
        eps: Layer-norm epsilon
        norm_position: "pre" (default) or "post"
        macs: Optional linear-layer counter

    Returns:
        Tensor of shape [B, S, H]
    """
    if x.ndim != 3 or x.shape[-1] != layer.wq.shape[0]:
        raise DimensionError(f"layer input {x.shape} does not match hidden size {layer.wq.shape[0]}")

    def attn(h):
        return multi_head_attention(h, layer.wq, layer.bq, layer.wk, layer.bk, layer.wv, layer.bv,
                                    layer.wo, layer.bo, heads, mask, macs)

    def mlp(h):
        return mlp_forward(h, layer.w1, layer.b1, layer.w2, layer.b2, macs)

    return compose_layer(x, attn, mlp, layer, eps, norm_position)


def batch_mask(config: ModelConfig, batch: Batch) -> AttentionMask:
    """Causal (per config) and length-based mask for a padded batch."""
    return AttentionMask.for_batch(config.causal, batch.seq_lens)


def serial_forward(params: ModelParams, batch: Batch, macs: Optional[MacCounter] = None) -> Tensor:
    """
    Serial reference forward pass.

    Args:
        params: Model parameters
        batch: Input batch
        macs: Optional linear-layer counter

    Returns:
        Final hidden states of shape [B, S_pad, H]
    """
    config = params.config
    batch.validate(config)
    mask = batch_mask(config, batch)
    x = embed(params.embedding, params.position, batch.token_ids)
    for layer in params.layers:
        x = transformer_layer_forward(x, layer, mask, config.num_heads, config.layer_norm_eps,
                                      config.norm_position, macs)
    return layer_norm(x, params.final_gamma, params.final_beta, config.layer_norm_eps)


def valid_max_abs_diff(a: Tensor, b: Tensor, seq_lens: Sequence[int]) -> float:
    """Largest absolute difference of two [B, S_pad, H] outputs over valid positions only."""
    if a.shape != b.shape or a.ndim != 3 or len(seq_lens) != a.shape[0]:
        raise DimensionError(f"cannot compare shapes {a.shape} and {b.shape} over {len(seq_lens)} lengths")
    return max((max_abs_diff(a[i, :n], b[i, :n]) for i, n in enumerate(seq_lens)), default=0.0)


def save_checkpoint(params: ModelParams, path: str) -> None:
    """
    Write parameters as a JSON header line followed by little-endian float64 data.

    Args:
        params: Model parameters
        path: Destination file
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(json.dumps(params.config.to_dict(), sort_keys=True).encode('utf-8') + b"\n")
        for _, t in params.tensors():
            f.write(np.ascontiguousarray(t, dtype='<f8').tobytes())
    logger.info(f"Checkpoint written to {path} ({params.nbytes} bytes)")


def load_checkpoint(path: str) -> ModelParams:
    """
    Read a checkpoint written by save_checkpoint.

    Args:
        path: Checkpoint file

    Returns:
        ModelParams

    Raises:
        ConfigurationError: if the file is missing or its size disagrees with its header
    """
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint {path} does not exist")
    with open(path, 'rb') as f:
        header = f.readline()
        body = f.read()
    config = ModelConfig.from_dict(json.loads(header.decode('utf-8')))
    reference = _shapes(config)
    expected = sum(int(np.prod(shape)) for _, shape in reference) * 8
    if len(body) != expected:
        raise ConfigurationError(f"checkpoint {path} has {len(body)} data bytes, expected {expected}")
    values = np.frombuffer(body, dtype='<f8')
    offset, loaded = 0, {}
    for name, shape in reference:
        count = int(np.prod(shape))
        loaded[name] = tensor(values[offset:offset + count].astype(np.float64), shape)
        offset += count
    layers = tuple(
        LayerParams(**{f.name: loaded[f"layers.{i}.{f.name}"] for f in fields(LayerParams)})
        for i in range(config.num_layers))
    logger.info(f"Checkpoint loaded from {path}")
    return ModelParams(config, loaded["embedding"], loaded["position"], layers,
                       loaded["final_gamma"], loaded["final_beta"])


def _layer_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    hidden, ffn = config.hidden, config.ffn_dim
    return [
        ("wq", (hidden, hidden)), ("bq", (hidden,)), ("wk", (hidden, hidden)), ("bk", (hidden,)),
        ("wv", (hidden, hidden)), ("bv", (hidden,)), ("wo", (hidden, hidden)), ("bo", (hidden,)),
        ("w1", (hidden, ffn)), ("b1", (ffn,)), ("w2", (ffn, hidden)), ("b2", (hidden,)),
        ("ln1_gamma", (hidden,)), ("ln1_beta", (hidden,)), ("ln2_gamma", (hidden,)), ("ln2_beta", (hidden,)),
    ]


def _shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    hidden = config.hidden
    shapes = [("embedding", (config.vocab_size, hidden)), ("position", (config.max_seq, hidden))]
    for i in range(config.num_layers):
        shapes.extend((f"layers.{i}.{name}", shape) for name, shape in _layer_shapes(config))
    shapes.extend([("final_gamma", (hidden,)), ("final_beta", (hidden,))])
    return shapes
