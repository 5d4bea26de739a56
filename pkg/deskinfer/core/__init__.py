"""
Core package for deskinfer.
This package contains the tensor kernels and the serial reference model.
"""

from .tensor_math import (
    AttentionMask, MacCounter, MaskKind, Tensor, attention_context, gelu, layer_norm, linear,
    masked_softmax, matmul, max_abs_diff, mlp_forward, multi_head_attention, tensor,
)
from .model import (
    Batch, LayerParams, ModelConfig, ModelParams, build_layer, build_model, embed, load_checkpoint,
    make_batch, random_batch, save_checkpoint, serial_forward, transformer_layer_forward, valid_max_abs_diff,
)

__all__ = [
    'AttentionMask', 'MacCounter', 'MaskKind', 'Tensor', 'attention_context', 'gelu', 'layer_norm',
    'linear', 'masked_softmax', 'matmul', 'max_abs_diff', 'mlp_forward', 'multi_head_attention', 'tensor',
    'Batch', 'LayerParams', 'ModelConfig', 'ModelParams', 'build_layer', 'build_model', 'embed',
    'load_checkpoint', 'make_batch', 'random_batch', 'save_checkpoint', 'serial_forward',
    'transformer_layer_forward', 'valid_max_abs_diff',
]
