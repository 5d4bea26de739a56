"""
deskinfer: a desk-scale distributed transformer inference runtime.

The runtime combines tensor parallelism, non-blocking pipeline parallelism,
padding elimination and a peer memory pool behind a serial-looking API.
"""

__version__ = "0.1.0"

from .core import Batch, ModelConfig, build_model, make_batch, serial_forward
from .runtime import Runtime, RuntimeConfig, initialize

__all__ = ['Batch', 'ModelConfig', 'Runtime', 'RuntimeConfig', 'build_model', 'initialize', 'make_batch',
           'serial_forward']
