#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Exception hierarchy for the deskinfer runtime.
"""

from typing import Any, Optional


class DeskInferError(Exception):
    """Base class for all deskinfer errors."""


class DimensionError(DeskInferError):
    """Raised when tensor shapes do not agree."""


class NumericalError(DeskInferError):
    """Raised when a tensor holds NaN or Inf."""


class ConfigurationError(DeskInferError):
    """Raised for invalid model, runtime, sharding or placement settings."""


class ValidationError(DeskInferError):
    """Raised when a batch does not satisfy the model's input contract."""


class ProtocolError(DeskInferError):
    """Raised when a communication or queue protocol is violated."""


class DeliveryError(DeskInferError):
    """Raised when a control message cannot reach a worker."""

    def __init__(self, worker_id: int, message: str = ""):
        self.worker_id = worker_id
        super().__init__(message or f"control delivery to worker {worker_id} failed")


class CapacityError(DeskInferError):
    """Raised when a memory budget would be exceeded."""

    def __init__(self, device_id: Any, layer: Optional[int], message: str = ""):
        self.device_id = device_id
        self.layer = layer
        super().__init__(message or f"device {device_id} over capacity loading layer {layer}")


class WorkerInitError(DeskInferError):
    """Raised when a worker fails to initialize."""

    def __init__(self, worker_id: int, message: str = ""):
        self.worker_id = worker_id
        super().__init__(message or f"worker {worker_id} failed to initialize")


class StageFailure(DeskInferError):
    """Raised from a result handle whose batch failed inside a pipeline stage."""

    def __init__(self, key: int, stage: int, message: str = ""):
        self.key = key
        self.stage = stage
        super().__init__(f"key {key} failed in stage {stage}" + (f": {message}" if message else ""))


class CorrectnessError(DeskInferError):
    """Raised when a benchmark grid point disagrees with the serial oracle."""

    def __init__(self, grid_point: str, max_abs_diff: float):
        self.grid_point = grid_point
        self.max_abs_diff = max_abs_diff
        super().__init__(f"grid point {grid_point} differs from serial oracle by {max_abs_diff:.3e}")


class RuntimeShutdownError(DeskInferError):
    """Raised when work is submitted to a runtime that is shut down."""
