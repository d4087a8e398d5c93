"""Activation-compressed training on numpy.

Layers save their backward contexts as per-group, stochastically rounded
codes with per-sample bit widths chosen by a greedy allocator.
"""

from .allocator import AllocProblem, BitAllocation, GradMagEstimator, dp_allocate_exact, greedy_allocate
from .autograd import CrossEntropyLoss, GraphExecutor, LayerPolicy, MSELoss, accuracy
from .layers import AvgPool2d, BatchNorm, Conv2d, Flatten, Linear, MaxPool2d, ReLU, SensitivityStats
from .quantize import PackedActivation, dequantize_tensor, quantize_tensor

__version__ = "0.1.0"

__all__ = [
    "AllocProblem", "BitAllocation", "GradMagEstimator", "dp_allocate_exact", "greedy_allocate",
    "CrossEntropyLoss", "GraphExecutor", "LayerPolicy", "MSELoss", "accuracy",
    "AvgPool2d", "BatchNorm", "Conv2d", "Flatten", "Linear", "MaxPool2d", "ReLU", "SensitivityStats",
    "PackedActivation", "dequantize_tensor", "quantize_tensor",
]
