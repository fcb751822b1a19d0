"""Bit-accurate functional and performance simulator of an integer attention accelerator."""

from .attention import (
    AttentionOutput,
    HeadWeights,
    WeightSet,
    attention_head,
    float_golden_attention,
    multi_head_attention,
    tiled_matmul,
)
from .config import AcceleratorConfig, AttentionDims
from .perf import (
    PerfReport,
    bandwidth_output_stationary,
    bandwidth_weight_stationary,
    build_schedule,
    simulate_perf,
    weight_buffer_size,
)
from .quant import AccumMatrix, QuantizedMatrix, RequantParams, dequantize, quantize, requantize
from .softmax import SoftmaxConstants, SoftmaxState, streaming_softmax

__version__ = "0.1.0"
