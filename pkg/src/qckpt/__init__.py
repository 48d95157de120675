"""Quantized checkpoint compression.

Parameters are clustered per layer type on a relative-error histogram,
the cheapest configuration meeting a quality threshold is searched for,
and consecutive quantized checkpoints are stored as entropy-coded deltas.
"""
from .codec import Chain, Scheme, decode_delta_record, encode_delta_record
from .container import Checkpoint, LayerType, NamedTensor, make_checkpoint, read_checkpoint, write_checkpoint
from .kernels import BACKEND
from .quantizer import Metric, QuantConfig, QuantizedCheckpoint, approx_kmeans, dequantize, quantize_checkpoint
from .ranker import EmaState, ScoreSet, compute_scores, ema_update
from .search import (
    ConfigCube,
    ExternalEvaluator,
    ProxyEvaluator,
    SearchOutcome,
    delta_neighborhood_search,
    evaluate_config,
    guided_exhaustive_search,
)
from .sketch import Sketch, sketch_build, sketch_histogram, sketch_merge, sketch_quantile
from .trajectory import TrajectorySpec, generate

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Chain",
    "Checkpoint",
    "ConfigCube",
    "EmaState",
    "ExternalEvaluator",
    "LayerType",
    "Metric",
    "NamedTensor",
    "ProxyEvaluator",
    "QuantConfig",
    "QuantizedCheckpoint",
    "Scheme",
    "ScoreSet",
    "SearchOutcome",
    "Sketch",
    "TrajectorySpec",
    "approx_kmeans",
    "compute_scores",
    "decode_delta_record",
    "delta_neighborhood_search",
    "dequantize",
    "ema_update",
    "encode_delta_record",
    "evaluate_config",
    "generate",
    "guided_exhaustive_search",
    "make_checkpoint",
    "quantize_checkpoint",
    "read_checkpoint",
    "sketch_build",
    "sketch_histogram",
    "sketch_merge",
    "sketch_quantile",
    "write_checkpoint",
]
