"""Domain-conditioned transformers for fully test-time adaptation, at desk scale.

A small numpy ViT whose self-attention takes per-layer domain conditioners
generated from the class token, plus the reliable-entropy / sharpness-aware
adaptation loop, synthetic corruption streams and attention analyses.
"""
from .adaptation import AdaptConfig, PretrainConfig, adapt_stream, pretrain
from .data import CorruptionSpec, StreamProtocol, gen_synthetic_dataset, make_stream
from .model import ModelConfig, init_params, model_forward, predict

__all__ = ["AdaptConfig", "PretrainConfig", "adapt_stream", "pretrain", "CorruptionSpec", "StreamProtocol",
           "gen_synthetic_dataset", "make_stream", "ModelConfig", "init_params", "model_forward", "predict"]
__version__ = "0.1.0"
