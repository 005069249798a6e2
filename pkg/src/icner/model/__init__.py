from .config import ModelConfig
from .params import ModelParams, grads_flatten
from .network import (
    EncoderFeatures,
    encode,
    encoder_fwd,
    encoder_bwd,
    decoder_fwd,
    decoder_bwd,
    extract_meta_features,
    meta_feature_rows,
    sequence_nll,
    sequence_nll_grad,
    generate,
    check_feature_alignment,
)
from .checkpoint import save_checkpoint, load_checkpoint, FORMAT_VERSION

__all__ = [
    "ModelConfig",
    "ModelParams",
    "grads_flatten",
    "EncoderFeatures",
    "encode",
    "encoder_fwd",
    "encoder_bwd",
    "decoder_fwd",
    "decoder_bwd",
    "extract_meta_features",
    "meta_feature_rows",
    "sequence_nll",
    "sequence_nll_grad",
    "generate",
    "check_feature_alignment",
    "save_checkpoint",
    "load_checkpoint",
    "FORMAT_VERSION",
]
