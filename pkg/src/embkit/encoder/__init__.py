from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint, save_model
from .model import (
    ConfigError,
    EncoderConfig,
    EncoderModel,
    LengthError,
    encode_dense,
    encode_sparse,
    encode_texts,
    sparse_weights,
)
from .retromae import (
    DECODER_MASK,
    ENCODER_MASK,
    MaskedSequence,
    MaskSpec,
    RetroMaeDecoder,
    apply_mask,
    retromae_batch,
    retromae_forward,
)
from .vocab import SPECIAL_TOKENS, TokenBatch, Vocab, pad_batch, tokenize, tokenize_batch

__all__ = [
    "CheckpointError", "ConfigError", "DECODER_MASK", "ENCODER_MASK", "EncoderConfig", "EncoderModel",
    "LengthError", "MaskSpec", "MaskedSequence", "RetroMaeDecoder", "SPECIAL_TOKENS", "TokenBatch", "Vocab",
    "apply_mask", "encode_dense", "encode_sparse", "encode_texts", "load_checkpoint", "load_model",
    "pad_batch", "retromae_batch", "retromae_forward", "save_checkpoint", "save_model", "sparse_weights",
    "tokenize", "tokenize_batch",
]
