from .estimator import PROFILES, DAWTransformerClassifier
from .model import (
    Batch,
    TransformerConfig,
    attention,
    embed_sequence,
    encoder_block,
    forward,
    init_params,
    layer_norm,
    loss_and_grads,
    multi_head_attention,
    positional_encoding,
)
from .training import (
    EarlyStopping,
    ManifestMismatchError,
    TrainConfig,
    TrainState,
    adam_step,
    fit_arrays,
    predict_next,
    train,
)

__all__ = [
    "PROFILES",
    "Batch",
    "DAWTransformerClassifier",
    "EarlyStopping",
    "ManifestMismatchError",
    "TrainConfig",
    "TrainState",
    "TransformerConfig",
    "adam_step",
    "attention",
    "embed_sequence",
    "encoder_block",
    "fit_arrays",
    "forward",
    "init_params",
    "layer_norm",
    "loss_and_grads",
    "multi_head_attention",
    "positional_encoding",
    "predict_next",
    "train",
]
