from .encoder import EncoderParams, encoder_apply, encoder_backward, encoder_forward, init_encoder
from .mlp import (
    MlpParams,
    init_mlp,
    mlp_apply,
    mlp_backward,
    mlp_forward,
    mlp_vjp,
    time_embedding,
)
from .optim import AdamState, TrainConfig, learning_rate, lr_factors, train_step

__all__ = [
    "AdamState",
    "EncoderParams",
    "MlpParams",
    "TrainConfig",
    "encoder_apply",
    "encoder_backward",
    "encoder_forward",
    "init_encoder",
    "init_mlp",
    "learning_rate",
    "lr_factors",
    "mlp_apply",
    "mlp_backward",
    "mlp_forward",
    "mlp_vjp",
    "time_embedding",
    "train_step",
]
