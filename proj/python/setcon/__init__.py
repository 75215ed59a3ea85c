"""Set Contrastive object-centric video learning."""

from ._core import (
    ArgumentError,
    ConfigError,
    DimensionError,
    FormatError,
    NumericError,
    adjusted_rand_index,
    bouncing_balls_sequence,
    evaluate,
    gradient_gate,
    gridworld_sequence,
    gridworld_state_count,
    palette,
    resolve_lr,
    rollout_mse,
    setcon_loss,
    slotwise_loss,
    train,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "adjusted_rand_index",
    "bouncing_balls_sequence",
    "evaluate",
    "gradient_gate",
    "gridworld_sequence",
    "gridworld_state_count",
    "palette",
    "resolve_lr",
    "rollout_mse",
    "setcon_loss",
    "slotwise_loss",
    "train",
]
