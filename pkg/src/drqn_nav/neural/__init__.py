from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (conv2d, conv2d_backward, dueling_combine, fully_connected, lstm_cell, orthogonal_init)
from .network import ArchConfig, backward, check_params, copy_params, forward, init_params, zero_state
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "ArchConfig", "CheckpointError", "adam_step", "backward", "check_params", "conv2d",
    "conv2d_backward", "copy_params", "dueling_combine", "forward", "fully_connected", "init_params",
    "load_checkpoint", "lstm_cell", "orthogonal_init", "save_checkpoint", "zero_state",
]
