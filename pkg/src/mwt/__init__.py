"""Multiway Transformer with masked data modeling, at desk scale."""
from .multiway import MultiwayConfig, MultiwayModel, count_params, encode, init_model
from .tensorcore import Tensor, Tape, apply, backward, grad_check

__version__ = "0.1.0"

__all__ = ["MultiwayConfig", "MultiwayModel", "Tensor", "Tape", "apply", "backward",
           "count_params", "encode", "grad_check", "init_model"]
