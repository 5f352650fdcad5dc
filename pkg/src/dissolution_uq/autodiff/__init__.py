"""Differentiation engines: a general array tape and a batched MLP jet."""

from .jet import DualBatch, mlp_jet, mlp_jet_vjp, unpack_layers
from .tape import Tape, Var

__all__ = ["DualBatch", "Tape", "Var", "mlp_jet", "mlp_jet_vjp", "unpack_layers"]
