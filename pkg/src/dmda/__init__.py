"""Desk-scale lab for discriminative micro-level distribution alignment."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, grad_check  # noqa: F401
