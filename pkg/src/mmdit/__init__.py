"""Desk-scale mixed-modal diffusion-transformer portrait animation."""

__version__ = "0.1.0"

from .tensor import Tensor, grad_check, no_grad  # noqa: F401
