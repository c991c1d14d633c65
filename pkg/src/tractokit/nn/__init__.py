"""Tensor machinery for the encoders: layers, losses, schedules and checkpoints.

Tensors, reverse-mode autodiff and the Adam/AdamW update rules come from PyTorch;
everything model-specific is defined here.
"""

import torch

from tractokit.errors import NumericError


def check_finite(t: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {where}")
    return t


__all__ = ["check_finite"]
