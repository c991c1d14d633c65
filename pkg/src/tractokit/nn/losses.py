"""Classification, reconstruction and codebook losses, plus Gumbel-softmax sampling."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from tractokit.errors import InvalidInputError


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 2:
        raise InvalidInputError(f"logits must be (B, C), got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != logits.shape[:1]:
        raise InvalidInputError("labels must have one entry per logit row")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidInputError(f"labels must lie in [0, {logits.shape[1] - 1}]")
    return labels


def cross_entropy_loss(logits, labels) -> torch.Tensor:
    labels = _check_labels(logits, labels)
    logp = F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    return -logp.mean()


def focal_loss(logits, labels, gamma: float = 2.0) -> torch.Tensor:
    """Batch mean of ``-(1 - p_t)^gamma * log p_t``."""
    if gamma < 0:
        raise InvalidInputError(f"gamma must be >= 0, got {gamma}")
    labels = _check_labels(logits, labels)
    logp = F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    return (-(1.0 - logp.exp()) ** gamma * logp).mean()


def chamfer_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Symmetric chamfer distance with unsquared Euclidean point distances.

    Accepts ``(N, 3)`` / ``(M, 3)`` clouds or batches ``(..., N, 3)`` / ``(..., M, 3)``;
    batched inputs are averaged over the batch.
    """
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise InvalidInputError("chamfer distance needs non-empty clouds")
    d = torch.linalg.vector_norm(a[..., :, None, :] - b[..., None, :, :], dim=-1)
    return (d.amin(dim=-1).mean(dim=-1) + d.amin(dim=-2).mean(dim=-1)).mean()


def kl_to_uniform(logits: torch.Tensor) -> torch.Tensor:
    """Mean over tokens of KL(softmax(logits) || Uniform(V))."""
    v = logits.shape[-1]
    if v < 2:
        raise InvalidInputError("kl_to_uniform needs at least two categories")
    logp = F.log_softmax(logits, dim=-1)
    kl = (logp.exp() * (logp + torch.log(torch.tensor(float(v), dtype=logits.dtype)))).sum(-1)
    return kl.mean()


class _StraightThrough(torch.autograd.Function):
    """Exact one-hot of the argmax forward, identity gradient backward."""

    @staticmethod
    def forward(ctx, soft):
        hard = torch.zeros_like(soft)
        return hard.scatter_(-1, soft.argmax(dim=-1, keepdim=True), 1.0)

    @staticmethod
    def backward(ctx, grad):
        return grad


def gumbel_noise(shape, generator=None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log((-torch.log(u.clamp_min(tiny))).clamp_min(tiny))


def gumbel_softmax_sample(logits: torch.Tensor, tau: float = 1.0, hard: bool = False,
                          generator: torch.Generator | None = None, noise=None) -> torch.Tensor:
    """``softmax((logits + g) / tau)`` with Gumbel noise ``g``; ``hard`` returns a straight-through one-hot."""
    if tau <= 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    if noise is None:
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    soft = F.softmax((logits + noise) / tau, dim=-1)
    return _StraightThrough.apply(soft) if hard else soft
