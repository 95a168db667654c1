"""Pairwise ranking label, Thurstone Case V preference probability and fidelity loss."""

from __future__ import annotations

import math

import torch

SQRT2 = math.sqrt(2.0)


def ranking_label(q_y: float, q_z: float) -> float:
    """1 if y has the higher quality, 0.5 on a tie, else 0."""
    if q_y > q_z:
        return 1.0
    if q_y == q_z:
        return 0.5
    return 0.0


def _phi(x):
    if isinstance(x, torch.Tensor):
        return 0.5 * torch.erfc(-x / SQRT2)
    return 0.5 * math.erfc(-x / SQRT2)


def preference_probability(d_y, d_z):
    """Probability that y is preferred over z when lower scores are better.

    Scores are unit-variance Gaussians, so the difference has variance 2:
    Phi((d_z - d_y) / sqrt(2)).
    """
    return _phi((d_z - d_y) / SQRT2)


def fidelity_loss(p, p_hat):
    """1 - sqrt(p * p_hat) - sqrt((1 - p) * (1 - p_hat)), in [0, 1]."""
    if isinstance(p, torch.Tensor) or isinstance(p_hat, torch.Tensor):
        p = torch.as_tensor(p, dtype=p_hat.dtype if isinstance(p_hat, torch.Tensor) else None)
        # clamp_min keeps the sqrt differentiable when p_hat saturates to exactly 0 or 1
        eps = torch.finfo(p.dtype).tiny
        return 1 - torch.sqrt((p * p_hat).clamp_min(eps)) - torch.sqrt(((1 - p) * (1 - p_hat)).clamp_min(eps))
    return 1 - math.sqrt(p * p_hat) - math.sqrt((1 - p) * (1 - p_hat))
