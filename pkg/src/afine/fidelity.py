"""DISTS-style fidelity term built from global per-channel feature statistics."""

from __future__ import annotations

import torch
from torch import nn

from .backbone import FeaturePyramid, stage_statistics
from .errors import DimensionError, ParameterError

C1 = 1e-6
C2 = 1e-6


def luminance_similarity(mu_x, mu_y, c1=C1):
    """(2 mu_x mu_y + c1) / (mu_x^2 + mu_y^2 + c1); works on floats and tensors."""
    if c1 <= 0:
        raise ParameterError("c1 must be positive")
    return (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)


def structure_similarity(var_x, var_y, cov_xy, c2=C2):
    """(2 cov_xy + c2) / (var_x + var_y + c2)."""
    if c2 <= 0:
        raise ParameterError("c2 must be positive")
    return (2 * cov_xy + c2) / (var_x + var_y + c2)


class FidelityWeights(nn.Module):
    """Channel weights alpha/beta kept on the probability simplex by a joint softmax.

    ``stage_channels`` lists (stage_index, channels) pairs in pyramid order.
    Logits start at zero, i.e. uniform weights.
    """

    def __init__(self, stage_channels, c1: float = C1, c2: float = C2):
        super().__init__()
        self.stage_channels = tuple((int(s), int(c)) for s, c in stage_channels)
        total = sum(c for _, c in self.stage_channels)
        self.alpha_logits = nn.Parameter(torch.zeros(total))
        self.beta_logits = nn.Parameter(torch.zeros(total))
        if c1 <= 0 or c2 <= 0:
            raise ParameterError("c1 and c2 must be positive")
        self.c1 = c1
        self.c2 = c2

    @property
    def stage_ids(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.stage_channels)

    def effective(self):
        """Return (alpha, beta), each of length sum(channels), jointly summing to 1."""
        n = self.alpha_logits.numel()
        w = torch.softmax(torch.cat([self.alpha_logits, self.beta_logits]), dim=0)
        return w[:n], w[n:]


def fidelity_similarities(pyr_x: FeaturePyramid, pyr_y: FeaturePyramid, weights: FidelityWeights):
    """Per-channel luminance and structure similarities, concatenated over stages -> (B, total)."""
    ls, ss = [], []
    for stage, channels in weights.stage_channels:
        try:
            fx, fy = pyr_x[stage], pyr_y[stage]
        except KeyError:
            raise DimensionError(f"pyramid is missing stage {stage}") from None
        if fx.shape[-3] != channels:
            raise DimensionError(f"stage {stage} has {fx.shape[-3]} channels, weights expect {channels}")
        mu_x, mu_y, var_x, var_y, cov = stage_statistics(fx, fy)
        ls.append(luminance_similarity(mu_x, mu_y, weights.c1))
        ss.append(structure_similarity(var_x, var_y, cov, weights.c2))
    return torch.cat(ls, dim=-1), torch.cat(ss, dim=-1)


def fidelity_score(pyr_x: FeaturePyramid, pyr_y: FeaturePyramid, weights: FidelityWeights) -> torch.Tensor:
    """1 - sum_ij (alpha_ij L_ij + beta_ij S_ij). Lower means higher fidelity; shape (B,)."""
    lum, struct = fidelity_similarities(pyr_x, pyr_y, weights)
    alpha, beta = weights.effective()
    alpha = alpha.to(lum.dtype)
    beta = beta.to(lum.dtype)
    return 1 - (lum * alpha).sum(-1) - (struct * beta).sum(-1)
