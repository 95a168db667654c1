"""A-FINE score: calibrated fidelity plus naturalness gated by an adaptive weight.

    D(x, y) = F_eta(x, y) + lambda(x, y) * N_gamma(y)
    lambda(x, y) = exp(k * (N_gamma(x) - N_gamma(y)))

Smaller D means better predicted quality of ``y``; D may be negative.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, FeaturePyramid, build_backbone
from .errors import DimensionError, ParameterError
from .fidelity import FidelityWeights, fidelity_score, luminance_similarity, structure_similarity
from .naturalness import NaturalnessHead

# fixed logistic bounds
UPPER = 2.0
LOWER = -2.0

PSNR_CAP = 1e9

PARAMETER_GROUPS = ("backbone", "naturalness", "fidelity", "scale", "calibration")


def calibrate(value, center, scale):
    """Four-parameter logistic with bounds (-2, 2): (U - L) / (1 + exp(-(v - c)/|s|)) + L.

    Evaluated as ``2 * tanh((v - c) / (2|s|))``, which is the same function but
    returns exactly 0 at the center.
    """
    if isinstance(scale, torch.Tensor):
        if bool((scale == 0).any()):
            raise ParameterError("calibration scale must be nonzero")
        u = (value - center) / scale.abs()
        return (UPPER - LOWER) / 2 * torch.tanh(u / 2) + (UPPER + LOWER) / 2
    if scale == 0:
        raise ParameterError("calibration scale must be nonzero")
    u = (np.asarray(value, dtype=np.float64) - center) / abs(scale)
    out = (UPPER - LOWER) / 2 * np.tanh(u / 2) + (UPPER + LOWER) / 2
    return float(out) if out.ndim == 0 else out


def adaptive_lambda(n_ref, n_test, k):
    """exp(k * (n_ref - n_test)) on calibrated naturalness values."""
    if isinstance(n_ref, torch.Tensor) or isinstance(n_test, torch.Tensor) or isinstance(k, torch.Tensor):
        return torch.exp(k * (n_ref - n_test))
    return math.exp(k * (n_ref - n_test))


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class AFINE(nn.Module):
    def __init__(self, backbone_config: BackboneConfig | None = None):
        super().__init__()
        cfg = (backbone_config or BackboneConfig.toy()).validate()
        self.backbone_config = cfg
        self.backbone = build_backbone(cfg)
        fid = [(0, 3)] + [(s, cfg.stage_channels(s)) for s in cfg.fidelity_stage_ids]
        self.fidelity = FidelityWeights(fid)
        nat = [(s, cfg.stage_channels(s)) for s in cfg.naturalness_stage_ids]
        self.naturalness = NaturalnessHead(nat, cfg.embed_dim, seed=cfg.seed + 1)
        self.k_raw = nn.Parameter(torch.tensor(inverse_softplus(1.0)))
        self.eta3 = nn.Parameter(torch.tensor(0.0))
        self.eta4 = nn.Parameter(torch.tensor(1.0))
        self.gamma3 = nn.Parameter(torch.tensor(0.0))
        self.gamma4 = nn.Parameter(torch.tensor(1.0))

    @property
    def k(self) -> torch.Tensor:
        return F.softplus(self.k_raw)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {g: [] for g in PARAMETER_GROUPS}
        for name, p in self.named_parameters():
            head = name.split(".")[0]
            if head == "k_raw":
                groups["scale"].append((name, p))
            elif head in ("eta3", "eta4", "gamma3", "gamma4"):
                groups["calibration"].append((name, p))
            else:
                groups[head].append((name, p))
        return groups

    def pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        return self.backbone.extract(images)

    def raw_naturalness(self, pyr: FeaturePyramid) -> torch.Tensor:
        return self.naturalness(pyr.image, pyr)

    def calibrated_naturalness(self, pyr: FeaturePyramid) -> torch.Tensor:
        return calibrate(self.raw_naturalness(pyr), self.gamma3, self.gamma4)

    def combine(self, fid_cal, n_ref, n_test):
        """D from calibrated fidelity and calibrated naturalness of reference and test."""
        return fid_cal + adaptive_lambda(n_ref, n_test, self.k) * n_test

    def terms(self, pyr_ref: FeaturePyramid, pyr_test: FeaturePyramid, n_ref=None, n_test=None) -> dict:
        """All intermediate quantities for a batch of (reference, test) pyramids."""
        fid = fidelity_score(pyr_ref, pyr_test, self.fidelity)
        fid_cal = calibrate(fid, self.eta3, self.eta4)
        if n_ref is None:
            n_ref = self.calibrated_naturalness(pyr_ref)
        if n_test is None:
            n_test = self.calibrated_naturalness(pyr_test)
        lam = adaptive_lambda(n_ref, n_test, self.k)
        return {
            "fidelity": fid,
            "fidelity_calibrated": fid_cal,
            "naturalness_ref": n_ref,
            "naturalness_test": n_test,
            "lambda": lam,
            "score": fid_cal + lam * n_test,
        }

    def forward(self, ref: torch.Tensor, test: torch.Tensor) -> torch.Tensor:
        if ref.shape != test.shape:
            raise DimensionError(f"reference {tuple(ref.shape)} and test {tuple(test.shape)} differ in shape")
        return self.terms(self.pyramid(ref), self.pyramid(test))["score"]


def afine_score(ref, test, model: AFINE) -> float:
    """Score one (reference, test) pair given as HxWx3 arrays or CHW tensors."""
    from .images import to_batch

    r, t = to_batch(ref), to_batch(test)
    if r.shape != t.shape:
        raise DimensionError(f"reference {tuple(r.shape[-2:])} and test {tuple(t.shape[-2:])} differ in size")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return float(model(r.to(dtype), t.to(dtype))[0])


def _as_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(ref, test) -> float:
    """PSNR in dB for [0, 1] images; identical inputs return PSNR_CAP."""
    a, b = _as_array(ref), _as_array(test)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return 10 * math.log10(1.0 / mse)


SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def ssim_global(ref, test) -> float:
    """Single-window SSIM: mean over colour channels of L*S from whole-image statistics.

    Images are HxWx3 in [0, 1].
    """
    a, b = _as_array(ref), _as_array(test)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    mu_a, mu_b = a.mean(0), b.mean(0)
    da, db = a - mu_a, b - mu_b
    var_a, var_b, cov = (da * da).mean(0), (db * db).mean(0), (da * db).mean(0)
    lum = luminance_similarity(mu_a, mu_b, SSIM_C1)
    struct = structure_similarity(var_a, var_b, cov, SSIM_C2)
    return float(np.mean(lum * struct))
