import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from afine import AFINE, BackboneConfig
from afine.errors import DimensionError, ParameterError
from afine.model import PSNR_CAP, adaptive_lambda, afine_score, calibrate, psnr, ssim_global

# seeded toy model (backbone seed 0) on the two fixed images of fixed_pair(), float64
GOLDEN_AFINE = 0.01674375163527008


def fixed_pair():
    g = np.linspace(0, 1, 16)
    ref = np.stack([np.tile(g, (16, 1)), np.tile(g[:, None], (1, 16)), np.outer(g, g)], axis=-1)
    test = np.clip(ref + 0.1 * np.sin(np.arange(16 * 16 * 3).reshape(16, 16, 3)), 0, 1)
    return ref, test


# ---------------------------------------------------------------- calibration


def test_calibrate_center_is_zero():
    assert calibrate(0.37, 0.37, 1.3) == 0.0
    assert calibrate(-5.0, -5.0, -0.2) == 0.0


def test_calibrate_asymptotes():
    assert calibrate(1e6, 0.0, 1.0) == pytest.approx(2.0)
    assert calibrate(-1e6, 0.0, 1.0) == pytest.approx(-2.0)


def test_calibrate_one_scale_above_center():
    assert calibrate(1.5 + 0.7, 1.5, 0.7) == pytest.approx(0.9242343145200196, abs=1e-12)
    # negative raw scale uses its absolute value
    assert calibrate(1.5 + 0.7, 1.5, -0.7) == pytest.approx(0.9242343145200196, abs=1e-12)


def test_calibrate_matches_logistic_form():
    v = np.linspace(-5, 5, 101)
    logistic = 4.0 / (1.0 + np.exp(-(v - 0.3) / 0.8)) - 2.0
    np.testing.assert_allclose(calibrate(v, 0.3, 0.8), logistic, atol=1e-12)


def test_calibrate_zero_scale_rejected():
    with pytest.raises(ParameterError):
        calibrate(1.0, 0.0, 0.0)
    with pytest.raises(ParameterError):
        calibrate(torch.tensor(1.0), torch.tensor(0.0), torch.tensor(0.0))


@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-5, 5), st.floats(0.05, 5))
def test_calibrate_monotone_and_bounded(a, b, center, scale):
    fa, fb = calibrate(a, center, scale), calibrate(b, center, scale)
    assert -2 <= fa <= 2
    if a < b:
        assert fa <= fb


# ---------------------------------------------------------------- lambda


def test_lambda_examples():
    assert adaptive_lambda(0.4, 0.4, 3.0) == 1.0
    assert adaptive_lambda(-1.5, 1.0, 1.0) == pytest.approx(0.0820849986238988, rel=1e-12)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 10))
def test_lambda_reciprocity_and_bounds(nx, ny, k):
    lam = adaptive_lambda(nx, ny, k)
    assert lam * adaptive_lambda(ny, nx, k) == pytest.approx(1.0, abs=1e-9)
    assert math.exp(-4 * k) <= lam * (1 + 1e-12) and lam <= math.exp(4 * k) * (1 + 1e-12)


# ---------------------------------------------------------------- A-FINE


@pytest.fixture
def model64():
    return AFINE(BackboneConfig.toy(seed=0)).double()


def test_initial_scale_is_one(model64):
    assert float(model64.k.detach()) == pytest.approx(1.0, abs=1e-6)
    assert [model64.eta3.item(), model64.eta4.item(), model64.gamma3.item(), model64.gamma4.item()] == [0, 1, 0, 1]


def test_self_score_is_calibrated_naturalness(model64):
    ref, _ = fixed_pair()
    x = torch.from_numpy(ref.transpose(2, 0, 1)).unsqueeze(0)
    with torch.no_grad():
        pyr = model64.pyramid(x)
        terms = model64.terms(pyr, pyr)
        expected = calibrate(torch.tensor(0.0, dtype=torch.float64), model64.eta3, model64.eta4) + model64.calibrated_naturalness(pyr)
    assert terms["lambda"].item() == 1.0
    assert terms["score"].item() == pytest.approx(expected.item(), abs=1e-9)
    assert math.isfinite(afine_score(ref, ref, model64))


def test_zero_scale_reduces_to_unit_weight(model64):
    ref, test = fixed_pair()
    with torch.no_grad():
        model64.k_raw.fill_(-60.0)  # softplus(-60) ~ 1e-26
        x = torch.from_numpy(ref.transpose(2, 0, 1)).unsqueeze(0)
        y = torch.from_numpy(test.transpose(2, 0, 1)).unsqueeze(0)
        t = model64.terms(model64.pyramid(x), model64.pyramid(y))
    assert t["lambda"].item() == pytest.approx(1.0, abs=1e-20)
    assert t["score"].item() == pytest.approx((t["fidelity_calibrated"] + t["naturalness_test"]).item(), abs=1e-12)


def test_golden_score(model64):
    ref, test = fixed_pair()
    assert afine_score(ref, test, model64) == pytest.approx(GOLDEN_AFINE, abs=1e-10)


def test_dimension_mismatch(model64):
    with pytest.raises(DimensionError):
        afine_score(np.zeros((16, 16, 3)), np.zeros((24, 16, 3)), model64)


def test_scores_finite_for_valid_images(model64, rng):
    imgs = [np.zeros((16, 16, 3)), np.ones((16, 16, 3)), rng.uniform(size=(16, 16, 3))]
    for a in imgs:
        for b in imgs:
            assert math.isfinite(afine_score(a, b, model64))


def test_parameter_groups_cover_everything(model64):
    groups = model64.parameter_groups()
    names = [n for g in groups.values() for n, _ in g]
    assert sorted(names) == sorted(n for n, _ in model64.named_parameters())
    assert [n for n, _ in groups["scale"]] == ["k_raw"]
    assert sorted(n for n, _ in groups["calibration"]) == ["eta3", "eta4", "gamma3", "gamma4"]


# ---------------------------------------------------------------- baselines


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.5) == pytest.approx(6.020599913279624, abs=1e-12)


def test_psnr_shift_invariance(rng):
    a, b = rng.uniform(0, 0.5, (8, 8, 3)), rng.uniform(0, 0.5, (8, 8, 3))
    assert psnr(a + 0.3, b + 0.3) == pytest.approx(psnr(a, b), abs=1e-9)


def test_ssim_identity_and_negative(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert ssim_global(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim_global(a, 1 - a) < 0


def test_ssim_checkerboard_vs_gray():
    board = (np.indices((8, 8)).sum(0) % 2).astype(float)
    board = np.repeat(board[..., None], 3, axis=-1)
    gray = np.full_like(board, 0.5)
    # mu both 0.5 -> L = 1; var 0.25 vs 0, cov 0 -> S = c2 / (0.25 + c2)
    c2 = 0.03**2
    assert ssim_global(board, gray) == pytest.approx(c2 / (0.25 + c2), abs=1e-12)
