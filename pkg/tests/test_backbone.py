import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from afine.backbone import (
    BackboneConfig,
    build_backbone,
    center_crop_to_multiple,
    convert_hf_clip_vision_state_dict,
    extract_pyramid,
    interpolate_positional_grid,
    stage_statistics,
)
from afine.errors import ConfigError, DimensionError


def small_vit_config(**kw):
    base = dict(
        kind="transformer",
        fidelity_stage_ids=(1, 3),
        naturalness_stage_ids=(1, 2, 3),
        patch_size=8,
        embed_dim=32,
        depth=3,
        num_heads=4,
        base_grid=4,
        seed=0,
    )
    base.update(kw)
    return BackboneConfig(**base)


@pytest.fixture(scope="module")
def vit_b32():
    return build_backbone(BackboneConfig.vit_b32(seed=0)).eval()


# ---------------------------------------------------------------- shapes


def test_vit_b32_224_gives_7x7x768(vit_b32):
    with torch.no_grad():
        pyr = vit_b32.extract(torch.rand(1, 3, 224, 224))
    assert sorted(pyr.stages) == list(range(13))
    assert pyr[0].shape == (1, 3, 224, 224)
    for stage in range(1, 13):
        assert pyr[stage].shape == (1, 768, 7, 7)


def test_vit_b32_512_interpolates_position_grid(vit_b32):
    pos = vit_b32.position_embeddings_for(16, 16)
    assert pos.shape == (257, 768)
    torch.testing.assert_close(pos[0], vit_b32.position_embedding[0], rtol=0, atol=0)
    with torch.no_grad():
        pyr = vit_b32.extract(torch.rand(1, 3, 512, 512))
    assert pyr[12].shape == (1, 768, 16, 16)


def test_toy_backbone_stage_grids_halve():
    bb = build_backbone(BackboneConfig.toy())
    pyr = bb.extract(torch.rand(2, 3, 48, 64))
    assert pyr[0].shape == (2, 3, 48, 64)
    assert pyr[1].shape == (2, 8, 24, 32)
    assert pyr[2].shape == (2, 16, 12, 16)
    assert pyr[3].shape == (2, 32, 6, 8)


def test_non_divisible_input_is_center_cropped():
    bb = build_backbone(small_vit_config())
    img = torch.rand(1, 3, 21, 30)
    pyr = bb.extract(img)
    assert pyr[0].shape[-2:] == (16, 24)
    torch.testing.assert_close(pyr[0], img[..., 2:18, 3:27], rtol=0, atol=0)
    assert pyr[1].shape == (1, 32, 2, 3)


@settings(max_examples=15, deadline=None)
@given(h=st.integers(8, 40), w=st.integers(8, 40))
def test_token_count_matches_floor_division(h, w):
    bb = build_backbone(small_vit_config())
    with torch.no_grad():
        pyr = bb.extract(torch.rand(1, 3, h, w))
    gh, gw = pyr[3].shape[-2:]
    assert (gh, gw) == (h // 8, w // 8)


def test_image_smaller_than_patch_is_rejected():
    bb = build_backbone(BackboneConfig.toy())
    with pytest.raises(DimensionError):
        bb.extract(torch.rand(1, 3, 7, 32))


def test_unknown_stage_id_is_config_error():
    with pytest.raises(ConfigError):
        build_backbone(small_vit_config(fidelity_stage_ids=(1, 4)))
    with pytest.raises(ConfigError):
        BackboneConfig.toy().stage_channels(5)


def test_stage_ids_must_increase():
    with pytest.raises(ConfigError):
        small_vit_config(naturalness_stage_ids=(2, 1)).validate()


def test_extraction_is_bit_reproducible():
    bb = build_backbone(small_vit_config())
    img = torch.rand(2, 3, 24, 24)
    a = bb.extract(img)
    b = bb.extract(img.clone())
    for s in a.stages:
        assert torch.equal(a[s], b[s])


def test_seeded_construction_is_reproducible():
    a = build_backbone(BackboneConfig.toy(seed=5)).state_dict()
    b = build_backbone(BackboneConfig.toy(seed=5)).state_dict()
    c = build_backbone(BackboneConfig.toy(seed=6)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_config_dict_round_trip():
    cfg = small_vit_config()
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        BackboneConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_center_crop_helper_keeps_exact_multiples():
    img = torch.rand(1, 3, 32, 32)
    assert torch.equal(center_crop_to_multiple(img, 8), img)


# ---------------------------------------------------------------- positional grid


def test_interpolation_identity_is_exact():
    grid = torch.randn(7, 7, 5)
    assert torch.equal(interpolate_positional_grid(grid, 7, 7), grid)


def test_interpolation_2x2_to_3x3_center():
    grid = torch.tensor([[0.0, 1.0], [2.0, 3.0]]).unsqueeze(-1)
    out = interpolate_positional_grid(grid, 3, 3)[..., 0]
    assert out[1, 1].item() == pytest.approx(1.5)
    # edges are midpoints of the corner pairs
    assert out[0, 1].item() == pytest.approx(0.5)
    assert out[1, 0].item() == pytest.approx(1.0)


def test_interpolation_preserves_corners():
    grid = torch.randn(7, 7, 3, dtype=torch.float64)
    out = interpolate_positional_grid(grid, 16, 16)
    assert out.shape == (16, 16, 3)
    for (i, j), (k, m) in zip([(0, 0), (0, 6), (6, 0), (6, 6)], [(0, 0), (0, 15), (15, 0), (15, 15)]):
        torch.testing.assert_close(out[k, m], grid[i, j], rtol=0, atol=1e-12)


def test_interpolation_errors():
    with pytest.raises(DimensionError):
        interpolate_positional_grid(torch.randn(1, 4, 2), 3, 3)
    with pytest.raises(DimensionError):
        interpolate_positional_grid(torch.randn(2, 2, 2), 0, 3)


# ---------------------------------------------------------------- statistics


def test_stage_statistics_constant():
    x = torch.full((1, 4, 4), 3.0, dtype=torch.float64)
    mu_x, mu_y, vx, vy, cov = stage_statistics(x, x)
    assert mu_x.item() == 3.0 and vx.item() == 0.0 and cov.item() == 0.0


def test_stage_statistics_brute_force():
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    y = torch.tensor([[[4.0, 3.0], [2.0, 1.0]]], dtype=torch.float64)
    mu_x, mu_y, vx, vy, cov = stage_statistics(x, y)
    assert (mu_x.item(), mu_y.item()) == (2.5, 2.5)
    assert (vx.item(), vy.item()) == (1.25, 1.25)
    assert cov.item() == -1.25


def test_stage_statistics_self_covariance(rng):
    x = torch.from_numpy(rng.normal(size=(2, 5, 6, 7)))
    _, _, vx, _, cov = stage_statistics(x, x)
    torch.testing.assert_close(cov, vx, rtol=0, atol=1e-9)


def test_stage_statistics_matches_numpy(rng):
    x = rng.normal(size=(3, 5, 4))
    y = rng.normal(size=(3, 5, 4))
    got = [t.numpy() for t in stage_statistics(torch.from_numpy(x), torch.from_numpy(y))]
    fx, fy = x.reshape(3, -1), y.reshape(3, -1)
    np.testing.assert_allclose(got[2], fx.var(axis=1, ddof=0), atol=1e-12)
    ref_cov = ((fx - fx.mean(1, keepdims=True)) * (fy - fy.mean(1, keepdims=True))).mean(1)
    np.testing.assert_allclose(got[4], ref_cov, atol=1e-12)


def test_stage_statistics_shape_mismatch():
    with pytest.raises(DimensionError):
        stage_statistics(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


def test_extract_pyramid_function_matches_method():
    bb = build_backbone(BackboneConfig.toy())
    img = torch.rand(1, 3, 16, 16)
    a, b = extract_pyramid(img, bb), bb.extract(img)
    assert all(torch.equal(a[s], b[s]) for s in a.stages)


# ---------------------------------------------------------------- pretrained weight conversion


def test_hf_clip_conversion_reproduces_hidden_states():
    transformers = pytest.importorskip("transformers")
    hf_cfg = transformers.CLIPVisionConfig(
        hidden_size=32,
        intermediate_size=128,
        num_hidden_layers=3,
        num_attention_heads=4,
        image_size=32,
        patch_size=8,
        hidden_act="quick_gelu",
    )
    torch.manual_seed(0)
    hf = transformers.CLIPVisionModel(hf_cfg).eval()
    cfg = small_vit_config()
    ours = build_backbone(cfg).eval()
    ours.load_state_dict(convert_hf_clip_vision_state_dict(hf.state_dict(), cfg))

    img = torch.rand(2, 3, 32, 32)
    mean = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1)
    std = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1)
    with torch.no_grad():
        hidden = hf(pixel_values=(img - mean) / std, output_hidden_states=True).hidden_states
        pyr = ours.extract(img)
    for stage in (1, 2, 3):
        expected = hidden[stage][:, 1:].transpose(1, 2).reshape(2, 32, 4, 4)
        torch.testing.assert_close(pyr[stage], expected, rtol=1e-4, atol=1e-5)
