import json

import pytest
import torch
from safetensors.torch import load_file, save_file

from afine import AFINE, BackboneConfig
from afine.backbone import build_backbone
from afine.checkpoint import load_backbone, load_model, parameter_hash, save_backbone, save_model
from afine.errors import DataError, ParameterError


def perturbed_model():
    m = AFINE(BackboneConfig.toy(seed=2))
    with torch.no_grad():
        m.eta3.fill_(0.123)
        m.gamma4.fill_(-0.7)
        m.fidelity.alpha_logits.normal_()
    return m


def test_round_trip_is_bit_exact(tmp_path):
    m = perturbed_model()
    save_model(m, tmp_path / "m.safetensors")
    loaded = load_model(tmp_path / "m.safetensors")
    a, b = m.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert loaded.backbone_config == m.backbone_config


def test_save_load_save_is_byte_identical(tmp_path):
    save_model(perturbed_model(), tmp_path / "a.safetensors")
    save_model(load_model(tmp_path / "a.safetensors"), tmp_path / "b.safetensors")
    assert (tmp_path / "a.safetensors").read_bytes() == (tmp_path / "b.safetensors").read_bytes()


def test_zero_calibration_scale_rejected(tmp_path):
    m = perturbed_model()
    with torch.no_grad():
        m.eta4.zero_()
    save_model(m, tmp_path / "z.safetensors")
    with pytest.raises(ParameterError):
        load_model(tmp_path / "z.safetensors")


def test_format_version_checked(tmp_path):
    path = tmp_path / "m.safetensors"
    save_model(perturbed_model(), path)
    tensors = load_file(str(path))
    meta = {"format_version": 99, "kind": "model", "backbone_config": BackboneConfig.toy().to_dict()}
    save_file(tensors, str(path), metadata={"afine": json.dumps(meta)})
    with pytest.raises(DataError, match="format_version"):
        load_model(path)


def test_missing_and_foreign_files(tmp_path):
    with pytest.raises(DataError):
        load_model(tmp_path / "nope.safetensors")
    save_file({"x": torch.zeros(2)}, str(tmp_path / "foreign.safetensors"))
    with pytest.raises(DataError):
        load_model(tmp_path / "foreign.safetensors")
    (tmp_path / "garbage.safetensors").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_model(tmp_path / "garbage.safetensors")


def test_backbone_archive_round_trip(tmp_path):
    bb = build_backbone(BackboneConfig.toy(seed=9))
    save_backbone(bb, tmp_path / "bb.safetensors")
    loaded = load_backbone(tmp_path / "bb.safetensors")
    assert parameter_hash(bb.named_parameters()) == parameter_hash(loaded.named_parameters())
    with pytest.raises(DataError, match="expected a model archive"):
        load_model(tmp_path / "bb.safetensors")


def test_parameter_hash_detects_changes():
    m = perturbed_model()
    h = parameter_hash(m.named_parameters())
    with torch.no_grad():
        m.k_raw.add_(1e-7)
    assert parameter_hash(m.named_parameters()) != h
