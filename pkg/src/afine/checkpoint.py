"""Model and backbone archives.

Archives are safetensors files whose only metadata entry, ``afine``, is a JSON
object with ``format_version``, ``kind`` and the backbone config.  A single
metadata key keeps the header byte-stable across processes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file, safe_open

from .backbone import Backbone, BackboneConfig, build_backbone
from .errors import ConfigError, DataError, ParameterError

FORMAT_VERSION = 1


def _write(path, tensors: dict, meta: dict) -> None:
    meta = {"format_version": FORMAT_VERSION, **meta}
    tensors = {k: v.detach().contiguous().cpu() for k, v in tensors.items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={"afine": json.dumps(meta, sort_keys=True)})


def _read(path, kind: str):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get("afine")
        tensors = load_file(str(path))
    except (SafetensorError, OSError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if raw is None:
        raise DataError(f"{path} is not an afine archive (missing metadata)")
    meta = json.loads(raw)
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {meta.get('format_version')!r}")
    if meta.get("kind") != kind:
        raise DataError(f"{path}: expected a {kind} archive, found {meta.get('kind')!r}")
    return tensors, meta


def save_model(model, path, extra: dict | None = None) -> None:
    meta = {"kind": "model", "backbone_config": model.backbone_config.to_dict()}
    if extra:
        meta["extra"] = extra
    _write(path, model.state_dict(), meta)


def load_model(path, dtype=torch.float32):
    from .model import AFINE

    tensors, meta = _read(path, "model")
    try:
        cfg = BackboneConfig.from_dict(meta["backbone_config"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: bad backbone config ({exc})") from None
    for name in ("eta4", "gamma4"):
        if name in tensors and float(tensors[name]) == 0.0:
            raise ParameterError(f"{path}: calibration parameter {name} is exactly zero")
    model = AFINE(cfg)
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise DataError(f"{path}: parameters do not match the declared backbone ({exc})") from None
    return model.to(dtype)


def save_backbone(backbone: Backbone, path) -> None:
    _write(path, backbone.state_dict(), {"kind": "backbone", "backbone_config": backbone.config.to_dict()})


def load_backbone(path) -> Backbone:
    tensors, meta = _read(path, "backbone")
    backbone = build_backbone(BackboneConfig.from_dict(meta["backbone_config"]))
    backbone.load_state_dict(tensors, strict=True)
    return backbone


def parameter_hash(params) -> str:
    """SHA-256 over (name, bytes) of an iterable of named tensors."""
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_backbone_weights(backbone: Backbone, path) -> None:
    """Load pretrained weights into ``backbone`` in place.

    Accepts either an afine backbone archive or a raw safetensors export of a
    Hugging Face CLIP vision tower.
    """
    from .backbone import convert_hf_clip_vision_state_dict

    path = Path(path)
    if not path.is_file():
        raise DataError(f"backbone weights not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            is_archive = "afine" in (f.metadata() or {})
        tensors = load_file(str(path))
    except (SafetensorError, OSError) as exc:
        raise DataError(f"cannot read backbone weights {path}: {exc}") from None
    if is_archive:
        tensors, meta = _read(path, "backbone")
        if BackboneConfig.from_dict(meta["backbone_config"]) != backbone.config:
            raise ConfigError(f"{path}: backbone config differs from the requested backbone")
    elif backbone.config.kind == "transformer":
        tensors = convert_hf_clip_vision_state_dict(tensors, backbone.config)
    try:
        backbone.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise DataError(f"{path}: weights do not match the backbone ({exc})") from None
