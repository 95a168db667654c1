"""Image loading and conversion helpers."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, DimensionError


def load_image(path) -> np.ndarray:
    """Read an image file as an HxWx3 float64 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot write image {path}: {exc}") from None


def to_batch(image) -> torch.Tensor:
    """HxWx3 array, CHW tensor or BCHW tensor -> BCHW tensor."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[-1] != 3:
            raise DimensionError(f"expected an HxWx3 array, got {image.shape}")
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected a (B, 3, H, W) tensor, got {tuple(image.shape)}")
    return image


class ImageStore:
    """Resolves image ids to CHW tensors, from memory or from files under ``root``.

    File-backed images are cached after the first read.
    """

    def __init__(self, root=None, images: dict | None = None, dtype=torch.float32):
        self.root = Path(root) if root is not None else None
        self.dtype = dtype
        self._cache: dict[str, torch.Tensor] = {}
        for key, img in (images or {}).items():
            self._cache[key] = to_batch(img)[0].to(dtype)

    def path(self, image_id: str) -> Path:
        p = Path(image_id)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def exists(self, image_id: str) -> bool:
        return image_id in self._cache or self.path(image_id).is_file()

    def missing(self, ids) -> list[str]:
        return sorted({i for i in ids if not self.exists(i)})

    def __contains__(self, image_id: str) -> bool:
        return self.exists(image_id)

    def __getitem__(self, image_id: str) -> torch.Tensor:
        if image_id not in self._cache:
            self._cache[image_id] = to_batch(load_image(self.path(image_id)))[0].to(self.dtype)
        return self._cache[image_id]

    def array(self, image_id: str) -> np.ndarray:
        return self[image_id].double().numpy().transpose(1, 2, 0)


def corpus_root_from_env(explicit=None):
    if explicit:
        return Path(explicit)
    env = os.environ.get("AFINE_CORPUS_ROOT")
    return Path(env) if env else None
