"""Synthetic pair-annotated corpora with known quality ordering.

Contents are 1/f-spectrum colour textures.  Variant ``k`` of a content is
blurred with sigma ``k * blur_step`` and corrupted with Gaussian noise of std
``k * noise_step``, so quality strictly decreases with ``k`` and every variant
is worse than its reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Triplet
from .evaluation import EvalPair


def make_content(rng: np.random.Generator, size: int = 32, exponent: float = 1.6) -> np.ndarray:
    """HxWx3 texture with a power-law spectrum, rescaled into [0.1, 0.9]."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    radius[0, 0] = 1.0
    amp = radius ** (-exponent)
    amp[0, 0] = 0.0
    base = []
    for _ in range(2):
        phase = rng.uniform(0, 2 * np.pi, (size, size))
        base.append(np.real(np.fft.ifft2(amp * np.exp(1j * phase))))
    mix = rng.normal(size=(3, 2)) + np.array([[1.0, 0.0], [0.7, 0.5], [0.4, 1.0]])
    img = np.einsum("ck,khw->hwc", mix, np.stack(base))
    img -= img.min()
    img /= img.max() + 1e-12
    return 0.1 + 0.8 * img


def degrade(image: np.ndarray, level: float, rng: np.random.Generator,
            blur_step: float = 0.3, noise_step: float = 0.06) -> np.ndarray:
    out = image
    if level > 0:
        out = gaussian_filter(image, sigma=(level * blur_step, level * blur_step, 0), mode="reflect")
        out = out + rng.normal(scale=level * noise_step, size=image.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class SyntheticCorpus:
    images: dict[str, np.ndarray] = field(default_factory=dict)
    contents: list[str] = field(default_factory=list)
    levels: tuple[int, ...] = (1, 2, 3, 4)

    @staticmethod
    def ref_id(content: str) -> str:
        return f"{content}/ref"

    @staticmethod
    def variant_id(content: str, level: int) -> str:
        return f"{content}/l{level}"

    def triplets(self, contents=None) -> list[Triplet]:
        """Reference-vs-test triplets (z = x, p = 0) and all cross-variant triplets."""
        out = []
        for c in contents if contents is not None else self.contents:
            r = self.ref_id(c)
            for k in self.levels:
                out.append(Triplet(r, self.variant_id(c, k), r, 0.0))
            for i, a in enumerate(self.levels):
                for b in self.levels[i + 1 :]:
                    out.append(Triplet(r, self.variant_id(c, a), self.variant_id(c, b), 1.0))
        return out

    def eval_pairs(self, contents=None) -> list[EvalPair]:
        out = []
        for t in self.triplets(contents):
            tag = "ref>test" if t.z_id == t.reference_id else "cross-test"
            out.append(EvalPair(t.reference_id, t.y_id, t.z_id, "y" if t.p == 1.0 else "z", tag))
        return out


def synthetic_corpus(n_contents: int, levels=(1, 2, 3, 4), size: int = 32, seed: int = 0,
                     blur_step: float = 0.3, noise_step: float = 0.06) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    corpus = SyntheticCorpus(levels=tuple(levels))
    for i in range(n_contents):
        c = f"c{i:04d}"
        ref = make_content(rng, size)
        corpus.contents.append(c)
        corpus.images[corpus.ref_id(c)] = ref
        for k in corpus.levels:
            corpus.images[corpus.variant_id(c, k)] = degrade(ref, k, rng, blur_step, noise_step)
    return corpus
