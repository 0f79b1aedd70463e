"""Image/text embedders.

Production runs plug in pretrained CLIP / DINO models behind these two
interfaces. The toy embedders here are deterministic, dependency-free
stand-ins sized for the toy backend.
"""

from __future__ import annotations

import hashlib
from typing import Mapping, Protocol

import numpy as np
from PIL import Image

from .core import Manifest, read_rgb


class ImageEmbedder(Protocol):
    name: str

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


class TextEmbedder(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...


def _pool(image: np.ndarray, grid: int) -> np.ndarray:
    img = Image.fromarray(np.asarray(image, dtype=np.uint8)[..., :3])
    return np.asarray(img.resize((grid, grid), Image.BOX), dtype=np.float64) / 255.0


def _hashed_vector(text: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


class ColorLayoutEmbedder:
    """Coarse color layout: box-pooled RGB on a small grid, centered at mid-gray."""

    name = "toy-clip"

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.dim = grid * grid * 3

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return (_pool(image, self.grid) - 0.5).ravel()


class StructureEmbedder:
    """Structure features: zero-mean luminance on a grid plus its finite differences."""

    name = "toy-dino"

    def __init__(self, grid: int = 16):
        self.grid = grid

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        g = _pool(image, self.grid) @ np.array([0.2126, 0.7152, 0.0722])
        g = g - g.mean()
        return np.concatenate([g.ravel(), np.diff(g, axis=0).ravel(), np.diff(g, axis=1).ravel()])


class PrototypeJointEmbedder(ColorLayoutEmbedder):
    """Joint embedder whose text side maps an object name to the mean layout of its exemplars.

    Text that names none of the known objects gets a hashed pseudo-random
    vector, so any prompt is embeddable.
    """

    name = "toy-joint"

    def __init__(self, prototypes: Mapping[str, np.ndarray], grid: int = 8):
        super().__init__(grid)
        self.prototypes = {k: np.asarray(v, dtype=np.float64) for k, v in prototypes.items()}

    @classmethod
    def from_manifest(cls, manifest: Manifest, grid: int = 8) -> "PrototypeJointEmbedder":
        feats: dict[str, list[np.ndarray]] = {}
        base = ColorLayoutEmbedder(grid)
        for rec in manifest:
            feats.setdefault(rec.object_class, []).append(base.embed_image(read_rgb(manifest.image_path(rec))))
        return cls({k: np.mean(v, axis=0) for k, v in feats.items()}, grid)

    def embed_text(self, text: str) -> np.ndarray:
        words = text.lower().replace(",", " ").split()
        # the last named object wins: "X painted on Y" describes Y's appearance
        for w in reversed(words):
            if w in self.prototypes:
                return self.prototypes[w]
        return _hashed_vector(text, self.dim)
