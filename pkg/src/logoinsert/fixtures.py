"""Procedural stand-ins for user assets, so the toy pipeline runs without downloads.

Generates blocky logos, smooth "natural" scenes (sky/ground gradients with
soft blobs) and a relation dataset of simple object shapes with a small
motif painted on each.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import PAINTED, LogoAsset, Manifest, ManifestRecord, save_manifest, seeded_rng, write_png

OBJECT2_NAMES = (
    "shirt", "hat", "mug", "bag", "cap", "bottle", "egg", "toast", "car", "laptop",
    "umbrella", "shoe", "pillow", "kite", "box", "book", "plate", "vase", "sign", "wall",
)

# motif color per object1
OBJECT1_COLORS = {
    "a dog": (150, 90, 40),
    "an apple": (200, 30, 30),
    "a star": (240, 200, 20),
    "a heart": (220, 40, 120),
    "a smiley face": (250, 220, 60),
}


def make_logo(size: int = 32, seed: int = 0, palette=None, transparent_corners: bool = True) -> np.ndarray:
    """A blocky two-tone RGBA logo: a balanced 4x4 code of light and dark cells."""
    rng = seeded_rng(seed, "fixture/logo")
    dark, light = palette or ((20, 30, 110), (230, 60, 40))
    cells = (rng.permutation(16) < 8).reshape(4, 4)  # balanced: 8 light, 8 dark
    cell = size // 4
    rgb = np.zeros((size, size, 3), dtype=np.uint8)
    for i in range(4):
        for j in range(4):
            rgb[i * cell:(i + 1) * cell, j * cell:(j + 1) * cell] = light if cells[i, j] else dark
    alpha = np.full((size, size), 255, dtype=np.uint8)
    if transparent_corners:
        k = max(1, size // 10)
        for ys in (slice(0, k), slice(size - k, size)):
            for xs in (slice(0, k), slice(size - k, size)):
                alpha[ys, xs] = 0
    return np.dstack([rgb, alpha])


def make_logo_asset(logo_id: str = "toylogo", size: int = 32, seed: int = 0) -> LogoAsset:
    return LogoAsset.from_array(logo_id, make_logo(size, seed), provenance="procedural")


def make_scene(size: int = 64, seed: int = 0, brightness: str = "mixed") -> np.ndarray:
    """Sky-over-ground gradient with a few soft blobs; ``brightness`` in {mixed, bright, dark}."""
    rng = seeded_rng(seed, "fixture/scene")
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    horizon = rng.uniform(0.35, 0.65)
    if brightness == "dark":
        sky, ground = np.array([25, 25, 40]), np.array([15, 25, 15])
    elif brightness == "bright":
        sky, ground = np.array([200, 225, 250]), np.array([225, 235, 200])
    else:
        sky = np.array([120, 170, 235]) + rng.integers(-20, 20, 3)
        ground = np.array([60, 110, 50]) + rng.integers(-20, 20, 3)
    t = np.clip((yy - horizon) * 8 + 0.5, 0, 1)[..., None]
    img = (1 - t) * sky + t * ground
    img = img * (0.85 + 0.15 * (1 - yy[..., None]))
    for _ in range(3):
        cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.2)
        w = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))[..., None]
        shade = rng.uniform(0.7, 1.15)
        img = img * (1 - 0.5 * w) + img * shade * 0.5 * w
    return np.clip(img, 0, 255).round().astype(np.uint8)


def write_scenes(out_dir, count: int = 5, size: int = 64, seed: int = 0, brightness: str = "mixed") -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(count):
        p = out_dir / f"scene_{i:02d}.png"
        write_png(p, make_scene(size, seed * 1000 + i, brightness))
        paths.append(p)
    return paths


def _object_image(class_idx: int, object1: str, pose: int, size: int, seed: int) -> np.ndarray:
    rng = seeded_rng(seed, f"fixture/relation/{class_idx}/{pose}")
    hue_rng = seeded_rng(class_idx, "fixture/relation/color")
    base = hue_rng.integers(40, 220, 3)
    bg = np.full((size, size, 3), 128.0)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    cx, cy = 0.5 + rng.uniform(-0.12, 0.12), 0.5 + rng.uniform(-0.12, 0.12)
    rx, ry = 0.22 + 0.1 * ((class_idx % 3) / 2), 0.22 + 0.1 * (((class_idx // 3) % 3) / 2)
    if class_idx % 2:
        body = (np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)
    else:
        body = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
    img = np.where(body[..., None], base, bg)
    motif = ((xx - cx) ** 2 + (yy - cy) ** 2) < (0.35 * min(rx, ry)) ** 2
    img = np.where(motif[..., None], np.asarray(OBJECT1_COLORS.get(object1, (255, 255, 255))), img)
    return img.round().astype(np.uint8)


def write_relation_dataset(out_dir, num_classes: int = 20, per_class: int = 3, size: int = 64,
                           seed: int = 0, object1s=tuple(OBJECT1_COLORS)) -> Manifest:
    """Images of "object1 painted on object2" for ``num_classes`` object2 classes."""
    if not 3 <= per_class <= 4:
        raise ValueError("per_class must be 3 or 4")
    out_dir = Path(out_dir)
    names = list(OBJECT2_NAMES[:num_classes]) + [f"thing{i}" for i in range(len(OBJECT2_NAMES), num_classes)]
    records = []
    for c, name in enumerate(names):
        for pose in range(per_class):
            object1 = object1s[(c + pose) % len(object1s)]
            rel = f"relation/{name}_{pose}.png"
            write_png(out_dir / rel, _object_image(c, object1, pose, size, seed))
            records.append(ManifestRecord(prompt=f"{object1} {PAINTED} on {name}", image=rel,
                                          object_class=name, split="train", object1=object1))
    manifest = Manifest(tuple(records), out_dir)
    save_manifest(manifest, out_dir / "relation.jsonl")
    return manifest
