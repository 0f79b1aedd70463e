"""Base pretraining for the toy backend.

A production backend starts from a text-to-image model that already ties
words to image regions. The toy backend gets the same starting point from a
short run on a procedural captioned corpus: colored shapes or blocky
two-tone badges on solid backgrounds (captioned with the background color or
just "plain") or on procedural scenes ("in a scene"). Colors are jittered
palette colors named by their nearest ``NAMED_COLORS`` entry. A fraction of
captions is dropped so the unconditional branch used by guidance is trained.

Pretrained weights are cached on disk keyed by a hash of everything that
determines them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..core import seeded_rng, torch_generator
from ..fixtures import make_scene
from ..synthesis import color_name, random_named_color
from . import load_checkpoint, save_checkpoint
from .toy import ARCH_VERSION, ToyBackend, ToyConfig, images_to_tensor

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "ring")
CORPUS_VERSION = 3
CAPTION_DROP = 0.1


def shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    d2 = dx * dx + dy * dy
    if shape == "circle":
        return d2 < r * r
    if shape == "square":
        return (np.abs(dx) < r) & (np.abs(dy) < r)
    if shape == "triangle":
        return (dy < r) & (dy > -r) & (np.abs(dx) < (dy + r) / 2)
    if shape == "ring":
        return (d2 < r * r) & (d2 > (0.5 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _distinct_color(rng, *others):
    while True:
        c = random_named_color(rng)
        if color_name(c) not in {color_name(o) for o in others}:
            return c


def badge_mask(rng: np.random.Generator, size: int, x0: int, y0: int, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Footprint and first-color cells of a random 4x4 two-tone code."""
    cells = (rng.permutation(16) < 8).reshape(4, 4)
    yy, xx = np.mgrid[0:size, 0:size]
    inside = (xx >= x0) & (xx < x0 + side) & (yy >= y0) & (yy < y0 + side)
    ci = np.clip((yy - y0) * 4 // side, 0, 3)
    cj = np.clip((xx - x0) * 4 // side, 0, 3)
    return inside, inside & cells[ci, cj]


def corpus_sample(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, str]:
    kind = rng.choice(["named", "plain", "scene"], p=[0.5, 0.25, 0.25])
    img = np.empty((size, size, 3), dtype=np.uint8)
    if kind == "scene":
        img[:] = make_scene(size, int(rng.integers(2 ** 31)), rng.choice(["mixed", "bright", "dark"]))
        bg = img.reshape(-1, 3).mean(axis=0)
        where = "in a scene"
    else:
        bg = random_named_color(rng)
        img[:] = bg
        where = f"on a {color_name(bg) if kind == 'named' else 'plain'} background"
    fg = _distinct_color(rng, bg)
    if rng.random() < 0.3:
        fg2 = _distinct_color(rng, bg, fg)
        side = int(rng.integers(int(0.25 * size), int(0.6 * size) + 1))
        x0, y0 = rng.integers(1, size - side, size=2)
        inside, first = badge_mask(rng, size, x0, y0, side)
        img[inside] = fg2
        img[first] = fg
        what = f"{color_name(fg)} and {color_name(fg2)} badge"
    else:
        shape = SHAPES[rng.integers(len(SHAPES))]
        r = rng.uniform(0.12, 0.3) * size
        cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
        img[shape_mask(shape, size, cx, cy, r)] = fg
        what = f"{color_name(fg)} {shape}"
    caption = "" if rng.random() < CAPTION_DROP else f"a {what} {where}"
    return img, caption


def pretrain_base(backend: ToyBackend, steps: int, batch_size: int, lr: float, rng: np.random.Generator,
                  on_iteration: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Adam over every parameter on the procedural corpus; returns per-step losses."""
    from ..trainer import draw_noise, ldm_loss

    size = backend.config.image_size
    gen = torch_generator(rng)
    opt = torch.optim.Adam(backend.parameters(), lr=lr)
    losses = []
    for it in range(steps):
        batch = [corpus_sample(rng, size) for _ in range(batch_size)]
        x = images_to_tensor(np.stack([img for img, _ in batch]))
        t, eps = draw_noise(backend, x, gen)
        loss = ldm_loss(backend, x, [cap for _, cap in batch], t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if on_iteration is not None:
            on_iteration(it, losses[-1])
    return losses


def default_cache_dir() -> Path:
    return Path(os.environ.get("LOGOINSERT_CACHE", Path.home() / ".cache" / "logoinsert"))


def base_key(config: ToyConfig, steps: int, batch_size: int, lr: float, seed: int) -> str:
    cfg = ToyBackend(config).config_dict()
    blob = json.dumps({"config": cfg, "steps": steps, "batch_size": batch_size, "lr": lr, "seed": seed,
                       "corpus": CORPUS_VERSION, "arch": ARCH_VERSION}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def pretrained_toy(config: Optional[ToyConfig] = None, steps: int = 6000, batch_size: int = 16, lr: float = 2e-3,
                   seed: int = 0, cache_dir=None) -> ToyBackend:
    """Pretrained toy backend, loaded from cache when available."""
    config = config or ToyConfig()
    if config.special_tokens:
        raise ValueError("pretrain before registering special tokens")
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = cache / f"toy-base-{base_key(config, steps, batch_size, lr, seed)}"
    if (path / "manifest.json").exists():
        backend, _ = load_checkpoint(path)
        backend.meta = {}
        return backend
    backend = ToyBackend(config)
    t0 = time.time()
    losses = pretrain_base(backend, steps, batch_size, lr, seeded_rng(seed, "toy-base"))
    log.info("toy base pretraining: %d steps, final loss %.4f, %.0fs", steps, np.mean(losses[-100:]),
             time.time() - t0)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    save_checkpoint(backend, tmp, meta={"base_pretraining": {"steps": steps, "final_loss": float(np.mean(losses[-100:]))}})
    if path.exists():  # another process won the race
        shutil.rmtree(tmp)
    else:
        tmp.replace(path)
    backend.meta = {}
    return backend
