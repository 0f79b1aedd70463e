"""Prompt- and identity-fidelity evaluation over a logo x context x seed grid.

* CLIP-T: cosine between the generated image and the context prompt, with
  the identity token replaced by the word "logo";
* CLIP-I / DINO: mean cosine between the generated image and the reference
  logo images under an image embedder (CLIP-like or self-supervised).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import IDENTITY, LogoAsset, seeded_rng, write_png
from .errors import DomainError, TemplateError
from .scheduler import cosine
from .synthesis import SCALE_RANGE, PlacementSpec, composite, solid_image, transform_logo

log = logging.getLogger(__name__)

METRICS = ("clip_t", "clip_i", "dino")

# Plausible everyday contexts; not the original evaluation prompts.
DEFAULT_CONTEXTS = (
    f"a photo of {IDENTITY} on a mug",
    f"a {IDENTITY} printed on a t-shirt",
    f"a {IDENTITY} on a baseball cap",
    f"a {IDENTITY} painted on a brick wall",
    f"a {IDENTITY} on a tote bag",
    f"a {IDENTITY} on the side of a delivery truck",
    f"a {IDENTITY} on a coffee cup",
    f"a {IDENTITY} on a laptop lid",
    f"a {IDENTITY} embroidered on a backpack",
    f"a {IDENTITY} on a billboard in a city",
    f"a {IDENTITY} on a water bottle",
    f"a {IDENTITY} on a shop sign",
    f"a {IDENTITY} on a pair of sneakers",
    f"a {IDENTITY} on a hoodie",
    f"a {IDENTITY} on a pillow",
    f"a {IDENTITY} on a cardboard box",
    f"a {IDENTITY} on a flag",
    f"a {IDENTITY} on a skateboard",
    f"a {IDENTITY} on a phone case",
    f"a {IDENTITY} on a notebook cover",
)


def _check_template(template: str) -> None:
    n = template.count(IDENTITY)
    if n != 1:
        raise TemplateError(f"context template must contain {IDENTITY} exactly once, found {n}: {template!r}")


def prompt_for_scoring(context_template: str) -> str:
    _check_template(context_template)
    return context_template.replace(IDENTITY, "logo")


def clip_t(image: np.ndarray, scoring_prompt: str, joint_embedder) -> float:
    return cosine(joint_embedder.embed_image(image), joint_embedder.embed_text(scoring_prompt))


def identity_score(generated: np.ndarray, references: Sequence[np.ndarray], image_embedder) -> float:
    """Mean cosine between the generated image and each reference."""
    if len(references) == 0:
        raise DomainError("need at least one reference image")
    g = image_embedder.embed_image(generated)
    sims = [cosine(g, image_embedder.embed_image(r)) for r in references]
    return math.fsum(sims) / len(sims)


def clip_i(generated: np.ndarray, references: Sequence[np.ndarray], image_embedder) -> float:
    return identity_score(generated, references, image_embedder)


def dino_i(generated: np.ndarray, references: Sequence[np.ndarray], image_embedder) -> float:
    return identity_score(generated, references, image_embedder)


def reference_image(logo: LogoAsset, size: int = 64, scale: float = 0.5) -> np.ndarray:
    """The logo alone, centered on white."""
    bg = solid_image((255, 255, 255), size)
    w, h = logo.size
    longest = round(scale * size)
    lw, lh = round(w * longest / max(w, h)), round(h * longest / max(w, h))
    placement = PlacementSpec(((size - lw) // 2, (size - lh) // 2), scale)
    return composite(logo, bg, placement).image


@dataclass(frozen=True, eq=False)
class LogoMatch:
    r: float
    placement: PlacementSpec
    mask: np.ndarray  # HxW bool, logo footprint at the matched placement


def logo_correlation(image: np.ndarray, logo: LogoAsset, scales: Optional[Sequence[float]] = None) -> LogoMatch:
    """Best correlation between ``image`` and the logo raster over unrotated placements.

    At each candidate scale and top-left position, Pearson's r is taken over
    the pixels of the logo's mask with every RGB channel centered on its own
    mean, so a flat patch scores 0 whatever its color and only the logo's
    internal pattern counts.
    """
    img = np.asarray(image, dtype=np.float64)[..., :3]
    H, W = img.shape[:2]
    scales = np.linspace(*SCALE_RANGE, 8) if scales is None else scales
    best: Optional[LogoMatch] = None
    for scale in scales:
        rgba = transform_logo(logo, float(scale), 0.0, min(H, W))
        m = rgba[..., 3] > 127
        h, w = m.shape
        if h > H or w > W or not m.any():
            continue
        ref = rgba[..., :3][m].astype(np.float64)
        ref -= ref.mean(axis=0)
        ref_norm = np.sqrt((ref ** 2).sum())
        win = np.lib.stride_tricks.sliding_window_view(img, (h, w, 3))[:, :, 0]  # [Y, X, h, w, 3]
        g = win[:, :, m, :]  # [Y, X, n, 3]
        g = g - g.mean(axis=2, keepdims=True)
        num = np.einsum("yxnc,nc->yx", g, ref)
        den = np.sqrt((g ** 2).sum(axis=(2, 3))) * ref_norm
        r = np.where(den > 1e-9, num / np.where(den > 1e-9, den, 1.0), 0.0)
        y, x = np.unravel_index(int(np.argmax(r)), r.shape)
        if best is None or r[y, x] > best.r:
            mask = np.zeros((H, W), dtype=bool)
            mask[y:y + h, x:x + w] = m
            best = LogoMatch(float(r[y, x]), PlacementSpec((int(x), int(y)), float(scale)), mask)
    if best is None:
        raise DomainError("logo does not fit in the image at any candidate scale")
    return best


@dataclass(frozen=True)
class EvalGrid:
    logos: tuple[str, ...]
    contexts: tuple[str, ...]
    seeds: tuple[int, ...]

    def __post_init__(self):
        if not self.logos or not self.contexts or not self.seeds:
            raise DomainError("evaluation grid needs at least one logo, context and seed")
        for c in self.contexts:
            _check_template(c)

    @property
    def size(self) -> int:
        return len(self.logos) * len(self.contexts) * len(self.seeds)


@dataclass(frozen=True)
class Embedders:
    joint: object  # image+text, CLIP-like
    clip_image: object  # image side used for CLIP-I
    dino_image: object


@dataclass
class FidelityReport:
    cells: list[dict]
    aggregates: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_cells(cls, cells: list[dict], metadata: Optional[dict] = None) -> "FidelityReport":
        report = cls(cells, {}, dict(metadata or {}))
        report.aggregates = aggregate(cells)
        return report

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        return {
            "cells": [{k: clean(v) for k, v in c.items()} for c in self.cells],
            "aggregates": {k: clean(v) for k, v in self.aggregates.items()},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FidelityReport":
        def restore(v):
            return float("nan") if v is None else v

        cells = [{k: (restore(v) if k in METRICS else v) for k, v in c.items()} for c in d["cells"]]
        aggs = {k: restore(v) for k, v in d["aggregates"].items()}
        return cls(cells, aggs, d.get("metadata", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "FidelityReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def render_table(self) -> str:
        n_ok = sum(all(math.isfinite(c[m]) for m in METRICS) for c in self.cells)
        lines = [
            "| metric | mean |",
            "|---|---|",
            *[f"| {m.upper().replace('_', '-')} | {self.aggregates.get(m, float('nan')):.4f} |" for m in METRICS],
            "",
            f"cells: {len(self.cells)} ({n_ok} scored, {self.metadata.get('failures', 0)} failed)",
        ]
        return "\n".join(lines) + "\n"


def aggregate(cells: Sequence[dict]) -> dict[str, float]:
    out = {}
    for m in METRICS:
        vals = [c[m] for c in cells if math.isfinite(c[m])]
        out[m] = math.fsum(vals) / len(vals) if vals else float("nan")
    return out


def run_grid(backend, grid: EvalGrid, embedders: Embedders, references: Mapping[str, Sequence[np.ndarray]],
             steps: Optional[int] = None, dump_dir=None, metadata: Optional[dict] = None) -> FidelityReport:
    """Generate and score one image per (logo, context, seed).

    ``backend`` is a single backend or a mapping from logo id to backend (one
    fine-tuned model per logo). Failed cells are kept as NaN and left out of
    the aggregates.
    """
    cells = []
    failures = 0
    for logo in grid.logos:
        model = backend[logo] if isinstance(backend, Mapping) else backend
        refs = references[logo]
        for ci, context in enumerate(grid.contexts):
            scoring = prompt_for_scoring(context)
            for seed in grid.seeds:
                cell = {"logo": logo, "context": context, "seed": int(seed)}
                try:
                    image = model.generate(context, steps, seeded_rng(seed, f"eval/{logo}/{context}"))
                    cell["clip_t"] = clip_t(image, scoring, embedders.joint)
                    cell["clip_i"] = clip_i(image, refs, embedders.clip_image)
                    cell["dino"] = dino_i(image, refs, embedders.dino_image)
                    if dump_dir is not None:
                        write_png(Path(dump_dir) / logo / f"ctx{ci:02d}_seed{seed}.png", image)
                except Exception as e:  # one bad cell must not sink the grid
                    failures += 1
                    log.warning("cell %s / %r / seed %s failed: %s", logo, context, seed, e)
                    for m in METRICS:
                        cell.setdefault(m, float("nan"))
                    cell["error"] = str(e)
                cells.append(cell)
    meta = dict(metadata or {})
    meta["failures"] = failures
    meta.setdefault("embedders", {k: getattr(getattr(embedders, k), "name", type(getattr(embedders, k)).__name__)
                                  for k in ("joint", "clip_image", "dino_image")})
    return FidelityReport.from_cells(cells, meta)
