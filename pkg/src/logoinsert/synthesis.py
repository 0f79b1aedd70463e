"""Synthetic training sets built by pasting a logo onto backgrounds.

Two sets are produced for each logo:

* the token-binding set: logo on a plain, contrasting solid color;
* the identity set: logo on natural scenes, at spots whose local luminance
  contrasts with the logo.

All pixel work is on uint8 rasters. Where the transformed logo alpha is 255
the output pixel is the logo pixel, bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .core import (
    IDENTITY,
    LogoAsset,
    Manifest,
    ManifestRecord,
    read_rgb,
    relative_luminance,
    save_manifest,
    seeded_rng,
    spawn_seed,
    srgb_to_linear,
    write_png,
)
from .errors import ContrastError, DomainError, PlacementError, ScaleError

DEFAULT_THRESHOLD = 0.35
MAX_PROPOSALS = 1000
MIN_LOGO_SIDE = 8
MARGIN_FRACTION = 0.02
PATCH_DILATION = 0.10
SCALE_RANGE = (0.25, 0.6)
IDENTITY_ROTATION = 15.0

BINDING_TEMPLATE = f"a {IDENTITY} on a {{color}} background"  # {color}: nearest named color

# Coarse color vocabulary for captions (sRGB). Binding captions name the
# background so the background is explained by ordinary words.
NAMED_COLORS = {
    "red": (220, 30, 30), "orange": (245, 140, 20), "yellow": (240, 220, 30), "lime": (150, 230, 40),
    "green": (30, 150, 40), "teal": (0, 128, 128), "cyan": (40, 220, 230), "blue": (30, 60, 220),
    "navy": (20, 30, 110), "purple": (130, 40, 170), "magenta": (230, 40, 200), "pink": (245, 160, 190),
    "brown": (130, 80, 30), "white": (245, 245, 245), "gray": (128, 128, 128), "black": (15, 15, 15),
}
COLOR_JITTER = 20  # per-channel, uniform
_NAMES = tuple(NAMED_COLORS)
_PALETTE = np.array([NAMED_COLORS[n] for n in _NAMES], dtype=np.float64)
IDENTITY_TEMPLATE = f"a {IDENTITY} in a scene"


class BackgroundKind(str, enum.Enum):
    solid = "solid"
    natural = "natural"


@dataclass(frozen=True)
class PlacementSpec:
    top_left: tuple[int, int]  # (x, y)
    scale: float  # logo longest side / background shortest side
    rotation_deg: float = 0.0

    def to_dict(self) -> dict:
        return {"top_left": list(self.top_left), "scale": self.scale, "rotation_deg": self.rotation_deg}

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementSpec":
        return cls(tuple(int(v) for v in d["top_left"]), float(d["scale"]), float(d.get("rotation_deg", 0.0)))


@dataclass(frozen=True, eq=False)
class CompositeSample:
    image: np.ndarray  # HxWx3 uint8
    mask: np.ndarray  # HxW bool
    placement: PlacementSpec
    background_kind: BackgroundKind
    prompt: str
    logo_id: str
    logo_raster: Optional[np.ndarray] = field(default=None, repr=False)  # transformed RGBA actually pasted


# ----------------------------------------------------------------------------
# Contrast

def luminance_of_srgb(rgb_u8) -> float | np.ndarray:
    """Relative luminance of sRGB uint8 color(s)."""
    return relative_luminance(srgb_to_linear(np.asarray(rgb_u8, dtype=np.float64) / 255.0))


def contrasts(bg_luminance: float, logo: LogoAsset, threshold: float = DEFAULT_THRESHOLD) -> bool:
    return abs(float(bg_luminance) - float(relative_luminance(logo.mean_color))) >= threshold


def color_name(rgb_u8) -> str:
    """Nearest entry of NAMED_COLORS (Euclidean in sRGB)."""
    d = ((_PALETTE - np.asarray(rgb_u8, dtype=np.float64)[:3]) ** 2).sum(axis=1)
    return _NAMES[int(np.argmin(d))]


def random_named_color(rng: np.random.Generator) -> np.ndarray:
    """A palette color with per-channel jitter."""
    base = _PALETTE[rng.integers(len(_NAMES))]
    return np.clip(base + rng.integers(-COLOR_JITTER, COLOR_JITTER + 1, size=3), 0, 255).astype(np.int64)


def pick_solid_background(logo: LogoAsset, rng: np.random.Generator,
                          threshold: float = DEFAULT_THRESHOLD) -> tuple[int, int, int]:
    """Rejection-sample a jittered palette color whose luminance differs from the logo's by ``threshold``."""
    for _ in range(MAX_PROPOSALS):
        color = random_named_color(rng)
        if contrasts(luminance_of_srgb(color), logo, threshold):
            return tuple(int(c) for c in color)
    raise ContrastError(
        f"no background color contrasting with logo {logo.id!r} after {MAX_PROPOSALS} proposals; "
        f"relax the contrast threshold (currently {threshold})"
    )


# ----------------------------------------------------------------------------
# Placement and compositing

def margin_px(bg_h: int, bg_w: int) -> int:
    return math.ceil(MARGIN_FRACTION * min(bg_h, bg_w))


def transform_logo(logo: LogoAsset, scale: float, rotation_deg: float, bg_short: int) -> np.ndarray:
    """Scale (bilinear RGB, nearest alpha) and rotate the logo; returns RGBA uint8."""
    if not 0 < scale <= 1:
        raise ScaleError(f"scale must lie in (0, 1], got {scale}")
    w, h = logo.size
    longest = max(w, h)
    target = max(1, round(scale * bg_short))
    new_w = max(1, round(w * target / longest))
    new_h = max(1, round(h * target / longest))
    if min(new_w, new_h) < MIN_LOGO_SIDE:
        raise ScaleError(f"scaled logo is {new_w}x{new_h}px; each side must be at least {MIN_LOGO_SIDE}px")

    rgb = Image.fromarray(logo.image[..., :3])
    alpha = Image.fromarray(logo.image[..., 3])
    if (new_w, new_h) != (w, h):
        rgb = rgb.resize((new_w, new_h), Image.BILINEAR)
        alpha = alpha.resize((new_w, new_h), Image.NEAREST)
    if rotation_deg:
        rgb = rgb.rotate(rotation_deg, resample=Image.BILINEAR, expand=True)
        alpha = alpha.rotate(rotation_deg, resample=Image.NEAREST, expand=True, fillcolor=0)
    out = np.dstack([np.asarray(rgb), np.asarray(alpha)]).astype(np.uint8)
    return out


def check_placement(box_w: int, box_h: int, top_left, bg_h: int, bg_w: int) -> None:
    m = margin_px(bg_h, bg_w)
    x, y = top_left
    if x < m or y < m or x + box_w > bg_w - m or y + box_h > bg_h - m:
        raise PlacementError(
            f"logo box {box_w}x{box_h} at (x={x}, y={y}) leaves less than the {m}px margin "
            f"inside a {bg_w}x{bg_h} background"
        )


def composite(logo: LogoAsset, background: np.ndarray, placement: PlacementSpec,
              background_kind: BackgroundKind = BackgroundKind.natural, prompt: str = "") -> CompositeSample:
    """Source-over paste of the transformed logo at ``placement.top_left``."""
    bg = np.asarray(background)
    if bg.ndim != 3 or bg.shape[2] != 3 or bg.dtype != np.uint8:
        raise DomainError("background must be an HxWx3 uint8 raster")
    bg_h, bg_w = bg.shape[:2]
    raster = transform_logo(logo, placement.scale, placement.rotation_deg, min(bg_h, bg_w))
    lh, lw = raster.shape[:2]
    check_placement(lw, lh, placement.top_left, bg_h, bg_w)

    x, y = placement.top_left
    out = bg.copy()
    region = out[y:y + lh, x:x + lw].astype(np.uint16)
    a = raster[..., 3:4].astype(np.uint16)
    fg = raster[..., :3].astype(np.uint16)
    blended = (a * fg + (255 - a) * region + 127) // 255
    # exact at the extremes; the integer blend already gives this, kept explicit
    blended = np.where(a == 255, fg, np.where(a == 0, region, blended))
    out[y:y + lh, x:x + lw] = blended.astype(np.uint8)

    mask = np.zeros((bg_h, bg_w), dtype=bool)
    mask[y:y + lh, x:x + lw] = raster[..., 3] > 127
    if not mask.any():
        raise PlacementError(f"logo {logo.id!r} is fully transparent after transformation; mask is empty")
    return CompositeSample(out, mask, placement, BackgroundKind(background_kind), prompt, logo.id, raster)


def transformed_size(logo: LogoAsset, scale: float, rotation_deg: float, bg_short: int) -> tuple[int, int]:
    r = transform_logo(logo, scale, rotation_deg, bg_short)
    return r.shape[1], r.shape[0]


def propose_placement(logo: LogoAsset, bg_h: int, bg_w: int, rng: np.random.Generator,
                      rotation_range: float = 0.0, scale_range=SCALE_RANGE) -> PlacementSpec:
    """Random scale/rotation, then a top-left uniform over the feasible region."""
    m = margin_px(bg_h, bg_w)
    short = min(bg_h, bg_w)
    for _ in range(MAX_PROPOSALS):
        scale = float(rng.uniform(*scale_range))
        rot = float(rng.uniform(-rotation_range, rotation_range)) if rotation_range else 0.0
        try:
            lw, lh = transformed_size(logo, scale, rot, short)
        except ScaleError:  # too small at this scale; draw again
            continue
        max_x, max_y = bg_w - m - lw, bg_h - m - lh
        if max_x < m or max_y < m:
            continue
        x = int(rng.integers(m, max_x + 1))
        y = int(rng.integers(m, max_y + 1))
        return PlacementSpec((x, y), scale, rot)
    raise PlacementError(f"logo {logo.id!r} does not fit a {bg_w}x{bg_h} background at any sampled scale")


def patch_luminance(image: np.ndarray, placement: PlacementSpec, box: tuple[int, int]) -> float:
    """Mean linear-light luminance of the placement box dilated by 10%."""
    h, w = image.shape[:2]
    lw, lh = box
    dx, dy = PATCH_DILATION * lw / 2, PATCH_DILATION * lh / 2
    x0 = max(0, math.floor(placement.top_left[0] - dx))
    y0 = max(0, math.floor(placement.top_left[1] - dy))
    x1 = min(w, math.ceil(placement.top_left[0] + lw + dx))
    y1 = min(h, math.ceil(placement.top_left[1] + lh + dy))
    patch = srgb_to_linear(image[y0:y1, x0:x1] / 255.0)
    return float(relative_luminance(patch.reshape(-1, 3).mean(axis=0)))


# ----------------------------------------------------------------------------
# Dataset builders

def solid_image(color, size: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(color, dtype=np.uint8), (size, size, 3)).copy()


def binding_sample(logo: LogoAsset, seed: int, index: int, size: int = 64,
                   threshold: float = DEFAULT_THRESHOLD, template: str = BINDING_TEMPLATE) -> CompositeSample:
    rng = seeded_rng(seed, f"binding/{logo.id}/{index}")
    color = pick_solid_background(logo, rng, threshold)
    placement = propose_placement(logo, size, size, rng)
    prompt = template.format(color=color_name(color))
    return composite(logo, solid_image(color, size), placement, BackgroundKind.solid, prompt)


def build_binding_set(logo: LogoAsset, count: int, rng: np.random.Generator, size: int = 64,
                      threshold: float = DEFAULT_THRESHOLD, template: str = BINDING_TEMPLATE) -> list[CompositeSample]:
    """Logo on ``count`` contrasting solid backgrounds."""
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    if IDENTITY not in template:
        raise DomainError(f"binding template must contain {IDENTITY}: {template!r}")
    seed = spawn_seed(rng)
    return [binding_sample(logo, seed, i, size, threshold, template) for i in range(count)]


def _scene_order(n_scenes: int, count: int, rng: np.random.Generator) -> list[int]:
    # Stratified: consecutive random permutations, so every scene is used
    # once before any is reused.
    order: list[int] = []
    while len(order) < count:
        order.extend(int(i) for i in rng.permutation(n_scenes))
    return order[:count]


def identity_sample(logo: LogoAsset, scene: np.ndarray, seed: int, index: int,
                    threshold: float = DEFAULT_THRESHOLD, prompt: str = IDENTITY_TEMPLATE) -> Optional[CompositeSample]:
    """Rejection-sample a contrasting placement on ``scene``; None if none is found."""
    rng = seeded_rng(seed, f"identity/{logo.id}/{index}")
    h, w = scene.shape[:2]
    for _ in range(MAX_PROPOSALS):
        placement = propose_placement(logo, h, w, rng, rotation_range=IDENTITY_ROTATION)
        box = transformed_size(logo, placement.scale, placement.rotation_deg, min(h, w))
        if contrasts(patch_luminance(scene, placement, box), logo, threshold):
            return composite(logo, scene, placement, BackgroundKind.natural, prompt)
    return None


def build_identity_set(logo: LogoAsset, scenes: Sequence, count: int, rng: np.random.Generator,
                       threshold: float = DEFAULT_THRESHOLD, size: Optional[int] = None) -> list[CompositeSample]:
    """Logo pasted at contrasting spots of natural scenes.

    ``scenes`` are image paths or HxWx3 uint8 arrays. With ``size`` set, scenes
    are center-cropped and resized to ``size`` x ``size`` first.
    """
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    if len(scenes) < 1:
        raise DomainError("need at least one scene")
    names = [str(s) if not isinstance(s, np.ndarray) else f"scene[{i}]" for i, s in enumerate(scenes)]
    images = [prepare_scene(s, size) for s in scenes]
    seed = spawn_seed(rng)
    order = _scene_order(len(images), count, rng)

    infeasible: set[int] = set()
    samples = []
    for i, first in enumerate(order):
        sample = None
        # fall back to the other scenes, in a fixed rotation, if the drawn one has no contrasting spot
        for k in range(len(images)):
            j = (first + k) % len(images)
            if j in infeasible:
                continue
            sample = identity_sample(logo, images[j], seed, i * len(images) + j, threshold)
            if sample is not None:
                break
            infeasible.add(j)
        if sample is None:
            raise ContrastError(
                f"no placement contrasting with logo {logo.id!r} on any scene: {', '.join(names)}"
            )
        samples.append(sample)
    return samples


def prepare_scene(scene, size: Optional[int] = None) -> np.ndarray:
    img = scene if isinstance(scene, np.ndarray) else read_rgb(scene)
    if size is None:
        return np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    s = min(h, w)
    y0, x0 = (h - s) // 2, (w - s) // 2
    crop = Image.fromarray(np.asarray(img[y0:y0 + s, x0:x0 + s], dtype=np.uint8))
    if s != size:
        crop = crop.resize((size, size), Image.BILINEAR)
    return np.asarray(crop, dtype=np.uint8)


def write_samples(samples: Sequence[CompositeSample], out_dir, name: str) -> Manifest:
    """Write images, masks and a manifest ``<name>.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / name
    records = []
    for i, s in enumerate(samples):
        img_rel = f"{name}/{i:04d}.png"
        mask_rel = f"{name}/{i:04d}_mask.png"
        write_png(out_dir / img_rel, s.image)
        write_png(out_dir / mask_rel, s.mask.astype(np.uint8) * 255)
        records.append(ManifestRecord(
            prompt=s.prompt,
            image=img_rel,
            object_class=s.logo_id,
            split=name,
            mask=mask_rel,
            logo_id=s.logo_id,
            background_kind=s.background_kind.value,
            placement=s.placement.to_dict(),
        ))
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(tuple(records), out_dir)
    save_manifest(manifest, out_dir / f"{name}.jsonl")
    return manifest
