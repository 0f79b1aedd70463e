"""Cross-attention maps for one prompt token over a real image.

The image is noised directly to a few timesteps with one fixed noise draw,
passed once through the denoiser at each, and every cross-attention layer's
map for the token is collected. Averaging over layers and timesteps gives a
single spatial map; ``localization_score`` is the share of that map's mass
falling inside the logo mask.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backend import noise_latent
from .core import torch_generator
from .errors import CapabilityError, DomainError, TokenResolutionError

DEFAULT_TIMESTEP_FRACTIONS = (0.2, 0.5, 0.8)


@dataclass(frozen=True, eq=False)
class AttentionStack:
    maps: tuple[np.ndarray, ...]  # each 2D, nonnegative, sums to 1
    token: str
    keys: tuple[tuple[int, int], ...] = ()  # (layer, timestep) per map
    source_image: Optional[str] = field(default=None)

    def __len__(self) -> int:
        return len(self.maps)


def default_timesteps(num_steps: int, fractions=DEFAULT_TIMESTEP_FRACTIONS) -> list[int]:
    return [min(num_steps - 1, int(round(f * num_steps))) for f in fractions]


def token_positions(backend, prompt: str, token: str) -> list[int]:
    """Sequence positions covered by ``token``, which must occur exactly once.

    ``token`` is either a single vocabulary item (e.g. a special literal) or a
    whitespace-delimited word spanning several tokens.
    """
    pieces = backend.token_pieces(prompt)
    if backend.has_token(token):
        exact = [i for i, p in enumerate(pieces) if p == token]
        if len(exact) != 1:
            raise TokenResolutionError(f"token {token!r} occurs {len(exact)} times in {prompt!r}; need exactly one")
        return exact

    hits = [m.span() for m in re.finditer(rf"(?<!\S){re.escape(token)}(?!\S)", prompt)]
    if len(hits) != 1:
        raise TokenResolutionError(f"word {token!r} occurs {len(hits)} times in {prompt!r}; need exactly one")
    start, end = hits[0]
    # char span of each piece; markers such as BOS that are not in the text get an empty span
    spans, pos = [], 0
    for p in pieces:
        at = prompt.find(p, pos)
        if at < 0:
            spans.append((pos, pos))
        else:
            spans.append((at, at + len(p)))
            pos = at + len(p)
    positions = [i for i, (a, b) in enumerate(spans) if b > a and a >= start and b <= end]
    if not positions:
        raise TokenResolutionError(f"could not locate {token!r} in the tokenization of {prompt!r}")
    return positions


def _layer_map(probs: torch.Tensor, positions: Sequence[int], out_hw: tuple[int, int]) -> np.ndarray:
    # probs: [HW, L] for one item; softmax is over tokens, so a token's column is its spatial map
    hw = probs.shape[0]
    side = int(math.isqrt(hw))
    m = probs[:, list(positions)].sum(dim=1).reshape(1, 1, side, side)
    if (side, side) != out_hw:
        m = F.interpolate(m, size=out_hw, mode="bilinear", align_corners=False)
    m = m[0, 0].clamp_min(0).double().numpy()
    total = m.sum()
    if total <= 0:
        return np.full(out_hw, 1.0 / (out_hw[0] * out_hw[1]))
    return m / total


@torch.no_grad()
def token_attention(backend, image: np.ndarray, prompt: str, token: str,
                    timesteps: Optional[Sequence[int]] = None, rng: Optional[np.random.Generator] = None,
                    source: Optional[str] = None) -> AttentionStack:
    if not getattr(backend, "supports_attention", False):
        raise CapabilityError("backend does not expose cross-attention maps")
    positions = token_positions(backend, prompt, token)
    timesteps = list(timesteps) if timesteps is not None else default_timesteps(backend.schedule.num_steps)
    rng = rng if rng is not None else np.random.default_rng(0)

    arr = np.asarray(image, dtype=np.float64)[..., :3] / 255.0
    x = torch.from_numpy(arr).permute(2, 0, 1)[None].contiguous()
    z = backend.encode_images(x)
    eps = torch.randn(z.shape, generator=torch_generator(rng), dtype=z.dtype)
    cond = backend.encode_text([prompt])
    out_hw = tuple(z.shape[-2:])

    maps, keys = [], []
    for t in timesteps:
        z_t = noise_latent(z, t, eps, backend.schedule)
        _, attns = backend.denoise(z_t, t, cond, return_attention=True)
        for layer, probs in enumerate(attns):
            maps.append(_layer_map(probs[0], positions, out_hw))
            keys.append((layer, int(t)))
    return AttentionStack(tuple(maps), token, tuple(keys), source)


def average_map(stack: AttentionStack) -> np.ndarray:
    """Unweighted mean over all (layer, timestep) maps."""
    if len(stack) == 0:
        raise DomainError("empty attention stack")
    return np.mean(np.stack(stack.maps), axis=0)


def _resize_map(avg_map: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = avg_map.shape
    H, W = shape
    if (h, w) == (H, W):
        return avg_map
    if H % h == 0 and W % w == 0:
        # block replication preserves mass exactly
        return np.kron(avg_map, np.ones((H // h, W // w))) / ((H // h) * (W // w))
    up = np.asarray(Image.fromarray(avg_map.astype(np.float32), mode="F").resize((W, H), Image.BILINEAR),
                    dtype=np.float64)
    up = np.clip(up, 0, None)
    return up * (avg_map.sum() / up.sum()) if up.sum() > 0 else up


def localization_score(avg_map: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of attention mass inside ``mask``."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise DomainError("empty mask")
    m = _resize_map(np.asarray(avg_map, dtype=np.float64), mask.shape)
    total = m.sum()
    if total <= 0:
        raise DomainError("attention map has no mass")
    return float(np.clip(m[mask].sum() / total, 0.0, 1.0))


def overlay(image: np.ndarray, avg_map: np.ndarray, alpha: float = 0.55) -> np.ndarray:
    """Heatmap of ``avg_map`` blended over ``image`` (uint8 RGB)."""
    from matplotlib import colormaps

    img = np.asarray(image, dtype=np.float64)[..., :3] / 255.0
    m = _resize_map(np.asarray(avg_map, dtype=np.float64), img.shape[:2])
    m = (m - m.min()) / (m.max() - m.min() + 1e-12)
    heat = colormaps["jet"](m)[..., :3]
    return ((1 - alpha) * img * 255 + alpha * heat * 255).round().clip(0, 255).astype(np.uint8)
