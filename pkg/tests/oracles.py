"""Independent reference computations used to check the package.

Nothing here imports the code under test; each oracle re-derives its answer
from first principles (high-precision decimals, explicit loops, alternative
summation orders).
"""

from __future__ import annotations

import math
from decimal import Decimal, getcontext

import numpy as np


def recalibrate_decimal(scores: dict, lam, prec: int = 50) -> tuple[dict, dict]:
    """Weights and probabilities at ``prec`` significant digits."""
    getcontext().prec = prec
    s = {k: Decimal(str(v)) for k, v in scores.items()}
    mean = sum(s.values()) / len(s)
    ln_lam = Decimal(str(lam)).ln()
    w = {k: (ln_lam * (mean - v)).exp() for k, v in s.items()}
    total = sum(w.values())
    return w, {k: wk / total for k, wk in w.items()}


def srgb_channel_to_linear(c: float) -> float:
    c = c / 255.0
    return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4


def luminance_u8(rgb) -> float:
    r, g, b = (srgb_channel_to_linear(float(v)) for v in rgb[:3])
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


def source_over_u8(fg, bg, alpha_u8) -> np.ndarray:
    """Float source-over, rounded to nearest."""
    a = np.asarray(alpha_u8, dtype=np.float64)[..., None] / 255.0
    return np.rint(a * np.asarray(fg, np.float64) + (1 - a) * np.asarray(bg, np.float64))


def mean_reversed(rasters) -> np.ndarray:
    """Element-wise mean with exactly rounded summation in reverse order."""
    rasters = [np.asarray(r, dtype=np.float64) for r in rasters][::-1]
    out = np.empty_like(rasters[0])
    for idx in np.ndindex(out.shape):
        out[idx] = math.fsum(r[idx] for r in rasters) / len(rasters)
    return out


def central_difference(f, x: float, h: float) -> float:
    return (f(x + h) - f(x - h)) / (2 * h)


def richardson_central_difference(f, x: float, h: float) -> float:
    """Central differences at h and h/2 combined so the h^2 error term cancels (error O(h^4))."""
    return (4 * central_difference(f, x, h / 2) - central_difference(f, x, h)) / 3


def binomial_tail_ge(k: int, n: int, p: float = 0.5) -> float:
    """P[X >= k] for X ~ Binomial(n, p), exact."""
    return sum(math.comb(n, i) * p ** i * (1 - p) ** (n - i) for i in range(k, n + 1))


def feasible_luminance_band(logo_lum: float, threshold: float) -> tuple[float, float]:
    """Luminances L with |L - logo_lum| >= threshold are those <= lo or >= hi."""
    return logo_lum - threshold, logo_lum + threshold


def pearson_masked_centered(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Pearson r over masked pixels with each channel centered separately."""
    x = a[mask].astype(np.float64)
    y = b[mask].astype(np.float64)
    x -= x.mean(axis=0)
    y -= y.mean(axis=0)
    den = math.sqrt((x * x).sum() * (y * y).sum())
    return 0.0 if den == 0 else float((x * y).sum() / den)
