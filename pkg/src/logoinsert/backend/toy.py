"""Desk-scale latent diffusion stack used for tests and the toy pipeline.

* tokenizer: words hashed into a fixed bucket table plus registered ``<...>``
  literals, with a leading BOS token;
* text encoder: embedding lookup, one dense layer (tanh), mean-pool;
* latent codec: 4x average pooling and a fixed orthonormal 3->4 channel map;
* denoiser: a small two-level U-Net with the timestep embedding added at the
  first two levels and a single-head cross-attention block, added
  residually, at each of the three resolutions. Text reaches the denoiser
  only through cross-attention, so attention maps carry the text-image
  binding.

Everything runs in float64 so finite-difference checks are meaningful.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import SpecialToken, TokenRole, seeded_rng, torch_generator
from ..errors import RegistrationError, ShapeError, TokenizationError
from . import InitKind, NoiseSchedule, TextConditioning, TokenInit

DTYPE = torch.float64
BOS = "<|bos|>"
SPECIAL_RE = re.compile(r"<[^<>\s]+>")
PIECE_RE = re.compile(r"<[^<>\s]+>|[A-Za-z0-9'-]+|[^\sA-Za-z0-9]")
DOWNSAMPLE = 4
LATENT_CHANNELS = 4
ARCH_VERSION = 2  # bump when parameter layout or forward pass changes


@dataclass
class ToyConfig:
    image_size: int = 64
    embed_dim: int = 32
    hidden: int = 32
    attn_dim: int = 16
    num_train_timesteps: int = 1000
    sample_steps: int = 50
    guidance_scale: float = 1.0
    init_seed: int = 0
    vocab_buckets: int = 256
    special_tokens: list = field(default_factory=list)  # [[literal, role], ...] in registration order

    @property
    def latent_size(self) -> int:
        return self.image_size // DOWNSAMPLE


class ToyTokenizer:
    """Word-level tokenizer: words hash into a fixed bucket table, ``<...>`` literals get their own rows."""

    def __init__(self, buckets: int = 512):
        self.buckets = buckets
        self.vocab: dict[str, int] = {BOS: 0}  # BOS and registered literals only
        self.special: dict[str, int] = {}

    def __len__(self) -> int:
        return 1 + self.buckets + len(self.special)

    def __contains__(self, literal: str) -> bool:
        return literal in self.vocab

    def add(self, literal: str) -> int:
        if literal in self.vocab:
            raise RegistrationError(f"token {literal!r} is already in the vocabulary")
        idx = len(self)
        self.vocab[literal] = idx
        self.special[literal] = idx
        return idx

    def word_id(self, word: str) -> int:
        h = hashlib.sha256(word.lower().encode("utf-8")).digest()
        return 1 + int.from_bytes(h[:8], "little") % self.buckets

    def pieces(self, text: str) -> list[str]:
        """Split into token strings (without BOS)."""
        out = PIECE_RE.findall(text)
        for p in out:
            if p.startswith("<") and len(p) > 1 and p not in self.special:
                raise TokenizationError(f"unknown special token {p!r} in prompt {text!r}")
        return out

    def encode(self, text: str) -> list[int]:
        return [0] + [self.special[p] if p in self.special else self.word_id(p) for p in self.pieces(text)]


def _sinusoidal(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.token_embedding = nn.Parameter(torch.randn(vocab_size, dim, dtype=DTYPE) * 0.5)
        self.dense = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> TextConditioning:
        e = self.token_embedding[ids]
        states = torch.tanh(self.dense(e))
        m = mask.to(DTYPE)[..., None]
        pooled = (states * m).sum(1) / m.sum(1)
        return TextConditioning(states, mask, pooled)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, text_dim: int, attn_dim: int):
        super().__init__()
        self.to_q = nn.Conv2d(channels, attn_dim, 1, bias=False, dtype=DTYPE)
        self.to_k = nn.Linear(text_dim, attn_dim, bias=False, dtype=DTYPE)
        self.to_v = nn.Linear(text_dim, channels, bias=False, dtype=DTYPE)
        self.scale = attn_dim ** -0.5

    def forward(self, h: torch.Tensor, cond: TextConditioning):
        b, c, hh, ww = h.shape
        q = self.to_q(h).flatten(2).transpose(1, 2)  # [B, HW, A]
        k = self.to_k(cond.states)  # [B, L, A]
        v = self.to_v(cond.states)  # [B, L, C]
        logits = torch.einsum("bpa,bla->bpl", q, k) * self.scale
        logits = logits.masked_fill(~cond.mask[:, None, :], float("-inf"))
        probs = logits.softmax(dim=-1)  # over tokens
        out = torch.einsum("bpl,blc->bpc", probs, v).transpose(1, 2).reshape(b, c, hh, ww)
        return h + out, probs


class Denoiser(nn.Module):
    """Small U-Net over the latent grid: 16 -> 8 -> 4 -> 8 -> 16 (for 64px images).

    Cross-attention follows the first convolution at each of the three
    resolutions on the way down.
    """

    def __init__(self, hidden: int, text_dim: int, attn_dim: int, latent_size: int):
        super().__init__()
        self.hidden = hidden
        c = hidden
        self.conv_in = nn.Conv2d(LATENT_CHANNELS + 2, c, 3, padding=1, dtype=DTYPE)
        self.down1 = nn.Conv2d(c, c, 3, padding=1, dtype=DTYPE)
        self.down2 = nn.Conv2d(c, c, 3, padding=1, dtype=DTYPE)
        self.up1 = nn.Conv2d(2 * c, c, 3, padding=1, dtype=DTYPE)
        self.up2 = nn.Conv2d(2 * c, c, 3, padding=1, dtype=DTYPE)
        self.conv_out = nn.Conv2d(c, LATENT_CHANNELS, 3, padding=1, dtype=DTYPE)
        self.time_in = nn.Linear(c, c, dtype=DTYPE)
        self.time_mid = nn.Linear(c, c, dtype=DTYPE)
        self.attn1 = CrossAttention(c, text_dim, attn_dim)
        self.attn2 = CrossAttention(c, text_dim, attn_dim)
        self.attn3 = CrossAttention(c, text_dim, attn_dim)
        ys, xs = torch.meshgrid(torch.linspace(-1, 1, latent_size, dtype=DTYPE),
                                torch.linspace(-1, 1, latent_size, dtype=DTYPE), indexing="ij")
        self.register_buffer("coords", torch.stack([xs, ys])[None], persistent=False)

    @property
    def attention_layers(self) -> tuple[CrossAttention, ...]:
        return (self.attn1, self.attn2, self.attn3)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: TextConditioning, return_attention: bool = False):
        b = z_t.shape[0]
        temb = _sinusoidal(t.reshape(-1).expand(b) if t.numel() == 1 else t.reshape(-1), self.hidden)
        x = torch.cat([z_t, self.coords.expand(b, -1, -1, -1)], dim=1)
        h1 = F.silu(self.conv_in(x) + self.time_in(temb)[..., None, None])
        h1, a1 = self.attn1(h1, cond)
        h2 = F.silu(self.down1(F.avg_pool2d(h1, 2)) + self.time_mid(temb)[..., None, None])
        h2, a2 = self.attn2(h2, cond)
        h3 = F.silu(self.down2(F.avg_pool2d(h2, 2)))
        h3, a3 = self.attn3(h3, cond)
        u = F.silu(self.up1(torch.cat([F.interpolate(h3, scale_factor=2, mode="nearest"), h2], dim=1)))
        u = F.silu(self.up2(torch.cat([F.interpolate(u, scale_factor=2, mode="nearest"), h1], dim=1)))
        out = self.conv_out(u)
        if return_attention:
            return out, [a1, a2, a3]
        return out


class LatentCodec(nn.Module):
    """Average-pool encoder with a fixed orthonormal channel map; decoder is its pseudo-inverse."""

    def __init__(self, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(LATENT_CHANNELS, 3, generator=g, dtype=DTYPE))
        self.register_buffer("channel_map", q)  # [4, 3], orthonormal columns

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """images: [B, 3, H, W] in [0, 1] -> latents [B, 4, H/4, W/4]."""
        x = F.avg_pool2d(images.to(DTYPE) * 2 - 1, DOWNSAMPLE)
        return torch.einsum("oc,bchw->bohw", self.channel_map, x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        x = torch.einsum("oc,bohw->bchw", self.channel_map, z)
        x = F.interpolate(x, scale_factor=DOWNSAMPLE, mode="nearest")
        return ((x + 1) / 2).clamp(0, 1)


def images_to_tensor(images) -> torch.Tensor:
    """uint8 HxWx3 (or a list/array of them) -> float64 [B, 3, H, W] in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr[..., :3].astype(np.float64) / 255.0).permute(0, 3, 1, 2).contiguous()


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """[3, H, W] in [0, 1] -> uint8 HxWx3."""
    return (x.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)


class ToyBackend(nn.Module):
    kind = "toy"
    supports_attention = True
    reentrant = True

    def __init__(self, config: Optional[ToyConfig] = None, **overrides):
        super().__init__()
        cfg = config or ToyConfig()
        if overrides:
            cfg = ToyConfig(**{**asdict(cfg), **overrides})
        if cfg.image_size % DOWNSAMPLE:
            raise ShapeError(f"image_size must be a multiple of {DOWNSAMPLE}")
        pending = list(cfg.special_tokens)
        cfg.special_tokens = []
        self.config = cfg
        self.schedule = NoiseSchedule.linear(cfg.num_train_timesteps)
        self.tokenizer = ToyTokenizer(cfg.vocab_buckets)
        torch_state = torch.random.get_rng_state()
        try:
            torch.manual_seed(cfg.init_seed)
            self.text = TextEncoder(len(self.tokenizer), cfg.embed_dim)
            self.unet = Denoiser(cfg.hidden, cfg.embed_dim, cfg.attn_dim, cfg.latent_size)
        finally:
            torch.random.set_rng_state(torch_state)
        self.codec = LatentCodec(cfg.init_seed + 1)
        self.meta: dict = {}
        for literal, role in pending:
            self.register_token(SpecialToken(literal, cfg.embed_dim, TokenRole(role)), TokenInit.random())

    # --- configuration -----------------------------------------------------

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["kind"] = self.kind
        return d

    @classmethod
    def from_config_dict(cls, d: dict) -> "ToyBackend":
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(ToyConfig(**d))

    # --- tokens ------------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def token_pieces(self, text: str) -> list[str]:
        return [BOS] + self.tokenizer.pieces(text)

    def has_token(self, literal: str) -> bool:
        return literal in self.tokenizer

    def token_id(self, literal: str) -> int:
        try:
            return self.tokenizer.vocab[literal]
        except KeyError:
            raise TokenizationError(f"{literal!r} is not in the vocabulary") from None

    def token_embedding_table(self) -> nn.Parameter:
        return self.text.token_embedding

    def word_embedding(self, word: str) -> torch.Tensor:
        """Embedding of a plain word: mean of its token embeddings."""
        ids = self.tokenizer.encode(word)[1:]
        if not ids:
            raise TokenizationError("cannot take the embedding of an empty word")
        return self.text.token_embedding.detach()[ids].mean(0)

    def register_token(self, token: SpecialToken, init: TokenInit) -> int:
        if token.embedding_dim != self.config.embed_dim:
            raise RegistrationError(
                f"token {token.literal!r} has dim {token.embedding_dim}, backend uses {self.config.embed_dim}"
            )
        if token.literal in self.tokenizer:
            raise RegistrationError(f"token {token.literal!r} is already in the vocabulary")
        if not SPECIAL_RE.fullmatch(token.literal):
            raise RegistrationError(f"special token literals must look like <name>, got {token.literal!r}")
        old = self.text.token_embedding.detach()
        if init.kind == InitKind.from_word:
            row = self.word_embedding(init.word or "")
        else:
            g = torch_generator(seeded_rng(self.config.init_seed, f"token-init/{token.literal}"))
            row = torch.randn(old.shape[1], generator=g, dtype=DTYPE) * old.std()
        idx = self.tokenizer.add(token.literal)
        assert idx == old.shape[0]
        self.text.token_embedding = nn.Parameter(torch.cat([old, row[None]], dim=0))
        self.config.special_tokens.append([token.literal, token.role.value])
        return idx

    # --- encoders ----------------------------------------------------------

    def batch_ids(self, prompts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        seqs = [self.tokenize(p) for p in prompts]
        n = max(len(s) for s in seqs)
        ids = torch.zeros(len(seqs), n, dtype=torch.long)
        mask = torch.zeros(len(seqs), n, dtype=torch.bool)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = torch.tensor(s)
            mask[i, :len(s)] = True
        return ids, mask

    def encode_text(self, prompts: Sequence[str]) -> TextConditioning:
        ids, mask = self.batch_ids(list(prompts))
        return self.text(ids, mask)

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        return self.codec.encode(images)

    def decode_latents(self, z: torch.Tensor) -> torch.Tensor:
        return self.codec.decode(z)

    def latent_shape(self, batch: int = 1) -> tuple[int, ...]:
        s = self.config.latent_size
        return (batch, LATENT_CHANNELS, s, s)

    def denoise(self, z_t: torch.Tensor, t, cond: TextConditioning, return_attention: bool = False):
        if z_t.dim() != 4 or tuple(z_t.shape[1:]) != self.latent_shape()[1:]:
            raise ShapeError(f"latent shape {tuple(z_t.shape)} does not match {self.latent_shape()[1:]}")
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        return self.unet(z_t, t, cond, return_attention=return_attention)

    def param_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        return {
            "token_embeddings": {"token_embedding": self.text.token_embedding},
            "text_encoder": {f"dense.{n}": p for n, p in self.text.dense.named_parameters()},
            "denoiser": dict(self.unet.named_parameters()),
        }

    def num_parameters(self) -> int:
        return sum(p.numel() for g in self.param_groups().values() for p in g.values())

    def rig_uniform_attention(self) -> None:
        """Zero the attention queries so every token gets the same score at every position."""
        with torch.no_grad():
            for attn in self.unet.attention_layers:
                attn.to_q.weight.zero_()

    # --- sampling ----------------------------------------------------------

    def sample_timesteps(self, steps: int) -> list[int]:
        """Descending DDIM timesteps from the last step to 0 (``steps`` transitions)."""
        ts = np.linspace(self.schedule.num_steps - 1, 0, steps + 1).round().astype(int)
        return [int(t) for t in ts]

    @torch.no_grad()
    def generate_batch(self, prompts: Sequence[str], steps: Optional[int], rngs) -> list[np.ndarray]:
        """Deterministic DDIM sampling; one generator per prompt."""
        steps = steps or self.config.sample_steps
        if steps < 1:
            raise ValueError("steps must be >= 1")
        cond = self.encode_text(prompts)
        guided = self.config.guidance_scale != 1.0
        if guided:
            uncond = self.encode_text([""] * len(prompts))
        shape = self.latent_shape()[1:]
        z = torch.stack([torch.randn(shape, generator=torch_generator(r), dtype=DTYPE) for r in rngs])
        abar = self.schedule.alphas_cumprod
        ts = self.sample_timesteps(steps)
        for t, t_prev in zip(ts[:-1], ts[1:]):
            eps = self.denoise(z, t, cond)
            if guided:
                eps_u = self.denoise(z, t, uncond)
                eps = eps_u + self.config.guidance_scale * (eps - eps_u)
            x0 = (z - math.sqrt(1 - abar[t]) * eps) / math.sqrt(abar[t])
            z = math.sqrt(abar[t_prev]) * x0 + math.sqrt(1 - abar[t_prev]) * eps
        images = self.decode_latents(z)
        return [tensor_to_image(x) for x in images]

    def generate(self, prompt: str, steps: Optional[int], rng: np.random.Generator) -> np.ndarray:
        return self.generate_batch([prompt], steps, [rng])[0]
