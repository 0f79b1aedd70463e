"""Diffusion backend interface, noise schedule and checkpoints."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from ..core import SpecialToken
from ..errors import CheckpointError, DomainError, ShapeError

GROUPS = ("token_embeddings", "text_encoder", "denoiser")


# ----------------------------------------------------------------------------
# Noise schedule

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Forward process z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps, with abar_0 = 1."""

    num_steps: int
    alphas_cumprod: np.ndarray

    @classmethod
    def linear(cls, num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if num_steps < 2:
            raise DomainError("num_steps must be >= 2")
        betas = np.linspace(beta_start, beta_end, num_steps - 1, dtype=np.float64)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        abar.setflags(write=False)
        return cls(num_steps, abar)

    def signal_weight(self, t) -> np.ndarray:
        return np.sqrt(self.alphas_cumprod[np.asarray(t)])

    def noise_weight(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alphas_cumprod[np.asarray(t)])

    def check_t(self, t) -> None:
        ts = np.atleast_1d(np.asarray(t))
        if ts.size == 0 or ts.min() < 0 or ts.max() >= self.num_steps:
            raise DomainError(f"timestep out of range [0, {self.num_steps}): {t}")


def _per_sample(values: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.atleast_1d(values), dtype=like.dtype, device=like.device)
    return v.reshape(-1, *([1] * (like.dim() - 1)))


def noise_latent(z: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noised latent at timestep ``t`` (scalar or one per batch item)."""
    if z.shape != eps.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match latent shape {tuple(z.shape)}")
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    schedule.check_t(t)
    t = np.asarray(t)
    if t.ndim == 0 or t.size == 1:
        a = float(schedule.signal_weight(int(t.reshape(-1)[0])))
        b = float(schedule.noise_weight(int(t.reshape(-1)[0])))
        if b == 0.0:
            return z.clone()
        return a * z + b * eps
    return _per_sample(schedule.signal_weight(t), z) * z + _per_sample(schedule.noise_weight(t), z) * eps


# ----------------------------------------------------------------------------
# Backend interface

class InitKind(str, enum.Enum):
    from_word = "from_word"
    random = "random"


@dataclass(frozen=True)
class TokenInit:
    kind: InitKind = InitKind.random
    word: Optional[str] = None

    @classmethod
    def from_word(cls, word: str) -> "TokenInit":
        return cls(InitKind.from_word, word)

    @classmethod
    def random(cls) -> "TokenInit":
        return cls(InitKind.random)


@dataclass
class TextConditioning:
    states: torch.Tensor  # [B, L, D] per-token states
    mask: torch.Tensor  # [B, L] bool, True at real tokens
    pooled: torch.Tensor  # [B, D]


@runtime_checkable
class DiffusionBackend(Protocol):
    """What the training, diagnostics and evaluation code needs from a diffusion stack.

    A production adapter wraps a pretrained latent-diffusion model; the
    ``ToyBackend`` implements the same surface at desk scale.
    """

    schedule: NoiseSchedule
    supports_attention: bool

    def tokenize(self, text: str) -> list[int]: ...

    def token_pieces(self, text: str) -> list[str]: ...

    def has_token(self, literal: str) -> bool: ...

    def token_id(self, literal: str) -> int: ...

    def register_token(self, token: SpecialToken, init: TokenInit) -> int: ...

    def token_embedding_table(self) -> torch.nn.Parameter: ...

    def encode_text(self, prompts: Sequence[str]) -> TextConditioning: ...

    def encode_images(self, images: torch.Tensor) -> torch.Tensor: ...

    def decode_latents(self, z: torch.Tensor) -> torch.Tensor: ...

    def denoise(self, z_t: torch.Tensor, t: torch.Tensor, cond: TextConditioning,
                return_attention: bool = False): ...

    def param_groups(self) -> dict[str, dict[str, torch.nn.Parameter]]: ...

    def generate(self, prompt: str, steps: Optional[int], rng: np.random.Generator) -> np.ndarray: ...


def register_token(backend: DiffusionBackend, token: SpecialToken, init: TokenInit | None = None) -> int:
    return backend.register_token(token, init or TokenInit.random())


def generate(backend: DiffusionBackend, prompt: str, steps: Optional[int], rng: np.random.Generator) -> np.ndarray:
    return backend.generate(prompt, steps, rng)


# ----------------------------------------------------------------------------
# Checksums and checkpoints

def tensor_checksum(t: torch.Tensor) -> str:
    arr = t.detach().cpu().contiguous().numpy()
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def group_checksum(backend: DiffusionBackend, group: str) -> str:
    params = backend.param_groups()[group]
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(tensor_checksum(params[name]).encode())
    return h.hexdigest()


def group_checksums(backend: DiffusionBackend) -> dict[str, str]:
    return {g: group_checksum(backend, g) for g in backend.param_groups()}


def row_checksum(backend: DiffusionBackend, literal: str) -> str:
    return tensor_checksum(backend.token_embedding_table()[backend.token_id(literal)])


def save_checkpoint(backend, path, meta: Optional[Mapping] = None) -> Path:
    """Write each parameter group to ``<group>.pt`` plus a manifest of shapes and checksums."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if meta is None:
        meta = getattr(backend, "meta", {})
    manifest: dict = {"backend": backend.config_dict(), "meta": dict(meta), "groups": {}}
    for group, params in backend.param_groups().items():
        state = {name: p.detach().cpu().clone() for name, p in params.items()}
        torch.save(state, path / f"{group}.pt")
        manifest["groups"][group] = {
            name: {"shape": list(t.shape), "sha256": tensor_checksum(t)} for name, t in sorted(state.items())
        }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_checkpoint_manifest(path) -> dict:
    f = Path(path) / "manifest.json"
    if not f.is_file():
        raise CheckpointError(f"no checkpoint manifest at {f}")
    return json.loads(f.read_text(encoding="utf-8"))


def load_checkpoint(path):
    """Rebuild a backend from a checkpoint directory, validating shapes and checksums."""
    from .toy import ToyBackend

    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    cfg = manifest["backend"]
    if cfg.get("kind") != "toy":
        raise CheckpointError(f"no loader for backend kind {cfg.get('kind')!r}")
    backend = ToyBackend.from_config_dict(cfg)
    groups = backend.param_groups()
    for group, entries in manifest["groups"].items():
        if group not in groups:
            raise CheckpointError(f"checkpoint has unknown parameter group {group!r}")
        f = path / f"{group}.pt"
        if not f.is_file():
            raise CheckpointError(f"missing parameter file {f}")
        state = torch.load(f, map_location="cpu", weights_only=True)
        for name, info in entries.items():
            if name not in state or name not in groups[group]:
                raise CheckpointError(f"parameter {group}/{name} missing")
            t = state[name]
            if list(t.shape) != info["shape"] or list(groups[group][name].shape) != info["shape"]:
                raise CheckpointError(f"shape mismatch for {group}/{name}: {list(t.shape)} vs {info['shape']}")
            if tensor_checksum(t) != info["sha256"]:
                raise CheckpointError(f"checksum mismatch for {group}/{name}")
            with torch.no_grad():
                groups[group][name].copy_(t)
    backend.meta = manifest.get("meta", {})
    return backend, backend.meta
