"""Domain types, run configuration, manifests and seeded randomness."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
import torch
import yaml
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, IntegrityError, LoadError, ManifestValidationError

# Rec. 709 luminance weights, applied to linear-light RGB.
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


# ----------------------------------------------------------------------------
# Randomness

def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Return an independent generator for ``(seed, stream_label)``.

    The label is hashed into the seed sequence entropy, so every stage can
    draw from its own stream without coordinating offsets with the others.
    """
    digest = hashlib.sha256(stream_label.encode("utf-8")).digest()
    label_words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    seed_words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    return np.random.default_rng(np.random.SeedSequence(seed_words + label_words))


def spawn_seed(rng: np.random.Generator) -> int:
    """Draw a 64-bit seed for deriving per-item labeled streams."""
    return int(rng.integers(0, 2**63 - 1))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    """Torch generator seeded from one draw of ``rng``."""
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return g


# ----------------------------------------------------------------------------
# Color helpers

def srgb_to_linear(values):
    """Inverse sRGB transfer function on values in [0, 1]."""
    v = np.asarray(values, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def relative_luminance(linear_rgb) -> float | np.ndarray:
    """Rec. 709 relative luminance of linear-light RGB (last axis)."""
    return np.asarray(linear_rgb, dtype=np.float64) @ LUMA_WEIGHTS


def read_rgba(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGBA"), dtype=np.uint8).copy()
    except FileNotFoundError as e:
        raise LoadError(f"image not found: {path}") from e
    except OSError as e:
        raise IntegrityError(f"unreadable image: {path}", path=str(path)) from e


def read_rgb(path) -> np.ndarray:
    return read_rgba(path)[..., :3].copy()


def write_png(path, pixels: np.ndarray) -> None:
    """Lossless PNG write; uint8 arrays of shape HxW, HxWx3 or HxWx4."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG", optimize=False)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True, eq=False)
class LogoAsset:
    id: str
    image: np.ndarray  # HxWx4 uint8, straight (non-premultiplied) alpha
    mean_color: tuple[float, float, float]
    provenance: str = ""

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 4 or img.dtype != np.uint8:
            raise ValueError("logo image must be an HxWx4 uint8 RGBA raster")
        if img.shape[0] == 0 or img.shape[1] == 0:
            raise ValueError("logo image has zero area")
        img.setflags(write=False)

    @classmethod
    def from_array(cls, logo_id: str, rgba: np.ndarray, provenance: str = "") -> "LogoAsset":
        rgba = np.asarray(rgba, dtype=np.uint8).copy()
        return cls(logo_id, rgba, logo_mean_color(rgba), provenance)

    @classmethod
    def from_file(cls, path, logo_id: Optional[str] = None) -> "LogoAsset":
        path = Path(path)
        return cls.from_array(logo_id or path.stem, read_rgba(path), str(path))

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[0]


def logo_mean_color(rgba: np.ndarray) -> tuple[float, float, float]:
    """Alpha-weighted mean of linear RGB over pixels with nonzero alpha."""
    if rgba.ndim != 3 or rgba.shape[2] != 4:
        raise ValueError("logo image must be an HxWx4 RGBA raster")
    alpha = rgba[..., 3].astype(np.float64) / 255.0
    if not np.any(alpha > 0):
        return (0.0, 0.0, 0.0)
    lin = srgb_to_linear(rgba[..., :3] / 255.0)
    w = alpha[..., None]
    mean = (lin * w).sum(axis=(0, 1)) / alpha.sum()
    return tuple(float(np.clip(c, 0.0, 1.0)) for c in mean)


class TokenRole(str, enum.Enum):
    relation = "relation"
    identity = "identity"


@dataclass(frozen=True)
class SpecialToken:
    literal: str
    embedding_dim: int
    role: TokenRole

    def __post_init__(self):
        if not self.literal:
            raise ValueError("token literal must be nonempty")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")


PAINTED = "<painted>"
IDENTITY = "<V>"


@dataclass(frozen=True)
class ObjectClass:
    name: str
    exemplar_images: tuple[str, ...]
    prompt_templates: tuple[str, ...] = ()

    def __post_init__(self):
        if not 3 <= len(self.exemplar_images) <= 4:
            raise ValueError(
                f"object class {self.name!r} needs 3 to 4 exemplar images, got {len(self.exemplar_images)}"
            )


# ----------------------------------------------------------------------------
# Manifests

class ManifestRecord(BaseModel):
    """One sample line of a manifest. Paths are relative to the manifest's directory."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    prompt: str
    image: str
    object_class: str = ""
    split: str = "train"
    mask: Optional[str] = None
    logo_id: Optional[str] = None
    background_kind: Optional[str] = None
    placement: Optional[dict[str, Any]] = None
    object1: Optional[str] = None

    @field_validator("prompt", "image")
    @classmethod
    def _nonempty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("must be nonempty")
        return v


@dataclass(frozen=True)
class Manifest:
    records: tuple[ManifestRecord, ...]
    root: Path = field(default=Path("."), compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def image_path(self, rec: ManifestRecord) -> Path:
        return self.resolve(rec.image)

    def object_classes(self) -> list[str]:
        """Distinct object-class tags, in first-appearance order."""
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.object_class, None)
        return list(seen)

    def by_class(self) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.object_class, []).append(r)
        return out

    def dumps(self) -> str:
        return "".join(
            json.dumps(r.model_dump(exclude_none=True), sort_keys=True) + "\n" for r in self.records
        )


def save_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.dumps(), encoding="utf-8")
    return path


def parse_manifest(text: str, root=Path(".")) -> Manifest:
    records = []
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(ManifestRecord.model_validate(json.loads(line)))
        except json.JSONDecodeError as e:
            problems.append(f"line {lineno}: not valid JSON ({e.msg})")
        except ValidationError as e:
            for err in e.errors():
                loc = ".".join(str(x) for x in err["loc"]) or "<record>"
                problems.append(f"line {lineno}: {loc}: {err['msg']}")
    if problems:
        fields = sorted({p.split(": ")[1] for p in problems if p.count(": ") >= 2})
        raise ManifestValidationError("invalid manifest:\n  " + "\n  ".join(problems), fields)
    if not records:
        raise ManifestValidationError("manifest has no samples", ["records"])
    return Manifest(tuple(records), Path(root))


def load_manifest(path, check_images: bool = True) -> Manifest:
    """Load a line-delimited JSON manifest and check that its images exist."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    manifest = parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)
    if check_images:
        for rec in manifest.records:
            for rel in (rec.image, rec.mask):
                if rel is None:
                    continue
                p = manifest.resolve(rel)
                if not p.is_file():
                    raise IntegrityError(f"manifest {path} references missing image: {p}", path=str(p))
                try:
                    with Image.open(p) as im:
                        im.verify()
                except Exception as e:
                    raise IntegrityError(f"manifest {path} references unreadable image: {p}", path=str(p)) from e
    return manifest


def object_classes_from_manifest(manifest: Manifest) -> list[ObjectClass]:
    groups = manifest.by_class()
    return [
        ObjectClass(name, tuple(r.image for r in recs), tuple(dict.fromkeys(r.prompt for r in recs)))
        for name, recs in groups.items()
    ]


# ----------------------------------------------------------------------------
# Run configuration

class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class RelationParams(_Section):
    lr_token: float = Field(5e-3, gt=0)
    lr_text_encoder: float = Field(1e-3, gt=0)
    batch_size: int = Field(2, ge=1)


class BindingParams(_Section):
    steps: int = Field(100, ge=1)
    lr: float = Field(5e-2, gt=0)
    batch_size: int = Field(4, ge=1)
    init_word: str = "logo"


class IdentityParams(_Section):
    steps: int = Field(1000, ge=1)
    lr: float = Field(2e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    train_token: bool = False


class SynthParams(_Section):
    binding_count: int = Field(16, ge=1)
    identity_count: int = Field(32, ge=1)
    threshold: float = Field(0.35, ge=0, le=1)
    background_size: int = Field(64, ge=16)
    binding_template: str = "a <V> on a {color} background"  # {color}: nearest named background color


class BackendParams(_Section):
    kind: str = "toy"
    image_size: int = Field(64, ge=8)
    embed_dim: int = Field(32, ge=1)
    hidden: int = Field(32, ge=1)
    attn_dim: int = Field(16, ge=1)
    num_train_timesteps: int = Field(1000, ge=2)
    sample_steps: int = Field(50, ge=1)
    guidance_scale: float = 1.0
    init_seed: int = 0


class EvalParams(_Section):
    contexts: list[str] = Field(default_factory=list)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    sample_steps: Optional[int] = None


class Paths(_Section):
    workdir: str = "run"
    relation_manifest: Optional[str] = None
    logo: Optional[str] = None
    scenes_dir: Optional[str] = None
    base_checkpoint: Optional[str] = None  # pretrained backend to start from


DEFAULT_OBJECT1_POOL = ("a dog", "an apple", "a star", "a heart", "a smiley face")


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    seed: int = 0
    lambda_: float = Field(2.0, alias="lambda", gt=0)
    recalib_freq_f: int = Field(100, ge=1)
    total_iters_A: int = Field(200, ge=1)
    num_objects_N: int = Field(20, ge=1)
    gens_per_eval: int = Field(4, ge=1)
    critic_sample_steps: int = Field(10, ge=1)
    object1_pool: list[str] = Field(default_factory=lambda: list(DEFAULT_OBJECT1_POOL))
    relation: RelationParams = RelationParams()
    binding: BindingParams = BindingParams()
    identity: IdentityParams = IdentityParams()
    synth: SynthParams = SynthParams()
    backend: BackendParams = BackendParams()
    eval: EvalParams = EvalParams()
    paths: Paths = Paths()

    @model_validator(mode="after")
    def _check(self):
        if self.recalib_freq_f > self.total_iters_A:
            raise ValueError("recalib_freq_f must not exceed total_iters_A")
        if not self.object1_pool:
            raise ValueError("object1_pool must be nonempty")
        return self

    def to_dict(self) -> dict:
        return self.model_dump(by_alias=True, mode="json")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def check_relation_manifest(self, manifest: Manifest) -> list[ObjectClass]:
        classes = object_classes_from_manifest(manifest)
        if len(classes) != self.num_objects_N:
            raise ConfigError(
                f"num_objects_N={self.num_objects_N} but relation manifest has {len(classes)} object classes"
            )
        return classes


def load_run_config(path) -> RunConfig:
    """Read a YAML (or JSON) run config."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return RunConfig.model_validate(data)
    except (yaml.YAMLError, ValidationError) as e:
        raise ConfigError(f"invalid run config {path}: {e}") from e


def save_run_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")
    return path
