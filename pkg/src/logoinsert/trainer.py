"""Training phases: relation pre-training, token binding, identity learning.

Each phase declares which parameter groups it may touch. Everything else is
frozen; rows of the token-embedding table outside the phase's own tokens are
restored after every optimizer step, so frozen parameters stay bit-identical.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .backend import DiffusionBackend, NoiseSchedule, group_checksums, noise_latent, save_checkpoint
from .core import IDENTITY, PAINTED, Manifest, RunConfig, read_rgb, seeded_rng, torch_generator
from .errors import CriticError, DomainError, PhaseAbort, PhaseOrderError
from .scheduler import (
    JointEmbedder,
    SchedulerState,
    history_record,
    recalibrate,
    sample_object,
    score_all,
)

log = logging.getLogger(__name__)

PHASE_RELATION = "pretrain-relation"
PHASE_BINDING = "bind-token"
PHASE_IDENTITY = "learn-identity"


@dataclass(frozen=True)
class ActorCriticParams:
    lambda_: float = 2.0
    recalib_freq_f: int = 100
    object1_pool: tuple[str, ...] = ("a dog", "an apple", "a star", "a heart", "a smiley face")
    gens_per_eval: int = 4
    sample_steps: Optional[int] = 10


@dataclass(frozen=True)
class TrainPhaseConfig:
    name: str
    dataset: Manifest
    trainable_groups: Mapping[str, float]  # group -> learning rate
    steps: int
    batch_size: int = 4
    trainable_tokens: tuple[str, ...] = ()  # token-table rows allowed to change
    prompts_use_tokens: tuple[str, ...] = ()
    sampler: str = "uniform"
    actor_critic: Optional[ActorCriticParams] = None

    def __post_init__(self):
        if not self.trainable_groups:
            raise DomainError(f"phase {self.name!r} has no trainable parameter groups")
        if self.steps < 1 or self.batch_size < 1:
            raise DomainError("steps and batch_size must be >= 1")
        if self.sampler not in ("uniform", "actor_critic"):
            raise DomainError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "actor_critic" and self.actor_critic is None:
            raise DomainError("actor_critic sampler needs ActorCriticParams")
        if "token_embeddings" in self.trainable_groups and not self.trainable_tokens:
            raise DomainError("token_embeddings is trainable but no tokens are listed")


@dataclass
class TrainState:
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)
    scheduler_state: Optional[SchedulerState] = None
    scheduler_history: list[dict] = field(default_factory=list)
    checksums_before: dict[str, str] = field(default_factory=dict)
    checksums_after: dict[str, str] = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)


# ----------------------------------------------------------------------------
# Loss

def ldm_loss(backend: DiffusionBackend, images: torch.Tensor, prompts: Sequence[str], t, eps: torch.Tensor,
             schedule: Optional[NoiseSchedule] = None) -> torch.Tensor:
    """Mean squared error between ``eps`` and the denoiser's noise prediction."""
    schedule = schedule or backend.schedule
    z = backend.encode_images(images)
    z_t = noise_latent(z, t, eps, schedule)
    pred = backend.denoise(z_t, t, backend.encode_text(prompts))
    return ((eps - pred) ** 2).mean()


def draw_noise(backend, images: torch.Tensor, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Uniform timesteps in [1, T) and standard Gaussian latent noise."""
    n = images.shape[0]
    t = torch.randint(1, backend.schedule.num_steps, (n,), generator=gen)
    shape = backend.latent_shape(n) if hasattr(backend, "latent_shape") else backend.encode_images(images).shape
    eps = torch.randn(shape, generator=gen, dtype=torch.float64)
    return t, eps


# ----------------------------------------------------------------------------
# Data

def load_images(manifest: Manifest, size: int) -> torch.Tensor:
    """All manifest images as float64 [N, 3, size, size] in [0, 1]."""
    arrs = []
    for rec in manifest:
        img = read_rgb(manifest.image_path(rec))
        if img.shape[:2] != (size, size):
            img = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
        arrs.append(img)
    x = np.stack(arrs).astype(np.float64) / 255.0
    return torch.from_numpy(x).permute(0, 3, 1, 2).contiguous()


# ----------------------------------------------------------------------------
# Freezing

class _Freezer:
    """Limits optimization to the phase's groups and token rows."""

    def __init__(self, backend: DiffusionBackend, phase: TrainPhaseConfig):
        self.backend = backend
        self.groups = backend.param_groups()
        unknown = set(phase.trainable_groups) - set(self.groups)
        if unknown:
            raise DomainError(f"unknown parameter groups: {sorted(unknown)}")
        self.saved_flags = {id(p): p.requires_grad for g in self.groups.values() for p in g.values()}
        self.table = backend.token_embedding_table()
        self.rows = [backend.token_id(tok) for tok in phase.trainable_tokens]
        self.frozen_rows = torch.ones(self.table.shape[0], dtype=torch.bool)
        self.frozen_rows[self.rows] = False
        self.table_copy = self.table.detach().clone()

        param_groups = []
        for gname, params in self.groups.items():
            train = gname in phase.trainable_groups
            for p in params.values():
                p.requires_grad_(train)
            if train:
                param_groups.append({"params": list(params.values()), "lr": phase.trainable_groups[gname]})
        self.optimizer = torch.optim.Adam(param_groups)

    def step(self, loss: torch.Tensor) -> None:
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.table.grad is not None:
            self.table.grad[self.frozen_rows] = 0
        self.optimizer.step()
        if self.table.requires_grad:
            with torch.no_grad():
                self.table[self.frozen_rows] = self.table_copy[self.frozen_rows]

    def release(self) -> None:
        for g in self.groups.values():
            for p in g.values():
                p.requires_grad_(self.saved_flags[id(p)])


def _phase_meta(backend) -> dict:
    meta = getattr(backend, "meta", None)
    if meta is None:
        meta = {}
        backend.meta = meta
    meta.setdefault("phases", [])
    meta.setdefault("trained_tokens", [])
    return meta


def _record_phase(backend, phase: TrainPhaseConfig) -> None:
    meta = _phase_meta(backend)
    meta["phases"].append(phase.name)
    if "token_embeddings" in phase.trainable_groups:
        for tok in phase.trainable_tokens:
            if tok not in meta["trained_tokens"]:
                meta["trained_tokens"].append(tok)


def _require_tokens(backend, tokens: Sequence[str], phase: str) -> None:
    missing = [t for t in tokens if not backend.has_token(t)]
    if missing:
        raise PhaseOrderError(f"phase {phase!r} needs registered tokens: {', '.join(missing)}")


def _abort(backend, state: TrainState, message: str, checkpoint_dir, diagnostics=None) -> PhaseAbort:
    ckpt = None
    if checkpoint_dir is not None:
        ckpt = str(save_checkpoint(backend, Path(checkpoint_dir) / "aborted", _phase_meta(backend)))
        state.checkpoints.append(ckpt)
    return PhaseAbort(message, checkpoint=ckpt, diagnostics=diagnostics)


def run_phase(
    backend: DiffusionBackend,
    phase: TrainPhaseConfig,
    rng: np.random.Generator,
    images: Optional[torch.Tensor] = None,
    batch_indices: Optional[Callable[[int, np.random.Generator], np.ndarray]] = None,
    on_iteration: Optional[Callable[[int, TrainState], None]] = None,
    checkpoint_dir=None,
) -> TrainState:
    """Generic optimization loop shared by all three phases."""
    _require_tokens(backend, phase.prompts_use_tokens, phase.name)
    size = backend.config.image_size if hasattr(backend, "config") else None
    if images is None:
        images = load_images(phase.dataset, size)
    prompts = [r.prompt for r in phase.dataset]
    n = len(prompts)
    batch_rng = seeded_rng(int(rng.integers(2**63 - 1)), f"{phase.name}/batches")
    noise_gen = torch_generator(rng)

    state = TrainState(checksums_before=group_checksums(backend))
    freezer = _Freezer(backend, phase)
    try:
        for it in range(1, phase.steps + 1):
            idx = batch_indices(it, batch_rng) if batch_indices else batch_rng.integers(0, n, size=phase.batch_size)
            x = images[idx]
            t, eps = draw_noise(backend, x, noise_gen)
            loss = ldm_loss(backend, x, [prompts[i] for i in idx], t, eps)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise _abort(backend, state, f"non-finite loss at iteration {it} of {phase.name}", checkpoint_dir,
                             {"iteration": it, "recent_losses": state.loss_history[-10:]})
            freezer.step(loss)
            state.loss_history.append(value)
            state.iteration = it
            if on_iteration is not None:
                on_iteration(it, state)
    finally:
        freezer.release()
    _record_phase(backend, phase)
    state.checksums_after = group_checksums(backend)
    return state


# ----------------------------------------------------------------------------
# Phases

def relation_phase(config: RunConfig, manifest: Manifest) -> TrainPhaseConfig:
    ac = ActorCriticParams(config.lambda_, config.recalib_freq_f, tuple(config.object1_pool),
                           config.gens_per_eval, config.critic_sample_steps)
    return TrainPhaseConfig(
        name=PHASE_RELATION,
        dataset=manifest,
        trainable_groups={"token_embeddings": config.relation.lr_token,
                          "text_encoder": config.relation.lr_text_encoder},
        trainable_tokens=(PAINTED,),
        prompts_use_tokens=(PAINTED,),
        steps=config.total_iters_A,
        batch_size=config.relation.batch_size,
        sampler="actor_critic",
        actor_critic=ac,
    )


def binding_phase(config: RunConfig, manifest: Manifest) -> TrainPhaseConfig:
    return TrainPhaseConfig(
        name=PHASE_BINDING,
        dataset=manifest,
        trainable_groups={"token_embeddings": config.binding.lr},
        trainable_tokens=(IDENTITY,),
        prompts_use_tokens=(IDENTITY,),
        steps=config.binding.steps,
        batch_size=config.binding.batch_size,
    )


def identity_phase(config: RunConfig, manifest: Manifest) -> TrainPhaseConfig:
    groups = {"denoiser": config.identity.lr}
    tokens: tuple[str, ...] = ()
    if config.identity.train_token:
        groups["token_embeddings"] = config.binding.lr
        tokens = (IDENTITY,)
    return TrainPhaseConfig(
        name=PHASE_IDENTITY,
        dataset=manifest,
        trainable_groups=groups,
        trainable_tokens=tokens,
        prompts_use_tokens=(IDENTITY,),
        steps=config.identity.steps,
        batch_size=config.identity.batch_size,
    )


def run_phase1_relation(backend, manifest: Manifest, phase: TrainPhaseConfig, critic: JointEmbedder,
                        rng: np.random.Generator, checkpoint_dir=None) -> TrainState:
    """Actor-critic relation pre-training of the relation token and text encoder.

    Each iteration draws an object class from the current sampling
    distribution and takes one step on a batch of that class's images. Every
    ``recalib_freq_f`` iterations the critic scores all classes and the
    distribution is recalibrated.
    """
    if phase.sampler != "actor_critic" or phase.actor_critic is None:
        raise DomainError("relation pre-training requires the actor_critic sampler")
    if "denoiser" in phase.trainable_groups:
        raise DomainError("relation pre-training does not update the denoiser")
    _require_tokens(backend, (PAINTED,), phase.name)
    ac = phase.actor_critic
    by_class: dict[str, list[int]] = {}
    for i, rec in enumerate(manifest):
        by_class.setdefault(rec.object_class, []).append(i)
    classes = list(by_class)

    sampler_rng = seeded_rng(int(rng.integers(2**63 - 1)), "relation/sampler")
    critic_rng = seeded_rng(int(rng.integers(2**63 - 1)), "relation/critic")
    sched = SchedulerState.uniform(classes, ac.lambda_, ac.recalib_freq_f)
    history: list[dict] = []
    current = {"state": sched}

    def pick(it, batch_rng):
        obj = sample_object(current["state"], sampler_rng)
        members = by_class[obj]
        return np.asarray([members[int(j)] for j in batch_rng.integers(0, len(members), size=phase.batch_size)])

    def after(it, state: TrainState):
        if it % ac.recalib_freq_f:
            return
        try:
            table = score_all(backend, critic, classes, list(ac.object1_pool), ac.gens_per_eval, critic_rng,
                              iteration=it, steps=ac.sample_steps)
        except CriticError as e:
            raise _abort(backend, state, f"critic failed at iteration {it}: {e}", checkpoint_dir) from e
        new = recalibrate(table, ac.lambda_, classes, ac.recalib_freq_f, current["state"].history)
        current["state"] = new
        history.append(history_record(new))
        log.info("iteration %d: mean critic score %.4f", it, table.mean_score)

    state = run_phase(backend, phase, rng, batch_indices=pick, on_iteration=after, checkpoint_dir=checkpoint_dir)
    state.scheduler_state = current["state"]
    state.scheduler_history = history
    return state


def run_phase2a_binding(backend, manifest: Manifest, phase: TrainPhaseConfig, rng: np.random.Generator,
                        checkpoint_dir=None) -> TrainState:
    """Textual-inversion style optimization of the identity token alone."""
    if set(phase.trainable_groups) != {"token_embeddings"} or tuple(phase.trainable_tokens) != (IDENTITY,):
        raise DomainError(f"token binding may only train the {IDENTITY} embedding")
    _require_tokens(backend, (IDENTITY,), phase.name)
    return run_phase(backend, phase, rng, checkpoint_dir=checkpoint_dir)


def run_phase2b_identity(backend, manifest: Manifest, phase: TrainPhaseConfig, rng: np.random.Generator,
                         checkpoint_dir=None) -> TrainState:
    """Denoiser fine-tuning on the identity set, prompts carrying the bound token."""
    meta = _phase_meta(backend)
    if PHASE_BINDING not in meta["phases"] or IDENTITY not in meta["trained_tokens"]:
        raise PhaseOrderError(
            f"identity learning needs a completed {PHASE_BINDING} phase with a trained {IDENTITY} token"
        )
    if "text_encoder" in phase.trainable_groups:
        raise DomainError("identity learning keeps the text encoder frozen")
    if "denoiser" not in phase.trainable_groups:
        raise DomainError("identity learning must train the denoiser")
    if not all(IDENTITY in r.prompt for r in manifest):
        raise DomainError(f"every identity-set prompt must contain {IDENTITY}")
    state = run_phase(backend, phase, rng, checkpoint_dir=checkpoint_dir)
    if checkpoint_dir is not None:
        state.checkpoints.append(str(save_checkpoint(backend, Path(checkpoint_dir), meta)))
    return state
