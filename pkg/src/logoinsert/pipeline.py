"""Pipeline stages as file-to-file functions.

Each stage reads its inputs from the run directory, writes its outputs there
and appends one record to the run ledger. Stages share nothing in memory, so
any of them can run in a fresh process.

Run directory layout::

    binding/ identity/              synthesized sets (manifest + images + masks)
    checkpoints/{relation,bind,identity}/
    relation/scheduler_history.jsonl
    logs/{relation,bind,identity}/losses.jsonl
    attn/<checkpoint>/              attention.json, overlays, maps
    eval/fidelity.json  eval/samples/
    report/
    ledger.jsonl
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError

from . import diagnostics as diag
from . import synthesis, trainer
from .backend import TokenInit, load_checkpoint, save_checkpoint
from .backend.toy import ToyBackend, ToyConfig
from .core import (
    IDENTITY, PAINTED, LogoAsset, RunConfig, SpecialToken, TokenRole, load_manifest, load_run_config, read_rgb,
    seeded_rng, write_png,
)
from .embedders import ColorLayoutEmbedder, PrototypeJointEmbedder, StructureEmbedder
from .errors import ConfigError, PhaseOrderError
from .evalharness import DEFAULT_CONTEXTS, Embedders, EvalGrid, reference_image, run_grid
from .ledger import RunLedger, StageRecord, StageRun
from .report import ATTENTION_NAME, FIDELITY_NAME, HISTORY_NAME, REPORT_STAGE, render_report
from .scheduler import write_history

log = logging.getLogger(__name__)

SCENE_SUFFIXES = (".png", ".jpg", ".jpeg")
ATTN_TOKENS = (IDENTITY, "logo")


@dataclass
class Run:
    config: RunConfig
    base_dir: Path = field(default_factory=Path.cwd)  # relative config paths resolve against this

    @classmethod
    def from_file(cls, path) -> "Run":
        path = Path(path)
        return cls(load_run_config(path), path.resolve().parent)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def require(self, name: str) -> Path:
        value = getattr(self.config.paths, name)
        if not value:
            raise ConfigError(f"paths.{name} is not set in the run config")
        return self.resolve(value)

    @property
    def workdir(self) -> Path:
        return self.resolve(self.config.paths.workdir)

    @property
    def ledger(self) -> RunLedger:
        return RunLedger.open(self.workdir)

    def stage(self, name: str) -> StageRun:
        return StageRun(self.ledger, name, self.config.config_hash())

    def with_overrides(self, updates: dict) -> "Run":
        """Copy with config fields replaced; ``updates`` uses dotted keys such as ``synth.threshold``."""
        data = self.config.to_dict()
        for key, value in updates.items():
            if value is None:
                continue
            node = data
            *parents, leaf = key.split(".")
            for k in parents:
                node = node.setdefault(k, {})
            node[leaf] = value
        try:
            return Run(RunConfig.model_validate(data), self.base_dir)
        except ValidationError as e:
            raise ConfigError(f"invalid override: {e}") from e

    def checkpoint(self, name: str) -> Path:
        return self.workdir / "checkpoints" / name


def toy_config(config: RunConfig) -> ToyConfig:
    b = config.backend
    if b.kind != "toy":
        raise ConfigError(f"backend kind {b.kind!r} has no built-in implementation; only 'toy' is available")
    return ToyConfig(image_size=b.image_size, embed_dim=b.embed_dim, hidden=b.hidden, attn_dim=b.attn_dim,
                     num_train_timesteps=b.num_train_timesteps, sample_steps=b.sample_steps,
                     guidance_scale=b.guidance_scale, init_seed=b.init_seed)


def _apply_sampling(backend, config: RunConfig):
    # sampling knobs are not part of the weights, so the run config wins over the checkpoint
    backend.config.sample_steps = config.backend.sample_steps
    backend.config.guidance_scale = config.backend.guidance_scale
    return backend


def load_stage_checkpoint(run: Run, path: Path):
    backend, _ = load_checkpoint(path)
    return _apply_sampling(backend, run.config)


def base_backend(run: Run, st: Optional[StageRun] = None):
    """The starting backend: ``paths.base_checkpoint`` if set, else a freshly initialized toy model."""
    want = toy_config(run.config)
    if not run.config.paths.base_checkpoint:
        return ToyBackend(want)
    path = run.require("base_checkpoint")
    if st is not None:
        st.source(path)
    backend, _ = load_checkpoint(path)
    backend.meta = {}
    got = backend.config
    for key in ("image_size", "embed_dim", "hidden", "attn_dim", "num_train_timesteps"):
        if getattr(got, key) != getattr(want, key):
            raise ConfigError(f"backend.{key}={getattr(want, key)} but the base checkpoint has {getattr(got, key)}")
    return _apply_sampling(backend, run.config)


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _scenes(scenes_dir: Path) -> list[Path]:
    if not scenes_dir.is_dir():
        raise ConfigError(f"scenes directory {scenes_dir} does not exist")
    scenes = sorted(p for p in scenes_dir.iterdir() if p.suffix.lower() in SCENE_SUFFIXES)
    if not scenes:
        raise ConfigError(f"no scene images in {scenes_dir}")
    return scenes


def _write_losses(path: Path, losses: Sequence[float]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps({"iteration": i, "loss": v}) + "\n" for i, v in enumerate(losses)),
                    encoding="utf-8")
    return path


# ----------------------------------------------------------------------------
# Stages

def stage_synth(run: Run) -> StageRecord:
    cfg = run.config
    st = run.stage("synth")
    logo = LogoAsset.from_file(st.source(run.require("logo")))
    scenes_dir = st.source(run.require("scenes_dir"))
    size = cfg.synth.background_size

    binding = synthesis.build_binding_set(logo, cfg.synth.binding_count, seeded_rng(cfg.seed, "synth/binding"),
                                          size, cfg.synth.threshold, cfg.synth.binding_template)
    identity = synthesis.build_identity_set(logo, _scenes(scenes_dir), cfg.synth.identity_count,
                                            seeded_rng(cfg.seed, "synth/identity"), cfg.synth.threshold, size)
    for name, samples in (("binding", binding), ("identity", identity)):
        out = _fresh_dir(run.workdir / name)
        synthesis.write_samples(samples, out, name)
        st.output(out)
    return st.commit(binding=len(binding), identity=len(identity))


def stage_pretrain_relation(run: Run) -> StageRecord:
    cfg = run.config
    st = run.stage("pretrain-relation")
    manifest = load_manifest(st.source(run.require("relation_manifest")))
    cfg.check_relation_manifest(manifest)
    backend = base_backend(run, st)
    backend.register_token(SpecialToken(PAINTED, cfg.backend.embed_dim, TokenRole.relation),
                           TokenInit.from_word("painted"))
    critic = PrototypeJointEmbedder.from_manifest(manifest)
    ckpt = run.checkpoint("relation")
    state = trainer.run_phase1_relation(backend, manifest, trainer.relation_phase(cfg, manifest), critic,
                                        seeded_rng(cfg.seed, "train/relation"), checkpoint_dir=ckpt)
    save_checkpoint(backend, _fresh_dir(ckpt))
    hist = write_history(run.workdir / "relation" / HISTORY_NAME, state.scheduler_history)
    losses = _write_losses(run.workdir / "logs" / "relation" / "losses.jsonl", state.loss_history)
    for p in (ckpt, hist, losses):
        st.output(p)
    return st.commit(iterations=state.iteration, recalibrations=len(state.scheduler_history))


def stage_bind_token(run: Run) -> StageRecord:
    cfg = run.config
    st = run.stage("bind-token")
    manifest = load_manifest(st.input(run.workdir / "binding") / "binding.jsonl")
    relation = run.checkpoint("relation")
    if (relation / "manifest.json").exists():
        backend = load_stage_checkpoint(run, st.input(relation))
    else:
        log.warning("no relation checkpoint in %s; binding on the base backend", run.workdir)
        backend = base_backend(run, st)
    backend.register_token(SpecialToken(IDENTITY, cfg.backend.embed_dim, TokenRole.identity),
                           TokenInit.from_word(cfg.binding.init_word))
    ckpt = run.checkpoint("bind")
    state = trainer.run_phase2a_binding(backend, manifest, trainer.binding_phase(cfg, manifest),
                                        seeded_rng(cfg.seed, "train/bind"), checkpoint_dir=ckpt)
    save_checkpoint(backend, _fresh_dir(ckpt))
    st.output(ckpt)
    st.output(_write_losses(run.workdir / "logs" / "bind" / "losses.jsonl", state.loss_history))
    return st.commit(iterations=state.iteration, final_loss=state.loss_history[-1])


def stage_learn_identity(run: Run) -> StageRecord:
    cfg = run.config
    st = run.stage("learn-identity")
    bind = run.checkpoint("bind")
    if not (bind / "manifest.json").exists():
        raise PhaseOrderError(f"learn-identity needs the bind-token checkpoint ({bind}); run bind-token first")
    backend = load_stage_checkpoint(run, st.input(bind))
    manifest = load_manifest(st.input(run.workdir / "identity") / "identity.jsonl")
    ckpt = run.checkpoint("identity")
    _fresh_dir(ckpt)
    state = trainer.run_phase2b_identity(backend, manifest, trainer.identity_phase(cfg, manifest),
                                         seeded_rng(cfg.seed, "train/identity"), checkpoint_dir=ckpt)
    st.output(ckpt)
    st.output(_write_losses(run.workdir / "logs" / "identity" / "losses.jsonl", state.loss_history))
    return st.commit(iterations=state.iteration, final_loss=state.loss_history[-1])


def _token_slug(token: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in token).strip("_") or "token"


def stage_attn(run: Run, checkpoint: str = "bind", limit: int = 8, tokens: Sequence[str] = ATTN_TOKENS) -> StageRecord:
    """Attention maps of ``tokens`` over binding-set images; the identity token's prompt is reused with each word."""
    cfg = run.config
    st = run.stage("attn")
    backend = load_stage_checkpoint(run, st.input(run.checkpoint(checkpoint)))
    manifest = load_manifest(st.input(run.workdir / "binding") / "binding.jsonl")
    out = _fresh_dir(run.workdir / "attn" / checkpoint)
    (out / "maps").mkdir()
    items = []
    for i, rec in enumerate(list(manifest)[:limit]):
        image = read_rgb(manifest.image_path(rec))
        mask = read_rgb(manifest.resolve(rec.mask))[..., 0] > 127
        item = {"image": rec.image, "scores": {}, "overlays": {}}
        for tok in tokens:
            prompt = rec.prompt if tok == IDENTITY else rec.prompt.replace(IDENTITY, tok)
            stack = diag.token_attention(backend, image, prompt, tok, rng=seeded_rng(cfg.seed, f"attn/{i}"),
                                         source=rec.image)
            avg = diag.average_map(stack)
            item["scores"][tok] = diag.localization_score(avg, mask)
            rel = f"overlays/{i:02d}_{_token_slug(tok)}.png"
            write_png(out / rel, diag.overlay(image, avg))
            np.save(out / "maps" / f"{i:02d}_{_token_slug(tok)}.npy", avg)
            item["overlays"][tok] = rel
        items.append(item)
    wins = [it["scores"][tokens[0]] > it["scores"][tokens[1]] for it in items] if len(tokens) > 1 else []
    summary = {"images": len(items), "tokens": list(tokens)}
    if wins:
        summary[f"fraction_{_token_slug(tokens[0])}_beats_{_token_slug(tokens[1])}"] = float(np.mean(wins))
    (out / ATTENTION_NAME).write_text(json.dumps({"checkpoint": checkpoint, "items": items, "summary": summary},
                                                 indent=2, sort_keys=True) + "\n", encoding="utf-8")
    st.output(out)
    return st.commit(**summary)


def eval_embedders(run: Run) -> Embedders:
    joint = PrototypeJointEmbedder({})
    if run.config.paths.relation_manifest:
        joint = PrototypeJointEmbedder.from_manifest(load_manifest(run.require("relation_manifest")))
    return Embedders(joint=joint, clip_image=ColorLayoutEmbedder(), dino_image=StructureEmbedder())


def stage_eval(run: Run, checkpoint: str = "identity") -> StageRecord:
    cfg = run.config
    st = run.stage("eval")
    backend = load_stage_checkpoint(run, st.input(run.checkpoint(checkpoint)))
    logo = LogoAsset.from_file(st.source(run.require("logo")))
    grid = EvalGrid((logo.id,), tuple(cfg.eval.contexts or DEFAULT_CONTEXTS), tuple(cfg.eval.seeds))
    refs = {logo.id: [reference_image(logo, cfg.backend.image_size)]}
    samples = _fresh_dir(run.workdir / "eval" / "samples")
    report = run_grid({logo.id: backend}, grid, eval_embedders(run), refs, steps=cfg.eval.sample_steps,
                      dump_dir=samples, metadata={"checkpoint": checkpoint, "config_hash": cfg.config_hash()})
    path = report.save(run.workdir / "eval" / FIDELITY_NAME)
    st.output(path)
    st.output(samples)
    return st.commit(cells=len(report.cells), failures=report.metadata["failures"], **report.aggregates)


def stage_report(run: Run, out_dir=None) -> StageRecord:
    st = run.stage(REPORT_STAGE)
    out = Path(out_dir) if out_dir is not None else run.workdir / "report"
    render_report(st.ledger, out)
    st.output(out)
    return st.commit()
