"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary. Criteria 6-8 share one toy pipeline run driven through the
CLI, starting from the cached pretrained toy base.
"""

import json
import time

import numpy as np
import pytest
import torch

from logoinsert import diagnostics as diag
from logoinsert import pipeline, trainer
from logoinsert.backend import TokenInit, load_checkpoint
from logoinsert.backend.toy import ToyBackend, images_to_tensor
from logoinsert.cli import EXIT_OK, dispatch
from logoinsert.core import IDENTITY, PAINTED, LogoAsset, RunConfig, SpecialToken, TokenRole, load_manifest, read_rgb, seeded_rng
from logoinsert.embedders import ColorLayoutEmbedder, StructureEmbedder
from logoinsert.evalharness import EvalGrid, clip_i, dino_i, logo_correlation, prompt_for_scoring
from logoinsert.ledger import RunLedger, artifact_hash
from logoinsert.scheduler import CriticScoreTable, SchedulerState, read_history, recalibrate, replay, simulate_learner
from logoinsert.synthesis import (
    composite, margin_px, pick_solid_background, propose_placement, solid_image, transform_logo,
)

from acceptance_log import criterion
from oracles import binomial_tail_ge, richardson_central_difference, luminance_u8, mean_reversed, recalibrate_decimal

# frozen calibration of the end-to-end check
E2E_PROMPT = "a <V> on a plain background"
E2E_GENERATIONS = 8
E2E_R_THRESHOLD = 0.5
E2E_BUDGET_S = 600


# ----------------------------------------------------------------------------
# 1


def test_criterion_1_scheduler_exactness():
    with criterion(1, "scheduler exactness", budget_s=5) as info:
        names = ["A", "B", "C"]
        s = SchedulerState.uniform(names)
        new = recalibrate(CriticScoreTable({"A": 0.30, "B": 0.20, "C": 0.25}, 1), 2.0, names, 1, s.history)
        _, expect = recalibrate_decimal({"A": 0.30, "B": 0.20, "C": 0.25}, 2.0)
        for k, v in {"A": 0.32185, "B": 0.34495, "C": 0.33320}.items():
            assert abs(new.probs[k] - v) < 1e-5
            assert abs(new.probs[k] - float(expect[k])) < 1e-15

        assert all(p == 1 / 3 for p in recalibrate(CriticScoreTable(dict.fromkeys(names, 0.4), 1), 2.0).probs.values())
        lam1 = recalibrate(CriticScoreTable({"A": 0.9, "B": -0.3, "C": 0.1}, 1), 1.0)
        assert all(p == 1 / 3 for p in lam1.probs.values())

        rng = np.random.default_rng(0)
        mono_violations = shift_violations = 0
        for _ in range(10_000):
            n = int(rng.integers(2, 12))
            scores = rng.uniform(-1, 1, n)
            lam = float(rng.uniform(1.01, 8))
            keys = [f"o{i}" for i in range(n)]
            p = recalibrate(CriticScoreTable(dict(zip(keys, scores)), 1), lam).probs
            order = np.argsort(scores)
            ps = np.array([p[keys[i]] for i in order])
            mono_violations += int(np.any(np.diff(ps) > 1e-15))  # lower score -> higher probability
            c = float(rng.uniform(-0.5, 0.5))
            shifted = recalibrate(CriticScoreTable(dict(zip(keys, scores + c)), 1), lam).probs
            shift_violations += int(max(abs(shifted[k] - p[k]) for k in keys) > 1e-12)
        info["detail"] = f"monotonicity violations {mono_violations}, shift violations {shift_violations}"
        assert mono_violations == 0 and shift_violations == 0


# ----------------------------------------------------------------------------
# 2


def test_criterion_2_simulated_learner_balance():
    with criterion(2, "simulated-learner balance", budget_s=60) as info:
        delta, iters, f, lam, n_classes = 0.002, 2000, 100, 2.0, 20
        ac_std, uni_std = [], []
        for seed in range(20):
            init_rng = np.random.default_rng([seed, 0])
            init = {f"class{k:02d}": float(v) for k, v in enumerate(init_rng.uniform(0.1, 0.4, n_classes))}
            ac = simulate_learner(init, delta, iters, f, lam, np.random.default_rng([seed, 1]))
            uni = simulate_learner(init, delta, iters, f, lam, np.random.default_rng([seed, 2]), sampler="uniform")
            ac_std.append(float(np.std(list(ac.values()))))
            uni_std.append(float(np.std(list(uni.values()))))
        wins = sum(a < u for a, u in zip(ac_std, uni_std))
        p = binomial_tail_ge(wins, 20)
        info["detail"] = (f"mean std {np.mean(ac_std):.4f} vs uniform {np.mean(uni_std):.4f}, "
                          f"{wins}/20 wins, sign-test p={p:.2g}")
        assert np.mean(ac_std) < np.mean(uni_std)
        assert p < 0.05


# ----------------------------------------------------------------------------
# 3


def _logo(rng, i):
    h, w = (int(v) for v in rng.integers(12, 48, 2))
    # dark or light, so that a 0.35 luminance gap to some palette color exists
    lo, hi = ((0, 80), (190, 256))[i % 2]
    rgb = rng.integers(lo, hi, (h, w, 3))
    alpha = np.where(rng.random((h, w)) < 0.85, 255, rng.choice([0, 100, 200], size=(h, w)))
    alpha[h // 4:3 * h // 4, w // 4:3 * w // 4] = 255
    return LogoAsset.from_array(f"acc{i}", np.dstack([rgb, alpha]).astype(np.uint8))


def _composite_triple(i):
    rng = seeded_rng(7, f"acceptance/triple/{i}")
    logo = _logo(rng, i)
    size = int(rng.choice([48, 64, 128]))
    color = pick_solid_background(logo, rng)
    bg = solid_image(color, size)
    placement = propose_placement(logo, size, size, rng, rotation_range=15.0 * (i % 3 == 0))
    return logo, bg, color, composite(logo, bg, placement)


def test_criterion_3_compositing_invariants():
    with criterion(3, "compositing invariants on 500 triples", budget_s=60) as info:
        rgb_w = np.array([0.2126, 0.7152, 0.0722])
        for i in range(500):
            logo, bg, color, s = _composite_triple(i)
            raster = transform_logo(logo, s.placement.scale, s.placement.rotation_deg, bg.shape[0])
            lh, lw = raster.shape[:2]
            x, y = s.placement.top_left
            m = margin_px(*bg.shape[:2])
            assert m <= x and x + lw <= bg.shape[1] - m and m <= y and y + lh <= bg.shape[0] - m
            opaque = raster[..., 3] == 255
            assert np.array_equal(s.image[y:y + lh, x:x + lw][opaque], raster[..., :3][opaque])
            mask = np.zeros(bg.shape[:2], bool)
            mask[y:y + lh, x:x + lw] = raster[..., 3] > 127
            assert np.array_equal(s.mask, mask)
            assert abs(luminance_u8(color) - float(rgb_w @ np.asarray(logo.mean_color))) >= 0.35
            again = _composite_triple(i)[3]
            assert again.image.tobytes() == s.image.tobytes() and again.mask.tobytes() == s.mask.tobytes()
        info["detail"] = "500/500"


# ----------------------------------------------------------------------------
# 4


@pytest.fixture(scope="module")
def small_sets(tmp_path_factory, logo, bright_scenes):
    from logoinsert.synthesis import build_binding_set, build_identity_set, write_samples

    root = tmp_path_factory.mktemp("acc_sets")
    b = write_samples(build_binding_set(logo, 8, seeded_rng(0, "acc/binding")), root / "b", "binding")
    i = write_samples(build_identity_set(logo, bright_scenes, 8, seeded_rng(0, "acc/identity")), root / "i", "identity")
    return b, i


def test_criterion_4_freeze_contracts(relation_manifest, small_sets):
    binding, identity = small_sets
    with criterion(4, "freeze contracts", budget_s=60) as info:
        cfg = RunConfig.model_validate({"total_iters_A": 10, "recalib_freq_f": 5, "gens_per_eval": 1,
                                        "critic_sample_steps": 2, "binding": {"steps": 10},
                                        "identity": {"steps": 10}})
        b = ToyBackend()
        b.register_token(SpecialToken(PAINTED, 32, TokenRole.relation), TokenInit.from_word("painted"))
        from logoinsert.embedders import PrototypeJointEmbedder

        s1 = trainer.run_phase1_relation(b, relation_manifest, trainer.relation_phase(cfg, relation_manifest),
                                         PrototypeJointEmbedder.from_manifest(relation_manifest), seeded_rng(0, "a1"))
        assert s1.checksums_after["denoiser"] == s1.checksums_before["denoiser"]

        b.register_token(SpecialToken(IDENTITY, 32, TokenRole.identity), TokenInit.from_word("logo"))
        table = b.token_embedding_table().detach().clone()
        v = b.token_id(IDENTITY)
        s2 = trainer.run_phase2a_binding(b, binding, trainer.binding_phase(cfg, binding), seeded_rng(0, "a2"))
        assert s2.checksums_after["denoiser"] == s2.checksums_before["denoiser"]
        assert s2.checksums_after["text_encoder"] == s2.checksums_before["text_encoder"]
        after = b.token_embedding_table().detach()
        changed = [int(i) for i in torch.nonzero((after != table).any(dim=1)).ravel()]
        assert changed == [v]

        s3 = trainer.run_phase2b_identity(b, identity, trainer.identity_phase(cfg, identity), seeded_rng(0, "a3"))
        assert s3.checksums_after["text_encoder"] == s3.checksums_before["text_encoder"]
        info["detail"] = f"rows changed in binding: {changed} (<V> = {v})"


# ----------------------------------------------------------------------------
# 5


def test_criterion_5_loss_and_gradients():
    with criterion(5, "loss and gradient correctness", budget_s=120) as info:
        b = ToyBackend()
        b.register_token(SpecialToken(IDENTITY, 32, TokenRole.identity), TokenInit.from_word("logo"))
        rng = np.random.default_rng(5)
        x = images_to_tensor(rng.integers(0, 256, (2, 64, 64, 3)).astype(np.uint8))
        prompts = [f"a {IDENTITY} on a red background", "a blue star on a plain background"]
        t = torch.tensor([77, 901])
        eps = torch.randn(b.latent_shape(2), generator=torch.Generator().manual_seed(5), dtype=torch.float64)

        class Perfect:
            schedule = b.schedule
            encode_images = staticmethod(b.encode_images)
            encode_text = staticmethod(b.encode_text)

            @staticmethod
            def denoise(z_t, tt, cond):
                return eps.clone()

        assert float(trainer.ldm_loss(Perfect(), x, prompts, t, eps)) == 0.0

        def loss():
            return trainer.ldm_loss(b, x, prompts, t, eps)

        groups = b.param_groups()
        params = [(g, n, p) for g in groups for n, p in groups[g].items()]
        loss().backward()
        used = sorted({i for p in prompts for i in b.tokenize(p)})
        worst = 0.0
        for _ in range(100):
            g, name, p = params[rng.integers(len(params))]
            if g == "token_embeddings":
                idx = (int(rng.choice(used)), int(rng.integers(p.shape[1])))
            else:
                idx = tuple(int(rng.integers(s)) for s in p.shape)
            orig = float(p.data[idx])

            def f(val):
                p.data[idx] = val
                with torch.no_grad():
                    return float(loss())

            numeric = richardson_central_difference(f, orig, 1e-3)
            p.data[idx] = orig
            analytic = float(p.grad[idx])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
        info["detail"] = f"max relative error {worst:.2e} over 100 coordinates"
        assert worst < 1e-4


# ----------------------------------------------------------------------------
# 6-8: one toy pipeline run through the CLI


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_run")
    t0 = time.perf_counter()
    assert dispatch(["toy-assets", "--out", str(root)]) == EXIT_OK
    assets_s = time.perf_counter() - t0
    config = root / "config.yaml"
    stage_s = {}
    t0 = time.perf_counter()
    for stage in ("synth", "pretrain-relation", "bind-token", "learn-identity", "eval"):
        ts = time.perf_counter()
        code = dispatch([stage, "--config", str(config)])
        stage_s[stage] = time.perf_counter() - ts
        if code != EXIT_OK:
            pytest.fail(f"stage {stage} exited with {code}")
    pipeline_s = time.perf_counter() - t0
    return {"root": root, "config": config, "run": pipeline.Run.from_file(config), "pipeline_s": pipeline_s,
            "stage_s": stage_s, "assets_s": assets_s}


def test_criterion_6_scheduler_replay(toy_run):
    with criterion(6, "scheduler replay from the ledger") as info:
        run = toy_run["run"]
        ledger = RunLedger.open(run.workdir)
        assert ledger.is_dag()
        rec = next(r for r in ledger if r.stage == "pretrain-relation")
        rel = "relation/scheduler_history.jsonl"
        path = run.workdir / rel
        assert artifact_hash(path) == rec.outputs[rel]
        history = read_history(path)
        assert len(history) == run.config.total_iters_A // run.config.recalib_freq_f
        replayed = replay(history)
        assert replayed == [h["probs"] for h in history]
        info["detail"] = f"{len(history)} recalibrations replayed bit-exactly"


def test_criterion_7_attention_ordering(toy_run):
    with criterion(7, "attention ordering after token binding") as info:
        config = toy_run["config"]
        run = toy_run["run"]
        n = run.config.synth.binding_count
        assert dispatch(["attn", "--config", str(config), "--checkpoint", "bind", "--limit", str(n)]) == EXIT_OK
        summary = json.loads((run.workdir / "attn" / "bind" / "attention.json").read_text())
        items = summary["items"]
        assert len(items) == n
        wins = [it["scores"][IDENTITY] > it["scores"]["logo"] for it in items]
        frac = float(np.mean(wins))

        backend = pipeline.load_stage_checkpoint(run, run.checkpoint("bind"))
        manifest = load_manifest(run.workdir / "binding" / "binding.jsonl")
        rec = next(iter(manifest))
        stack = diag.token_attention(backend, read_rgb(manifest.image_path(rec)), rec.prompt, IDENTITY,
                                     rng=seeded_rng(0, "acc/attn"))
        oracle_err = float(np.abs(diag.average_map(stack) - mean_reversed(stack.maps)).max())
        mean_v = np.mean([it["scores"][IDENTITY] for it in items])
        mean_l = np.mean([it["scores"]["logo"] for it in items])
        info["detail"] = (f"<V> beats logo on {frac:.0%} of {n} images (mean {mean_v:.3f} vs {mean_l:.3f}); "
                          f"average_map oracle error {oracle_err:.1e}")
        assert frac >= 0.8
        assert oracle_err <= 1e-12


def test_criterion_8_toy_end_to_end(toy_run):
    with criterion(8, "toy end-to-end") as info:
        run = toy_run["run"]
        tuned = pipeline.load_stage_checkpoint(run, run.checkpoint("identity"))
        logo = LogoAsset.from_file(run.require("logo"))
        rs = [logo_correlation(tuned.generate(E2E_PROMPT, None, seeded_rng(k, "acc/e2e")), logo).r
              for k in range(E2E_GENERATIONS)]
        base, _ = load_checkpoint(run.require("base_checkpoint"))
        base_rs = [logo_correlation(base.generate(E2E_PROMPT.replace(IDENTITY, "logo"), None,
                                                  seeded_rng(k, "acc/e2e")), logo).r
                   for k in range(E2E_GENERATIONS)]
        fidelity = json.loads((run.workdir / "eval" / "fidelity.json").read_text())
        info["detail"] = (f"pipeline {toy_run['pipeline_s']:.0f}s (base from cache; assets {toy_run['assets_s']:.0f}s), "
                          f"mean r {np.mean(rs):.3f} over {E2E_GENERATIONS} generations "
                          f"(untuned base {np.mean(base_rs):.3f}), eval failures {fidelity['metadata']['failures']}")
        assert fidelity["metadata"]["failures"] == 0
        assert toy_run["pipeline_s"] < E2E_BUDGET_S
        assert np.mean(rs) > E2E_R_THRESHOLD


# ----------------------------------------------------------------------------
# 9


def test_criterion_9_metric_harness():
    from test_evalharness import SUBSTITUTIONS

    with criterion(9, "metric harness") as info:
        rng = np.random.default_rng(9)
        for emb in (ColorLayoutEmbedder(), StructureEmbedder()):
            for _ in range(50):
                a = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
                assert clip_i(a, [a], emb) == 1.0
                assert dino_i(a, [a], emb) == 1.0
        assert len(SUBSTITUTIONS) == 20
        assert all(prompt_for_scoring(t) == want for t, want in SUBSTITUTIONS)
        for logos, contexts, seeds in [(1, 1, 1), (2, 3, 2), (3, 20, 5)]:
            grid = EvalGrid(tuple(f"l{i}" for i in range(logos)), tuple(f"c{i} <V>" for i in range(contexts)),
                            tuple(range(seeds)))
            assert grid.size == logos * contexts * seeds
        info["detail"] = "100 self-similarities exactly 1.0, 20/20 substitutions"
