"""Actor-critic sampling over object classes.

A critic scores how well the model currently paints onto each object class;
classes scoring below the mean get exponentially more sampling weight:

    w(k) = lambda ** (mean_score - s_k),    p(k) = w(k) / sum_j w(j)

Probabilities are refreshed every ``recalib_freq_f`` training iterations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .core import PAINTED, ObjectClass, seeded_rng, spawn_seed
from .errors import BackendError, CriticError, DomainError, IncompleteScoreError


@dataclass(frozen=True)
class CriticScoreTable:
    scores: Mapping[str, float]
    iteration: int = 0
    mean_score: float = field(init=False)

    def __post_init__(self):
        if not self.scores:
            raise IncompleteScoreError("empty score table")
        object.__setattr__(self, "scores", dict(self.scores))
        object.__setattr__(self, "mean_score", math.fsum(self.scores.values()) / len(self.scores))


@dataclass(frozen=True)
class SchedulerState:
    weights: Mapping[str, float]
    probs: Mapping[str, float]
    lambda_: float
    recalib_freq_f: int = 100
    history: tuple[CriticScoreTable, ...] = ()

    @property
    def names(self) -> list[str]:
        return list(self.probs)

    @classmethod
    def uniform(cls, names: Sequence[str], lambda_: float = 2.0, recalib_freq_f: int = 100) -> "SchedulerState":
        if not names:
            raise DomainError("need at least one object class")
        n = len(names)
        return cls({k: 1.0 for k in names}, {k: 1.0 / n for k in names}, lambda_, recalib_freq_f)


def recalibrate(
    scores: CriticScoreTable,
    lambda_: float,
    classes: Optional[Sequence[str]] = None,
    recalib_freq_f: int = 100,
    history: Sequence[CriticScoreTable] = (),
) -> SchedulerState:
    """Turn a critic score table into sampling weights and probabilities."""
    if not (isinstance(lambda_, (int, float)) and math.isfinite(lambda_) and lambda_ > 0):
        raise DomainError(f"lambda must be a finite positive number, got {lambda_!r}")
    if classes is not None:
        missing = [k for k in classes if k not in scores.scores]
        if missing:
            raise IncompleteScoreError(f"no critic score for: {', '.join(missing)}")
        extra = [k for k in scores.scores if k not in set(classes)]
        if extra:
            raise IncompleteScoreError(f"unexpected classes in score table: {', '.join(extra)}")
    bad = [k for k, s in scores.scores.items() if not math.isfinite(s)]
    if bad:
        raise DomainError(f"non-finite critic score for: {', '.join(bad)}")

    names = list(classes) if classes is not None else list(scores.scores)
    mean = scores.mean_score
    weights = {k: float(lambda_) ** (mean - scores.scores[k]) for k in names}
    total = math.fsum(weights.values())
    probs = {k: w / total for k, w in weights.items()}
    return SchedulerState(weights, probs, float(lambda_), recalib_freq_f, tuple(history) + (scores,))


def sample_object(state: SchedulerState, rng: np.random.Generator) -> str:
    names = state.names
    cdf = np.cumsum([state.probs[k] for k in names])
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    return names[min(idx, len(names) - 1)]


# ----------------------------------------------------------------------------
# Critic

class JointEmbedder(Protocol):
    """Image/text embedder sharing one space (CLIP-like)."""

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    aa, bb = float(np.dot(a, a)), float(np.dot(b, b))
    if aa == 0 or bb == 0 or not (math.isfinite(aa) and math.isfinite(bb)):
        raise CriticError("cannot take cosine of a zero or non-finite embedding")
    # sqrt(aa * bb) rather than |a| * |b|: for a == b this is sqrt(fl(aa^2)) == aa exactly, so cos(a, a) == 1
    return float(np.clip(np.dot(a, b) / math.sqrt(aa * bb), -1.0, 1.0))


def relation_prompts(object1: str, object2: str, token: str = PAINTED) -> tuple[str, str]:
    """(prompt with the relation token, plain-language prompt) for one object pair."""
    return f"{object1} {token} on {object2}", f"{object1} painted on {object2}"


def score_object(
    backend,
    critic: JointEmbedder,
    obj2: ObjectClass | str,
    object1_pool: Sequence[str],
    gens_per_eval: int,
    rng: np.random.Generator,
    steps: Optional[int] = None,
) -> float:
    """Mean critic cosine between generations for ``obj2`` and the plain prompt."""
    if gens_per_eval < 1:
        raise DomainError("gens_per_eval must be >= 1")
    if not object1_pool:
        raise DomainError("object1 pool is empty")
    name = obj2.name if isinstance(obj2, ObjectClass) else obj2
    draws = [(object1_pool[int(rng.integers(len(object1_pool)))], spawn_seed(rng)) for _ in range(gens_per_eval)]

    sims = []
    for i, (object1, seed) in enumerate(draws):
        prompt, plain = relation_prompts(object1, name)
        try:
            image = backend.generate(prompt, steps, seeded_rng(seed, f"critic/{name}/{i}"))
        except BackendError:
            raise
        except Exception as e:
            raise BackendError(f"generation failed for {prompt!r}: {e}") from e
        try:
            sims.append(cosine(critic.embed_image(image), critic.embed_text(plain)))
        except CriticError:
            raise
        except Exception as e:
            raise CriticError(f"critic failed on {plain!r}: {e}") from e
    # fsum is exactly rounded, so the result does not depend on reduction order
    return math.fsum(sims) / len(sims)


def score_all(backend, critic, classes: Sequence[ObjectClass | str], object1_pool, gens_per_eval, rng,
              iteration: int = 0, steps: Optional[int] = None) -> CriticScoreTable:
    scores = {}
    for obj2 in classes:
        name = obj2.name if isinstance(obj2, ObjectClass) else obj2
        scores[name] = score_object(backend, critic, obj2, object1_pool, gens_per_eval, rng, steps)
    return CriticScoreTable(scores, iteration)


# ----------------------------------------------------------------------------
# History persistence

def history_record(state: SchedulerState) -> dict:
    table = state.history[-1]
    return {
        "iteration": table.iteration,
        "lambda": state.lambda_,
        "mean_score": table.mean_score,
        "scores": dict(table.scores),
        "weights": dict(state.weights),
        "probs": dict(state.probs),
    }


def write_history(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return path


def read_history(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def replay(records: Sequence[dict], lambda_: Optional[float] = None) -> list[dict[str, float]]:
    """Recompute the probability trajectory from recorded critic scores alone."""
    out = []
    for rec in records:
        lam = rec["lambda"] if lambda_ is None else lambda_
        table = CriticScoreTable(rec["scores"], rec["iteration"])
        out.append(dict(recalibrate(table, lam, classes=list(rec["scores"])).probs))
    return out


# ----------------------------------------------------------------------------
# Synthetic learner

def simulate_learner(
    initial_scores: Mapping[str, float],
    delta: float,
    iters: int,
    recalib_freq_f: int,
    lambda_: float,
    rng: np.random.Generator,
    sampler: str = "actor_critic",
    cap: float = 1.0,
) -> dict[str, float]:
    """Toy learner: a class's score rises by ``delta`` each time it is sampled.

    Returns the final per-class scores. Under ``sampler="uniform"`` the
    probabilities never change; under ``"actor_critic"`` they are recalibrated
    from the current scores every ``recalib_freq_f`` iterations.
    """
    if sampler not in ("uniform", "actor_critic"):
        raise DomainError(f"unknown sampler {sampler!r}")
    scores = dict(initial_scores)
    names = list(scores)
    state = SchedulerState.uniform(names, lambda_, recalib_freq_f)
    for a in range(1, iters + 1):
        k = sample_object(state, rng)
        scores[k] = min(cap, scores[k] + delta)
        if sampler == "actor_critic" and a % recalib_freq_f == 0:
            state = recalibrate(CriticScoreTable(scores, a), lambda_, names, recalib_freq_f)
    return scores
