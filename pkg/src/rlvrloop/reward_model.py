"""Linear pairwise reward model for best-of-k patch selection.

Features are cheap, deterministic functions of (problem statement, patch):
size and location statistics, lexical overlap with the problem statement,
an empty-patch indicator, and two issue-grounded signals that make
synthetic suites linearly separable: whether the patch edits the statement
the issue points at, and how closely the replacement matches the fix the
issue quotes. Scores are w . features; ranking is a pure argmax, so any
positive rescaling or constant shift of scores leaves selections unchanged.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError, TrainingError
from .jsonl import SCHEMA_VERSION
from .rollout import Patch, Trajectory
from .tasks import SynthTask

log = logging.getLogger(__name__)

RM_SCHEMA = "pairwise_reward_model"
FEATURIZATION_VERSION = 1
N_FEATURES = 8

_HINT_LINE_RE = re.compile(r"\b(?:statement|line)\s+(\d+)\b")
_QUOTE_RE = re.compile(r"`([^`]+)`")
_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+|[+\-*=]")


def _tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def _jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 0.0
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def _normalize(stmt: str) -> str:
    return " ".join(stmt.split())


def _edit_line(location: str) -> int | None:
    # "line:3" for synthetic patches, "path:start:end" for real ones.
    parts = location.split(":")
    for piece in parts[1:2] if parts[0] == "line" else parts[-2:-1]:
        if piece.lstrip("-").isdigit():
            return int(piece)
    return None


def featurize(problem_statement: str, patch: Patch | None) -> np.ndarray:
    """Fixed-length feature vector; identical inputs give identical outputs."""
    f = np.zeros(N_FEATURES, dtype=np.float64)
    if patch is None or not patch.edits:
        f[0] = 1.0  # empty patch indicator
        return f
    replacement = "\n".join(text for _, text in patch.edits)
    lines = [ln for ln in (_edit_line(loc) for loc, _ in patch.edits) if ln is not None]
    f[1] = float(len(patch.edits))
    f[2] = len(replacement) / 100.0
    f[3] = (sum(lines) / len(lines)) / 10.0 if lines else 0.0
    f[4] = _jaccard(_tokens(replacement), _tokens(problem_statement))

    hint = _HINT_LINE_RE.search(problem_statement)
    if hint is not None and lines:
        f[5] = 1.0 if int(hint.group(1)) in lines else 0.0

    quotes = _QUOTE_RE.findall(problem_statement)
    if quotes:
        norm_repl = _normalize(replacement)
        f[6] = max(_jaccard(_tokens(q), _tokens(replacement)) for q in quotes)
        f[7] = 1.0 if any(_normalize(q) == norm_repl for q in quotes) else 0.0
    return f


@dataclass(frozen=True)
class RMExample:
    problem_statement: str
    patch_text: str
    feature_vector: np.ndarray
    label_reward: int

    def __post_init__(self):
        if self.feature_vector.shape != (N_FEATURES,):
            raise TrainingError(
                f"feature vector has shape {self.feature_vector.shape}, expected ({N_FEATURES},)"
            )


def rm_example(problem_statement: str, patch: Patch | None, reward: int) -> RMExample:
    return RMExample(
        problem_statement=problem_statement,
        patch_text="" if patch is None else "\n".join(t for _, t in patch.edits),
        feature_vector=featurize(problem_statement, patch),
        label_reward=reward,
    )


@dataclass(frozen=True)
class RMConfig:
    learning_rate: float = 0.5
    epochs: int = 200
    seed: int = 0


class PairwiseRM:
    def __init__(self, weights: np.ndarray | None = None):
        self.weights = (
            np.zeros(N_FEATURES, dtype=np.float64) if weights is None else np.asarray(weights, float)
        )
        self.featurization_version = FEATURIZATION_VERSION

    def score(self, features: np.ndarray) -> float:
        return float(self.weights @ features)

    def score_patch(self, problem_statement: str, patch: Patch | None) -> float:
        return self.score(featurize(problem_statement, patch))

    def save(self, path: str | Path) -> None:
        rec = {
            "schema": RM_SCHEMA,
            "schema_version": SCHEMA_VERSION,
            "featurization_version": self.featurization_version,
            "weights": self.weights.tolist(),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PairwiseRM":
        try:
            rec = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read reward model {path}: {exc}") from exc
        if rec.get("schema") != RM_SCHEMA:
            raise CheckpointError(f"{path}: not a reward model checkpoint")
        if rec.get("featurization_version") != FEATURIZATION_VERSION:
            raise CheckpointError(
                f"{path}: featurization version {rec.get('featurization_version')} does not match "
                f"current {FEATURIZATION_VERSION}; refeaturize before loading"
            )
        return cls(weights=np.asarray(rec["weights"], dtype=np.float64))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def rm_loss_and_grad(
    weights: np.ndarray, pairs: Sequence[tuple[RMExample, RMExample]]
) -> tuple[float, np.ndarray]:
    """Mean -log sigmoid(score_w - score_l) and its gradient in w."""
    grad = np.zeros_like(weights)
    if not pairs:
        return 0.0, grad
    total = 0.0
    for winner, loser in pairs:
        diff = winner.feature_vector - loser.feature_vector
        z = float(weights @ diff)
        total += float(np.logaddexp(0.0, -z))
        grad -= (1.0 / (1.0 + np.exp(z))) * diff
    return total / len(pairs), grad / len(pairs)


def rm_train(
    pairs: Sequence[tuple[RMExample, RMExample]],
    config: RMConfig = RMConfig(),
    history_out: list | None = None,
) -> PairwiseRM:
    """Full-batch gradient descent from w = 0; deterministic."""
    if not pairs:
        raise TrainingError("rm_train needs at least one (winner, loser) pair")
    if all(np.array_equal(w.feature_vector, l.feature_vector) for w, l in pairs):
        log.warning("every rm pair has identical features; gradient is zero, returning w = 0")
        return PairwiseRM()
    weights = np.zeros(N_FEATURES, dtype=np.float64)
    for epoch in range(config.epochs):
        loss, grad = rm_loss_and_grad(weights, pairs)
        if history_out is not None:
            history_out.append({"epoch": epoch, "loss": loss})
        weights = weights - config.learning_rate * grad
    if history_out is not None:
        final, _ = rm_loss_and_grad(weights, pairs)
        history_out.append({"epoch": config.epochs, "loss": final})
    return PairwiseRM(weights=weights)


def ranking_accuracy(rm: PairwiseRM, pairs: Sequence[tuple[RMExample, RMExample]]) -> float:
    """Fraction of held-out pairs where the winner outscores the loser."""
    if not pairs:
        return 0.0
    hits = sum(
        1 for w, l in pairs if rm.score(w.feature_vector) > rm.score(l.feature_vector)
    )
    return hits / len(pairs)


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankingResult:
    selected_index: int
    scores: tuple[float, ...]


def rank_best_of_k(
    rm: PairwiseRM, problem_statement: str, patches: Sequence[Patch | None]
) -> RankingResult:
    """Pick the highest-scoring patch; ties break toward the lowest index."""
    if len(patches) == 0:
        raise ValueError("cannot rank an empty candidate list")
    scores = [rm.score_patch(problem_statement, p) for p in patches]
    return RankingResult(selected_index=int(np.argmax(scores)), scores=tuple(scores))


def build_rm_training_pairs(
    preference_pairs, tasks_by_id: dict
) -> list[tuple[RMExample, RMExample]]:
    """RM pairs from preference pairs, repair-step patches only.

    Sides are rebuilt from their (line, candidate) actions against the task's
    candidate table; sides without actions featurize as empty patches, which
    is exactly the signal the empty-patch indicator exists for.
    """
    out = []
    for pair in preference_pairs:
        task = tasks_by_id.get(pair.task_id)
        if not isinstance(task, SynthTask):
            continue
        out.append(
            (
                rm_example(task.issue, _patch_from_actions(task, pair.winner.actions), 1),
                rm_example(task.issue, _patch_from_actions(task, pair.loser.actions), 0),
            )
        )
    return out


def _patch_from_actions(task: SynthTask, actions: tuple[int, int] | None) -> Patch | None:
    if actions is None:
        return None
    line, cand = actions
    return Patch(
        edits=((f"line:{line}", task.candidates[line][cand]),),
        rendering=f"({line}, {cand})",
        synth=(line, cand),
    )


def rm_examples_from_rollouts(
    trajectories: Sequence[Trajectory], rewards_by_ref: dict
) -> list[RMExample]:
    """Labeled examples straight from scored rollouts (for held-out checks)."""
    out = []
    for traj in trajectories:
        rec = rewards_by_ref.get(traj.traj_id)
        if rec is None:
            continue
        out.append(rm_example_from_trajectory(traj, rec.reward))
    return out


def rm_example_from_trajectory(traj: Trajectory, reward: int, problem_statement: str = "") -> RMExample:
    # The prompt of the first step embeds the issue; good enough for overlap
    # features when the caller has no task object handy.
    statement = problem_statement or traj.steps[0].prompt
    return rm_example(statement, traj.patch, reward)
