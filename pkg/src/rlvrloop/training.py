"""SFT and DPO optimization of the tabular policy.

Both objectives are optimized by full-batch gradient descent with analytic
gradients; no adaptive moments, no minibatching, no stochastic anything, so
a fixed (data, config, initial parameters) triple reproduces bit-identical
final parameters.

SFT minimizes mean negative log-likelihood of positive responses. DPO
minimizes

    mean over pairs of  -log sigmoid(beta * ((log pi(y_w|x) - log ref(y_w|x))
                                           - (log pi(y_l|x) - log ref(y_l|x))))

against a frozen reference snapshot. At pi == ref every pair contributes
exactly ln 2. The per-task softmax heads make the gradients closed-form:
d log softmax(s)[a] / d s_j = 1[j == a] - softmax(s)_j.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import TrainingDivergedError, TrainingError
from .pairs import PreferencePair, SFTExample
from .policy import ReferencePolicy, TabularPolicy, softmax

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class DPOConfig:
    beta: float = 0.1
    learning_rate: float = 0.5
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise TrainingError(f"beta must be > 0, got {self.beta}")
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")


def _param_offsets(policy: TabularPolicy) -> dict[str, tuple[int, int]]:
    """Flat-theta offsets of (line block, candidate block) per task."""
    offsets = {}
    cursor = 0
    for tid in policy.task_order():
        head = policy.heads[tid]
        line_at = cursor
        cursor += head.line_logits.size
        cand_at = cursor
        cursor += head.cand_logits.size
        offsets[tid] = (line_at, cand_at)
    return offsets


def _require_actions(kind: str, task_id: str, actions) -> tuple[int, int]:
    if actions is None:
        raise TrainingError(f"{kind} for task {task_id} carries no (line, candidate) actions")
    return actions


def _accumulate_logprob_grad(
    policy: TabularPolicy,
    offsets: dict[str, tuple[int, int]],
    grad: np.ndarray,
    task_id: str,
    actions: tuple[int, int],
    weight: float,
) -> None:
    """grad += weight * d log pi(line, cand | task) / d theta."""
    head = policy.head(task_id)
    line, cand = actions
    n_lines, n_cands = head.cand_logits.shape
    if not (0 <= line < n_lines and 0 <= cand < n_cands):
        raise TrainingError(f"{task_id}: actions ({line}, {cand}) outside policy table")
    line_at, cand_at = offsets[task_id]
    p_line = softmax(head.line_logits)
    grad[line_at : line_at + n_lines] -= weight * p_line
    grad[line_at + line] += weight
    row_at = cand_at + line * n_cands
    p_cand = softmax(head.cand_logits[line])
    grad[row_at : row_at + n_cands] -= weight * p_cand
    grad[row_at + cand] += weight


# ---------------------------------------------------------------------------
# SFT
# ---------------------------------------------------------------------------


def sft_loss(policy: TabularPolicy, examples: Sequence[SFTExample]) -> float:
    if not examples:
        return 0.0
    total = 0.0
    for ex in examples:
        line, cand = _require_actions("sft example", ex.task_id, ex.actions)
        total -= policy.logprob(ex.task_id, line, cand)
    return total / len(examples)


def sft_loss_and_grad(policy: TabularPolicy, examples: Sequence[SFTExample]) -> tuple[float, np.ndarray]:
    offsets = _param_offsets(policy)
    grad = policy.zero_grad_like()
    if not examples:
        return 0.0, grad
    total = 0.0
    for ex in examples:
        line, cand = _require_actions("sft example", ex.task_id, ex.actions)
        total -= policy.logprob(ex.task_id, line, cand)
        _accumulate_logprob_grad(policy, offsets, grad, ex.task_id, (line, cand), -1.0 / len(examples))
    return total / len(examples), grad


def sft_train(
    policy: TabularPolicy,
    examples: Sequence[SFTExample],
    config: DPOConfig,
    history_out: list | None = None,
) -> TabularPolicy:
    """Full-batch gradient descent on mean NLL; mutates and returns policy."""
    if not examples:
        log.warning("sft_train called with no examples; policy unchanged")
        return policy
    theta = policy.theta()
    for epoch in range(config.epochs):
        loss, grad = sft_loss_and_grad(policy, examples)
        if history_out is not None:
            history_out.append({"epoch": epoch, "loss": loss})
        theta = theta - config.learning_rate * grad
        policy.set_theta(theta)
    final = sft_loss(policy, examples)
    if history_out is not None:
        history_out.append({"epoch": config.epochs, "loss": final})
    policy.fine_tuned = True
    return policy


# ---------------------------------------------------------------------------
# DPO
# ---------------------------------------------------------------------------


def _pair_terms(
    policy: TabularPolicy, reference: ReferencePolicy, pair: PreferencePair, beta: float
) -> tuple[float, tuple[int, int], tuple[int, int]]:
    w = _require_actions("pair winner", pair.task_id, pair.winner.actions)
    l = _require_actions("pair loser", pair.task_id, pair.loser.actions)
    delta_policy = policy.logprob(pair.task_id, *w) - policy.logprob(pair.task_id, *l)
    delta_ref = reference.logprob(pair.task_id, *w) - reference.logprob(pair.task_id, *l)
    return beta * (delta_policy - delta_ref), w, l


def dpo_loss(
    policy: TabularPolicy,
    reference: ReferencePolicy,
    pairs: Sequence[PreferencePair],
    beta: float,
) -> float:
    if not pairs:
        return 0.0
    total = 0.0
    for pair in pairs:
        z, _, _ = _pair_terms(policy, reference, pair, beta)
        total += float(np.logaddexp(0.0, -z))  # -log sigmoid(z), overflow-safe
    return total / len(pairs)


def dpo_loss_and_grad(
    policy: TabularPolicy,
    reference: ReferencePolicy,
    pairs: Sequence[PreferencePair],
    beta: float,
) -> tuple[float, np.ndarray]:
    offsets = _param_offsets(policy)
    grad = policy.zero_grad_like()
    if not pairs:
        return 0.0, grad
    total = 0.0
    for pair in pairs:
        z, w, l = _pair_terms(policy, reference, pair, beta)
        total += float(np.logaddexp(0.0, -z))
        # d/dtheta -log sigmoid(z) = -sigmoid(-z) * dz/dtheta
        coeff = -float(1.0 / (1.0 + np.exp(z))) * beta / len(pairs)
        _accumulate_logprob_grad(policy, offsets, grad, pair.task_id, w, coeff)
        _accumulate_logprob_grad(policy, offsets, grad, pair.task_id, l, -coeff)
    return total / len(pairs), grad


def dpo_margin(
    policy: TabularPolicy,
    reference: ReferencePolicy,
    pairs: Sequence[PreferencePair],
    beta: float,
) -> float:
    """Mean implicit-reward margin beta * (winner log-ratio - loser log-ratio)."""
    if not pairs:
        return 0.0
    return float(
        np.mean([_pair_terms(policy, reference, pair, beta)[0] for pair in pairs])
    )


def dpo_train(
    policy: TabularPolicy,
    pairs: Sequence[PreferencePair],
    config: DPOConfig,
    reference: ReferencePolicy | None = None,
    history_out: list | None = None,
) -> TabularPolicy:
    """Full-batch DPO against a reference frozen at entry.

    Aborts with TrainingDivergedError if the loss ever exceeds ten times
    its initial value, which on this objective only happens when the
    learning rate is wildly too hot.
    """
    if reference is None:
        reference = ReferencePolicy(policy)
    if not pairs:
        log.warning("dpo_train called with no pairs; policy unchanged")
        return policy
    theta = policy.theta()
    initial_loss: float | None = None
    for epoch in range(config.epochs):
        loss, grad = dpo_loss_and_grad(policy, reference, pairs, config.beta)
        if initial_loss is None:
            initial_loss = loss
        if loss > DIVERGENCE_FACTOR * max(initial_loss, 1e-12):
            raise TrainingDivergedError(
                f"dpo loss {loss:.4f} exceeded {DIVERGENCE_FACTOR}x initial {initial_loss:.4f} "
                f"at epoch {epoch}"
            )
        if history_out is not None:
            history_out.append(
                {"epoch": epoch, "loss": loss, "margin": dpo_margin(policy, reference, pairs, config.beta)}
            )
        theta = theta - config.learning_rate * grad
        policy.set_theta(theta)
    if history_out is not None:
        history_out.append(
            {
                "epoch": config.epochs,
                "loss": dpo_loss(policy, reference, pairs, config.beta),
                "margin": dpo_margin(policy, reference, pairs, config.beta),
            }
        )
    return policy


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def kl_regularized_reward(
    policy: TabularPolicy,
    reference: ReferencePolicy,
    task_id: str,
    actions: tuple[int, int],
    reward: float,
    beta: float,
) -> float:
    """Verifier reward penalized by the policy's drift from the reference.

    Reporting-only: the optimization itself uses the DPO objective, which
    carries the same trust region implicitly.
    """
    line, cand = actions
    log_ratio = policy.logprob(task_id, line, cand) - reference.logprob(task_id, line, cand)
    return float(reward - beta * log_ratio)


def write_history_csv(history: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not history:
        path.write_text("", encoding="utf-8")
        return
    fields = list(history[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
