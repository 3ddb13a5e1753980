"""Advantage estimators (TD, MC, GAE), the normalization schemes applied
before PPO-style optimization, and the combined per-token advantage that
adds a group-normalized outcome signal to the GAE term.

All outputs here are optimizer constants: normalization statistics are
frozen floats and nothing differentiates through an advantage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import EnvState, Trajectory
from .errors import ContractError
from .policy import PolicyModel
from .rewards import GroupContext, PrefixValueSeries

EPS = 1e-8


def _values_array(series) -> np.ndarray:
    if isinstance(series, PrefixValueSeries):
        return series.values.data
    if isinstance(series, Tensor):
        return series.data
    return np.asarray(series, dtype=np.float64)


def td_advantage(series, t: int, terminal_reward: float) -> float:
    """One-step TD advantage for the sampled token t (1-based): the reward at
    t plus the prefix-value increment across it. Intermediate rewards are
    zero, so this equals the token log-ratio except at the final step."""
    values = _values_array(series)
    T = values.shape[0] - 1
    if not 1 <= t <= T:
        raise ContractError(f"t={t} outside 1..{T}")
    r_t = terminal_reward if t == T else 0.0
    return float(r_t + values[t] - values[t - 1])


def td_deltas(series, terminal_reward: float) -> np.ndarray:
    """All sampled-token TD advantages of a trajectory at once."""
    values = _values_array(series)
    deltas = np.diff(values)
    deltas[-1] += terminal_reward
    return deltas


def mc_advantage(series, t: int, outcome: float) -> float:
    """Sequence return minus the value of the state token t was emitted from."""
    values = _values_array(series)
    T = values.shape[0] - 1
    if not 1 <= t <= T:
        raise ContractError(f"t={t} outside 1..{T}")
    return float(outcome - values[t - 1])


def candidate_td_rows(model: PolicyModel, rm, behavior,
                      states: Sequence[EnvState], beta: float) -> np.ndarray:
    """TD advantage of every candidate token at every state, from one logits
    evaluation per model: beta * (log pi_rm - log pi_behavior), shape (n, V).

    The behavior snapshot doubles as the reference, so these are local
    improvement signals relative to the current sampling distribution."""
    rm_t = rm.tensors() if hasattr(rm, "tensors") else rm
    old_t = behavior.tensors() if hasattr(behavior, "tensors") else behavior
    rm_rows = model.log_prob_rows(rm_t, states).data
    old_rows = model.log_prob_rows(old_t, states).data
    return beta * (rm_rows - old_rows)


def candidate_td(model: PolicyModel, rm, behavior, state: EnvState,
                 candidate: int, beta: float) -> float:
    return float(candidate_td_rows(model, rm, behavior, [state], beta)[0, candidate])


def gae(deltas: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Exponentially weighted suffix sums of TD advantages (backward pass)."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError("lambda must lie in [0, 1]")
    deltas = np.asarray(deltas, dtype=np.float64)
    out = np.empty_like(deltas)
    acc = 0.0
    for i in range(deltas.shape[0] - 1, -1, -1):
        acc = deltas[i] + gamma * lam * acc
        out[i] = acc
    return out


@dataclass
class ValueStats:
    mu: float
    sigma: float
    eps: float = EPS


def minibatch_normalize_values(values, eps: float = EPS):
    """Standardize prefix values with frozen minibatch moments.

    Accepts a numpy array or a graph Tensor; either way the statistics are
    plain floats, so no gradient ever flows through them. TD differences of
    the output scale by 1/(sigma + eps).
    """
    data = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if data.size < 2:
        raise ContractError("minibatch value normalization needs >= 2 states")
    stats = ValueStats(float(data.mean()), float(data.std()), eps)
    scale = 1.0 / (stats.sigma + eps)
    if isinstance(values, Tensor):
        return (values - stats.mu) * scale, stats
    return (data - stats.mu) * scale, stats


@dataclass
class TdStats:
    mu: float
    sigma: float
    eps: float = EPS


def prompt_group_normalize(deltas: np.ndarray, eps: float = EPS):
    """Standardize sampled-token TD advantages with moments over every
    (rollout, timestep) pair of one prompt's group; stats are frozen."""
    deltas = np.asarray(deltas, dtype=np.float64)
    stats = TdStats(float(deltas.mean()), float(deltas.std()), eps)
    return (deltas - stats.mu) / (stats.sigma + eps), stats


def group_outcome_stats(outcomes: Sequence[int]) -> tuple[float, float]:
    """Population mean and standard deviation of the group's binary outcomes."""
    if len(outcomes) < 1:
        raise ContractError("need at least one outcome")
    arr = np.asarray(outcomes, dtype=np.float64)
    mu = float(arr.mean())
    return mu, float(np.sqrt(np.mean((arr - mu) ** 2)))


def combined_token_advantage(outcome: int, group: GroupContext, gae_value: float) -> float:
    """Group-normalized outcome signal plus the token-level GAE advantage.
    Degenerate groups (zero outcome spread) contribute no outcome term."""
    if group.s == 0.0:
        return float(gae_value)
    return float((outcome - group.mu) / group.s + gae_value)


# ---------------------------------------------------------------------------
# batch assembly (normalization order: minibatch values -> group deltas -> GAE)
# ---------------------------------------------------------------------------

@dataclass
class GroupAdvantages:
    trajectories: list[Trajectory]
    group: GroupContext
    values: np.ndarray        # (n, T+1) raw prefix values
    values_norm: np.ndarray   # (n, T+1) after minibatch standardization
    deltas: np.ndarray        # (n, T) TD from normalized values (+ terminal reward)
    deltas_norm: np.ndarray   # (n, T) after prompt-group standardization
    td_stats: TdStats
    gae: np.ndarray           # (n, T)
    combined: np.ndarray      # (n, T) outcome term + GAE


@dataclass
class AdvantageBatch:
    gamma: float
    lam: float
    value_stats: ValueStats
    groups: list[GroupAdvantages] = field(default_factory=list)


def build_advantage_batch(groups: Sequence[tuple[list[Trajectory], GroupContext, np.ndarray]],
                          gamma: float, lam: float, eps: float = EPS) -> AdvantageBatch:
    """Assemble every advantage quantity for one update.

    `groups` holds (trajectories, group context, raw prefix values (n, T+1))
    per prompt. Minibatch value moments pool all states in the update; delta
    moments are local to each prompt group.
    """
    all_values = np.concatenate([vals.ravel() for _, _, vals in groups])
    _, vstats = minibatch_normalize_values(all_values, eps)
    scale = 1.0 / (vstats.sigma + eps)

    batch = AdvantageBatch(gamma, lam, vstats)
    for trajs, group, values in groups:
        values_norm = (values - vstats.mu) * scale
        deltas = np.diff(values_norm, axis=1)
        for k, traj in enumerate(trajs):
            deltas[k, -1] += traj.outcome
        deltas_norm, td_stats = prompt_group_normalize(deltas, eps)
        gae_vals = np.stack([gae(row, gamma, lam) for row in deltas_norm])
        combined = np.stack([
            [combined_token_advantage(traj.outcome, group, g) for g in gae_vals[k]]
            for k, traj in enumerate(trajs)])
        batch.groups.append(GroupAdvantages(
            list(trajs), group, values, values_norm, deltas, deltas_norm,
            td_stats, gae_vals, combined))
    return batch
