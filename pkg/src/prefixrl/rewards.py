"""Implicit rewards: token log-ratios, prefix values, and every reward-model
training objective (prefix-value BCE with margin and its late/early
reweightings, sequence-level BCE, preference loss, and the online
difficulty-balanced objective)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import EnvState, Prompt, Trajectory
from .errors import ContractError
from .policy import PolicyModel, PolicySnapshot

WEIGHTINGS = ("uniform", "late", "early")


def _tensors(x) -> dict[str, Tensor]:
    if isinstance(x, PolicySnapshot):
        return x.tensors()
    return x


@dataclass
class PrefixValueSeries:
    """Cumulative token log-ratio values V(s_0..s_T) and the length-normalized
    per-prefix form vbar(t) = V(s_t)/t, all as graph values."""

    beta: float
    ratios: Tensor   # (T,)  beta * (log pi_rm - log pi_ref) per emitted token
    values: Tensor   # (T+1,) running sums, values[0] = 0
    vbar: Tensor     # (T,)  values[1:] / t

    @property
    def horizon(self) -> int:
        return self.ratios.data.shape[0]

    def final_value(self) -> Tensor:
        return self.values[self.horizon]

    def final_vbar(self) -> Tensor:
        return self.vbar[self.horizon - 1]


def token_log_ratio(model: PolicyModel, rm, ref, state: EnvState, token: int,
                    beta: float) -> Tensor:
    """beta * (log pi_rm(token|state) - log pi_ref(token|state))."""
    cols = np.array([token])
    rm_lp = ad.take_per_row(model.log_prob_rows(_tensors(rm), [state]), cols)
    ref_lp = ad.take_per_row(model.log_prob_rows(_tensors(ref), [state]), cols)
    return ad.tsum((rm_lp - ref_lp) * beta)


def prefix_values(model: PolicyModel, rm, ref, trajectory: Trajectory,
                  beta: float) -> PrefixValueSeries:
    rm_lp = model.sequence_log_prob(_tensors(rm), trajectory)
    ref_lp = model.sequence_log_prob(_tensors(ref), trajectory)
    return series_from_ratios((rm_lp - ref_lp) * beta, beta)


def series_from_ratios(ratios: Tensor, beta: float) -> PrefixValueSeries:
    """Build the running-sum series from per-token (already beta-scaled) ratios."""
    T = ratios.data.shape[0]
    values = ad.concat([ad.constant(np.zeros(1)), ad.cumsum(ratios)], axis=0)
    vbar = values[1:] / ad.constant(np.arange(1, T + 1, dtype=np.float64))
    return PrefixValueSeries(beta, ratios, values, vbar)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _per_step_losses(vbar: Tensor, label: int, margin: float, shift: float = 0.0) -> Tensor:
    """-[r log sig(vbar - m + shift) + (1-r) log(1 - sig(vbar + m + shift))]."""
    if label == 1:
        return -ad.log_sigmoid(vbar - margin + shift)
    return -ad.log_sigmoid(-(vbar + margin + shift))


def step_weights(T: int, weighting: str) -> np.ndarray:
    if weighting == "uniform":
        w = np.ones(T)
    elif weighting == "late":
        w = np.arange(1, T + 1, dtype=np.float64) / T
    elif weighting == "early":
        w = 1.0 - np.arange(1, T + 1, dtype=np.float64) / T
    else:
        raise ContractError(f"unknown weighting {weighting!r}")
    total = w.sum()
    if total == 0.0:  # early weighting degenerates at T = 1
        return np.full(T, 1.0 / T)
    return w / total


def ipvrm_loss(series: PrefixValueSeries, label: int, margin: float,
               weighting: str = "uniform") -> Tensor:
    """Margin BCE on length-normalized prefix values, averaged over steps
    (optionally tilted toward late or early prefixes)."""
    if series.horizon < 1:
        raise ContractError("need at least one step")
    if margin < 0:
        raise ContractError("margin must be non-negative")
    per_step = _per_step_losses(series.vbar, label, margin)
    return ad.tsum(per_step * ad.constant(step_weights(series.horizon, weighting)))


def implicit_prm_loss(series: PrefixValueSeries, label: int) -> Tensor:
    """BCE of the sequence-level value (sum of token rewards) against the outcome."""
    v_final = series.final_value()
    if label == 1:
        return -ad.log_sigmoid(v_final)
    return -ad.log_sigmoid(-v_final)


@dataclass
class OutcomePair:
    prompt: Prompt
    winner: Trajectory
    loser: Trajectory

    def __post_init__(self):
        if self.winner.prompt != self.prompt or self.loser.prompt != self.prompt:
            raise ContractError("pair trajectories must share the prompt")
        if self.winner.outcome != 1 or self.loser.outcome != 0:
            raise ContractError("winner must verify correct and loser incorrect")


def dpo_loss(model: PolicyModel, rm, ref, pair: OutcomePair, beta: float) -> Tensor:
    """-log sigmoid of the sequence-level reward gap between winner and loser."""
    rm_t, ref_t = _tensors(rm), _tensors(ref)

    def seq_reward(traj):
        diff = (model.sequence_log_prob(rm_t, traj)
                - model.sequence_log_prob(ref_t, traj))
        return ad.tsum(diff) * beta

    return -ad.log_sigmoid(seq_reward(pair.winner) - seq_reward(pair.loser))


@dataclass
class GroupContext:
    """Per-prompt outcome statistics for a group of n rollouts.

    The mean is clamped to [1/(2n), 1 - 1/(2n)] before the logit so the
    difficulty baseline stays finite on degenerate online batches.
    """

    n: int
    mu: float
    s: float
    mu_clamped: float
    v_x: float

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[int]) -> "GroupContext":
        n = len(outcomes)
        if n < 1:
            raise ContractError("group needs at least one rollout")
        arr = np.asarray(outcomes, dtype=np.float64)
        mu = float(arr.mean())
        s = float(np.sqrt(np.mean((arr - mu) ** 2)))
        lo = 1.0 / (2 * n)
        mu_clamped = min(max(mu, lo), 1.0 - lo)
        return cls(n, mu, s, mu_clamped, float(ad.logit_np(mu_clamped)))

    def weight(self, label: int) -> float:
        """Outcome-rarity weight: 1 - mu for correct rollouts, mu for incorrect."""
        return 1.0 - self.mu_clamped if label == 1 else self.mu_clamped


def online_ipvrm_loss(series: PrefixValueSeries, label: int, margin: float,
                      group: GroupContext, adb: bool = True, dlw: bool = True) -> Tensor:
    """Online refresh objective: the sigmoid boundary shifts by the prompt's
    difficulty baseline (ADB) and the whole term scales by outcome rarity (DLW).
    With both switches off this equals the uniform offline loss exactly."""
    shift = group.v_x if adb else 0.0
    weight = group.weight(label) if dlw else 1.0
    per_step = _per_step_losses(series.vbar, label, margin, shift=shift)
    return ad.tmean(per_step) * weight


def trajectory_rm_loss(model: PolicyModel, rm, ref, traj: Trajectory, method: str,
                       beta: float, margin: float) -> Tensor:
    """Offline per-trajectory objective for the outcome-labeled methods."""
    series = prefix_values(model, rm, ref, traj, beta)
    if method == "ipvrm":
        return ipvrm_loss(series, traj.outcome, margin, "uniform")
    if method == "ipvrm_late":
        return ipvrm_loss(series, traj.outcome, margin, "late")
    if method == "ipvrm_early":
        return ipvrm_loss(series, traj.outcome, margin, "early")
    if method == "implicit_prm":
        return implicit_prm_loss(series, traj.outcome)
    raise ContractError(f"unknown trajectory-level rm method {method!r}")
