"""Distribution-level policy optimization.

Each iteration: snapshot the student as the behavior policy, collect
mixed-outcome rollout groups, score prefix values with the reward model
against the behavior reference, turn them into advantages, take clipped
surrogate steps on the student (sampled-token branch plus an
alpha-weighted candidate-token branch), then refresh the reward model
online with the difficulty-balanced objective.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .advantages import EPS, AdvantageBatch, build_advantage_batch
from .autodiff import ParamVector, Tensor
from .envs import Prompt, Trajectory
from .errors import CollectionError, ContractError, NumericalError
from .policy import PolicyModel, PolicySnapshot
from .rewards import GroupContext, online_ipvrm_loss, series_from_ratios

MAX_COLLECT_ROUNDS = 10

RL_METHODS = ("distrl", "grpo", "grpo_with_rm")


@dataclass
class PpoConfig:
    eps_low: float = 0.20
    eps_high: float = 0.28
    alpha: float = 0.1
    p_min: float = 0.1
    ppo_epochs: int = 1
    lr: float = 1e-3
    gamma: float = 1.0
    lam: float = 1.0
    n_rollouts: int = 4
    oversample: int = 2
    batch_size: int = 32
    temperature: float = 1.0

    def validate(self) -> list[str]:
        problems = []
        if not 0 < self.eps_low < 1:
            problems.append(f"eps_low {self.eps_low} outside (0, 1)")
        if not 0 < self.eps_high < 1:
            problems.append(f"eps_high {self.eps_high} outside (0, 1)")
        if self.alpha < 0:
            problems.append(f"alpha {self.alpha} negative")
        if not 0 < self.p_min < 1:
            problems.append(f"p_min {self.p_min} outside (0, 1)")
        for name in ("ppo_epochs", "n_rollouts", "oversample", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.temperature <= 0:
            problems.append("temperature must be positive")
        if not 0 <= self.lam <= 1:
            problems.append("lam outside [0, 1]")
        return problems


@dataclass
class OnlineRmConfig:
    beta: float = 10.0
    margin: float = 5.0
    lr: float = 1e-3
    adb: bool = True
    dlw: bool = True
    frozen: bool = False


# ---------------------------------------------------------------------------
# candidate sets
# ---------------------------------------------------------------------------

@dataclass
class CandidateSet:
    tokens: np.ndarray     # candidate token indices, ascending
    probs: np.ndarray      # behavior probabilities of those tokens
    p_min: float
    sampled: int
    forced: bool           # sampled token fell below the threshold

    @property
    def size(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def mass(self) -> float:
        return float(self.probs.sum())


def build_candidate_set(behavior_probs: np.ndarray, sampled_token: int,
                        p_min: float) -> CandidateSet:
    """Tokens whose behavior probability clears p_min, plus the sampled token
    unconditionally (the surrogate's expectation must include it)."""
    probs = np.asarray(behavior_probs, dtype=np.float64)
    mask = candidate_mask(probs[None, :], np.array([sampled_token]), p_min)[0]
    tokens = np.flatnonzero(mask)
    return CandidateSet(tokens, probs[tokens], p_min, sampled_token,
                        forced=bool(probs[sampled_token] < p_min))


def candidate_mask(probs: np.ndarray, sampled: np.ndarray, p_min: float) -> np.ndarray:
    """Vectorized candidate-set membership over (state, token)."""
    mask = probs >= p_min
    mask[np.arange(probs.shape[0]), sampled] = True
    return mask


# ---------------------------------------------------------------------------
# rollout collection
# ---------------------------------------------------------------------------

@dataclass
class PromptGroup:
    prompt: Prompt
    trajectories: list[Trajectory]
    group: GroupContext


@dataclass
class RolloutBatch:
    groups: list[PromptGroup]
    behavior_id: str
    sampled_prompts: int
    accepted_prompts: int

    def all_trajectories(self) -> list[Trajectory]:
        return [t for g in self.groups for t in g.trajectories]

    def mean_outcome(self) -> float:
        return float(np.mean([t.outcome for t in self.all_trajectories()]))


def params_fingerprint(params: ParamVector) -> str:
    return hashlib.sha1(params.flat().tobytes()).hexdigest()[:12]


def collect_groups(model: PolicyModel, behavior: PolicySnapshot,
                   prompts: Sequence[Prompt], n_rollouts: int, temperature: float,
                   rng: np.random.Generator) -> list[PromptGroup]:
    """n rollouts per prompt, sampled in lockstep across the whole round."""
    repeated = [p for p in prompts for _ in range(n_rollouts)]
    trajs = model.sample_trajectories(behavior.params, repeated, temperature, rng)
    groups = []
    for i, prompt in enumerate(prompts):
        chunk = trajs[i * n_rollouts:(i + 1) * n_rollouts]
        ctx = GroupContext.from_outcomes([t.outcome for t in chunk])
        groups.append(PromptGroup(prompt, chunk, ctx))
    return groups


def collect_batch(model: PolicyModel, behavior: PolicySnapshot, env,
                  prompt_sampler: Callable[[np.random.Generator], Prompt],
                  cfg: PpoConfig, rng: np.random.Generator,
                  max_rounds: int = MAX_COLLECT_ROUNDS) -> RolloutBatch:
    """Oversample prompt groups and keep the first batch_size with mixed
    outcomes (0 < mu < 1); acceptance looks only at outcome labels."""
    accepted: list[PromptGroup] = []
    sampled = 0
    for _ in range(max_rounds):
        prompts = [prompt_sampler(rng) for _ in range(cfg.oversample * cfg.batch_size)]
        sampled += len(prompts)
        for group in collect_groups(model, behavior, prompts, cfg.n_rollouts,
                                    cfg.temperature, rng):
            if 0.0 < group.group.mu < 1.0 and len(accepted) < cfg.batch_size:
                accepted.append(group)
        if len(accepted) >= cfg.batch_size:
            return RolloutBatch(accepted, params_fingerprint(behavior.params),
                                sampled, len(accepted))
    raise CollectionError(
        f"only {len(accepted)} of {cfg.batch_size} mixed-outcome prompts "
        f"after sampling {sampled} prompts over {max_rounds} rounds")


# ---------------------------------------------------------------------------
# shared per-batch tables
# ---------------------------------------------------------------------------

@dataclass
class BatchTables:
    """Flattened per-state arrays shared by the surrogate losses."""

    states: list
    tokens: np.ndarray          # (N*T,) sampled tokens
    old_logps: np.ndarray       # (N*T,) stored behavior log-probs
    old_rows: np.ndarray        # (N*T, V) behavior log-prob rows (sampling temperature)
    n_trajs: int
    horizon: int


def batch_tables(model: PolicyModel, behavior: PolicySnapshot,
                 batch: RolloutBatch, temperature: float) -> BatchTables:
    trajs = batch.all_trajectories()
    states, tokens, old_logps = [], [], []
    for t in trajs:
        states.extend(t.states())
        tokens.extend(t.tokens)
        old_logps.extend(t.behavior_logps)
    raw = model.logits(behavior.tensors(), states).data
    old_rows = ad.log_softmax_np(raw / temperature)
    return BatchTables(states, np.array(tokens), np.array(old_logps), old_rows,
                       len(trajs), trajs[0].horizon)


def rm_prefix_values(model: PolicyModel, rm_params: ParamVector, tables: BatchTables,
                     beta: float) -> np.ndarray:
    """Raw prefix values (n_trajs, T+1) of the sampled rollouts under the
    reward model with the behavior policy as reference."""
    rm_rows = model.log_prob_rows(ad_const(rm_params), tables.states).data
    rm_lp = rm_rows[np.arange(len(tables.tokens)), tables.tokens]
    ratios = beta * (rm_lp - tables.old_logps)
    per_traj = ratios.reshape(tables.n_trajs, tables.horizon)
    values = np.zeros((tables.n_trajs, tables.horizon + 1))
    values[:, 1:] = np.cumsum(per_traj, axis=1)
    return values


def ad_const(params: ParamVector) -> dict[str, Tensor]:
    return {k: ad.constant(v) for k, v in params.segments.items()}


def batch_advantages(model: PolicyModel, rm_params: ParamVector, batch: RolloutBatch,
                     tables: BatchTables, cfg: PpoConfig, beta: float) -> AdvantageBatch:
    values = rm_prefix_values(model, rm_params, tables, beta)
    spec = []
    i = 0
    for g in batch.groups:
        n = len(g.trajectories)
        spec.append((g.trajectories, g.group, values[i:i + n]))
        i += n
    return build_advantage_batch(spec, cfg.gamma, cfg.lam)


# ---------------------------------------------------------------------------
# surrogate losses
# ---------------------------------------------------------------------------

def _clipped_term(ratios: Tensor, advantages: np.ndarray, cfg: PpoConfig) -> Tensor:
    adv_c = ad.constant(advantages)
    clipped = ad.clip(ratios, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high)
    return ad.minimum(ratios * adv_c, clipped * adv_c)


def tok_ppo_loss(model: PolicyModel, student, behavior: PolicySnapshot,
                 batch: RolloutBatch, cfg: PpoConfig,
                 advantages_per_token: np.ndarray,
                 tables: Optional[BatchTables] = None) -> Tensor:
    """Clipped surrogate over sampled tokens; advantages are constants."""
    tables = tables or batch_tables(model, behavior, batch, cfg.temperature)
    rows = model.log_prob_rows(_as_tensors(student), tables.states)
    logps = ad.take_per_row(rows, tables.tokens)
    ratios = ad.exp(logps - ad.constant(tables.old_logps))
    return -ad.tmean(_clipped_term(ratios, advantages_per_token.ravel(), cfg))


def dist_ppo_loss(model: PolicyModel, student, behavior: PolicySnapshot, rm,
                  batch: RolloutBatch, cfg: PpoConfig, beta: float,
                  tables: Optional[BatchTables] = None,
                  advantages: Optional[AdvantageBatch] = None) -> Tensor:
    """Clipped expectation of candidate TD advantages over the candidate set,
    weighted by the behavior probabilities (no renormalization).

    Candidate advantages are log-ratios of the reward model against the
    behavior snapshot, scaled by the frozen minibatch value deviation, and
    detached: the reward model learns only through its own objective.
    """
    tables = tables or batch_tables(model, behavior, batch, cfg.temperature)
    rm_params = rm.params if isinstance(rm, PolicySnapshot) else rm
    advantages = advantages or batch_advantages(model, rm_params, batch, tables, cfg, beta)

    rm_rows = model.log_prob_rows(ad_const(rm_params), tables.states).data
    a_td = beta * (rm_rows - tables.old_rows) / (advantages.value_stats.sigma + EPS)

    old_probs = np.exp(tables.old_rows)
    mask = candidate_mask(old_probs, tables.tokens, cfg.p_min)
    weights = old_probs * mask

    student_rows = model.log_prob_rows(_as_tensors(student), tables.states)
    ratios = ad.exp(student_rows - ad.constant(tables.old_rows))
    clipped = ad.clip(ratios, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high)
    adv_c = ad.constant(a_td)
    term = ad.minimum(ratios * adv_c, clipped * adv_c) * ad.constant(weights)
    per_state = ad.tsum(term, axis=1)
    return -ad.tmean(per_state)


def distrl_loss(model: PolicyModel, student, behavior: PolicySnapshot, rm,
                batch: RolloutBatch, cfg: PpoConfig, beta: float,
                tables: Optional[BatchTables] = None,
                advantages: Optional[AdvantageBatch] = None) -> Tensor:
    """Sampled-token surrogate plus alpha times the candidate-token surrogate."""
    tables = tables or batch_tables(model, behavior, batch, cfg.temperature)
    rm_params = rm.params if isinstance(rm, PolicySnapshot) else rm
    advantages = advantages or batch_advantages(model, rm_params, batch, tables, cfg, beta)
    combined = np.concatenate([g.combined.ravel() for g in advantages.groups])
    tok = tok_ppo_loss(model, student, behavior, batch, cfg, combined, tables)
    dist = dist_ppo_loss(model, student, behavior, rm, batch, cfg, beta, tables, advantages)
    return tok + cfg.alpha * dist


def outcome_only_advantages(batch: RolloutBatch) -> np.ndarray:
    """Group-normalized outcome signal, constant across a rollout's tokens;
    degenerate groups contribute zero."""
    rows = []
    for g in batch.groups:
        T = g.trajectories[0].horizon
        for t in g.trajectories:
            a = 0.0 if g.group.s == 0.0 else (t.outcome - g.group.mu) / g.group.s
            rows.append(np.full(T, a))
    return np.stack(rows)


def grpo_baseline_loss(model: PolicyModel, student, behavior: PolicySnapshot,
                       batch: RolloutBatch, cfg: PpoConfig,
                       tables: Optional[BatchTables] = None) -> Tensor:
    """Verifier-reward GRPO: the sampled-token surrogate with the GAE term removed."""
    return tok_ppo_loss(model, student, behavior, batch, cfg,
                        outcome_only_advantages(batch), tables)


def _as_tensors(student) -> dict[str, Tensor]:
    if isinstance(student, PolicySnapshot):
        return student.tensors()
    if isinstance(student, ParamVector):
        return ad_const(student)
    return student


# ---------------------------------------------------------------------------
# online reward-model refresh
# ---------------------------------------------------------------------------

def online_rm_loss(model: PolicyModel, rm_leaves, behavior: PolicySnapshot,
                   groups: Sequence[PromptGroup], rm_cfg: OnlineRmConfig) -> Tensor:
    """Mean difficulty-balanced objective over every rollout in the batch,
    with the behavior snapshot as the log-ratio reference."""
    behavior_t = behavior.tensors()
    losses = []
    for g in groups:
        for traj in g.trajectories:
            rm_lp = model.sequence_log_prob(rm_leaves, traj)
            ref_lp = model.sequence_log_prob(behavior_t, traj)
            series = series_from_ratios((rm_lp - ref_lp) * rm_cfg.beta, rm_cfg.beta)
            losses.append(online_ipvrm_loss(series, traj.outcome, rm_cfg.margin,
                                            g.group, adb=rm_cfg.adb, dlw=rm_cfg.dlw))
    total = losses[0]
    for term in losses[1:]:
        total = total + term
    return total / float(len(losses))


def online_rm_step(model: PolicyModel, rm_params: ParamVector,
                   behavior: PolicySnapshot, groups: Sequence[PromptGroup],
                   rm_cfg: OnlineRmConfig) -> tuple[ParamVector, float]:
    loss, grad = ad.eval_with_grad(
        lambda lv: online_rm_loss(model, lv, behavior, groups, rm_cfg), rm_params)
    return rm_params.axpy(-rm_cfg.lr, grad), loss


# ---------------------------------------------------------------------------
# one full training iteration
# ---------------------------------------------------------------------------

def mean_per_step_rm_score(model: PolicyModel, rm_params: ParamVector,
                           ref: PolicySnapshot, trajs: Sequence[Trajectory]) -> float:
    """Mean over trajectories of the average per-token log-ratio (no beta)."""
    states, tokens = [], []
    for t in trajs:
        states.extend(t.states())
        tokens.extend(t.tokens)
    cols = np.array(tokens)
    idx = np.arange(len(cols))
    rm_lp = model.log_prob_rows(ad_const(rm_params), states).data[idx, cols]
    ref_lp = model.log_prob_rows(ref.tensors(), states).data[idx, cols]
    per_token = rm_lp - ref_lp
    return float(per_token.reshape(len(trajs), -1).mean(axis=1).mean())


def train_iteration(model: PolicyModel, student: ParamVector, rm: ParamVector,
                    sft_ref: PolicySnapshot, env, cfg: PpoConfig,
                    rm_cfg: OnlineRmConfig, rng: np.random.Generator,
                    rl_method: str = "distrl",
                    prompt_sampler: Optional[Callable] = None
                    ) -> tuple[ParamVector, ParamVector, dict]:
    """One DistRL iteration: snapshot, collect, advantages, policy epochs,
    online RM refresh, metrics. On a non-finite loss the iteration aborts and
    both parameter vectors are returned unchanged."""
    if rl_method not in RL_METHODS:
        raise ContractError(f"unknown rl method {rl_method!r}")
    t0 = time.perf_counter()
    student_backup, rm_backup = student.copy(), rm.copy()
    behavior = PolicySnapshot(model.arch, student, "behavior")
    sampler = prompt_sampler or (lambda r: env.sample_prompt(r))

    batch = collect_batch(model, behavior, env, sampler, cfg, rng)
    tables = batch_tables(model, behavior, batch, cfg.temperature)

    old_probs = np.exp(tables.old_rows)
    mask = candidate_mask(old_probs, tables.tokens, cfg.p_min)
    cand_avg_size = float(mask.sum(axis=1).mean())
    cand_mass = float((old_probs * mask).sum(axis=1).mean())

    uses_rm = rl_method in ("distrl", "grpo_with_rm")
    metrics = {
        "verifier_acc": batch.mean_outcome(),
        "rm_score": mean_per_step_rm_score(model, rm, sft_ref, batch.all_trajectories()),
        "tok_loss": None, "dist_loss": None, "rm_loss": None,
        "cand_avg_size": cand_avg_size, "cand_mass": cand_mass,
    }

    try:
        advantages = (batch_advantages(model, rm, batch, tables, cfg, rm_cfg.beta)
                      if uses_rm else None)
        for _ in range(cfg.ppo_epochs):
            if rl_method == "grpo":
                def builder(lv):
                    return grpo_baseline_loss(model, lv, behavior, batch, cfg, tables)
                tok_loss, grad = ad.eval_with_grad(builder, student)
                dist_loss = 0.0
            elif rl_method == "grpo_with_rm":
                combined = np.concatenate([g.combined.ravel() for g in advantages.groups])

                def builder(lv):
                    return tok_ppo_loss(model, lv, behavior, batch, cfg, combined, tables)
                tok_loss, grad = ad.eval_with_grad(builder, student)
                dist_loss = 0.0
            else:
                combined = np.concatenate([g.combined.ravel() for g in advantages.groups])

                def tok_builder(lv):
                    return tok_ppo_loss(model, lv, behavior, batch, cfg, combined, tables)

                def dist_builder(lv):
                    return dist_ppo_loss(model, lv, behavior, rm, batch, cfg,
                                         rm_cfg.beta, tables, advantages)
                tok_loss, tok_grad = ad.eval_with_grad(tok_builder, student)
                dist_loss, dist_grad = ad.eval_with_grad(dist_builder, student)
                grad = tok_grad.axpy(cfg.alpha, dist_grad)
            student = student.axpy(-cfg.lr, grad)
        metrics["tok_loss"] = tok_loss
        metrics["dist_loss"] = dist_loss

        if not rm_cfg.frozen:
            rm, rm_loss = online_rm_step(model, rm, behavior, batch.groups, rm_cfg)
            metrics["rm_loss"] = rm_loss
        else:
            metrics["rm_loss"] = None
    except NumericalError:
        student, rm = student_backup, rm_backup
        metrics["tok_loss"] = metrics["dist_loss"] = metrics["rm_loss"] = None

    metrics["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
    return student, rm, metrics
