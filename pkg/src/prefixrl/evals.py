"""Evaluation procedures: Best-of-N reranking, step-error localization under
both scoring protocols with the harmonic-mean F1, the training-time RM-score
metric, candidate-set statistics, and the TD-fidelity analysis."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .envs import EnvState, LocalizationCase, Prompt, Trajectory, step, verify
from .errors import ContractError
from .policy import NetDpPolicy, PolicyModel, PolicySnapshot
from .trainer import ad_const, build_candidate_set, mean_per_step_rm_score

PROTOCOLS = ("process", "prefix")


@dataclass
class EvalReport:
    metric: str
    value: Optional[float]
    config: dict
    seed: Optional[int] = None
    records: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# step scoring and localization
# ---------------------------------------------------------------------------

@dataclass
class StepScoreSeries:
    """Per-step sigmoid scores: the process protocol sums log-ratios inside
    the step only, the prefix protocol sums from the first token."""

    boundaries: list[tuple[int, int]]   # 0-based [start, end) token ranges
    process_scores: np.ndarray
    prefix_scores: np.ndarray

    def scores(self, protocol: str) -> np.ndarray:
        if protocol == "process":
            return self.process_scores
        if protocol == "prefix":
            return self.prefix_scores
        raise ContractError(f"unknown protocol {protocol!r}")


def _token_log_ratios(model: PolicyModel, rm, ref, trajectory: Trajectory) -> np.ndarray:
    rm_t = rm.tensors() if isinstance(rm, PolicySnapshot) else ad_const(rm)
    ref_t = ref.tensors() if isinstance(ref, PolicySnapshot) else ad_const(ref)
    rm_lp = model.sequence_log_prob(rm_t, trajectory).data
    ref_lp = model.sequence_log_prob(ref_t, trajectory).data
    return rm_lp - ref_lp


def step_scores(model: PolicyModel, rm, ref, trajectory: Trajectory,
                step_size: int, beta: float) -> StepScoreSeries:
    """Both protocols from one log-ratio pass over the trajectory."""
    if step_size < 1:
        raise ContractError("step_size must be >= 1")
    ratios = _token_log_ratios(model, rm, ref, trajectory)
    T = ratios.shape[0]
    cum = np.concatenate([[0.0], np.cumsum(ratios)])
    bounds = [(a, min(a + step_size, T)) for a in range(0, T, step_size)]
    process = ad.sigmoid_np(np.array([beta * (cum[b] - cum[a]) for a, b in bounds]))
    prefix = ad.sigmoid_np(np.array([beta * cum[b] for _, b in bounds]))
    return StepScoreSeries(bounds, process, prefix)


def localize_first_error(scores: np.ndarray, threshold: float) -> Optional[int]:
    """First step (1-based) scoring below the threshold, or None."""
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    below = np.flatnonzero(np.asarray(scores) < threshold)
    return int(below[0]) + 1 if below.size else None


def localization_f1(predictions: Sequence[Optional[int]],
                    labels: Sequence[Optional[int]]) -> float:
    """Harmonic mean of exact first-error accuracy on erroneous cases and
    "no error" accuracy on clean cases."""
    if len(predictions) != len(labels):
        raise ContractError("predictions and labels must align")
    err = [(p, l) for p, l in zip(predictions, labels) if l is not None]
    ok = [(p, l) for p, l in zip(predictions, labels) if l is None]
    if not err or not ok:
        raise ContractError("need both erroneous and error-free cases")
    acc_err = float(np.mean([p == l for p, l in err]))
    acc_ok = float(np.mean([p is None for p, _ in ok]))
    if acc_err == 0.0 or acc_ok == 0.0:
        return 0.0
    return 2 * acc_err * acc_ok / (acc_err + acc_ok)


def evaluate_localization(model: PolicyModel, rm, ref,
                          cases: Sequence[LocalizationCase], beta: float,
                          threshold: float = 0.5, protocol: str = "process"):
    preds = []
    for case in cases:
        series = step_scores(model, rm, ref, case.trajectory, case.step_size, beta)
        preds.append(localize_first_error(series.scores(protocol), threshold))
    f1 = localization_f1(preds, [c.first_error_step for c in cases])
    records = [{"label": c.first_error_step, "prediction": p}
               for c, p in zip(cases, preds)]
    return f1, records


# ---------------------------------------------------------------------------
# Best-of-N reranking
# ---------------------------------------------------------------------------

def sequence_score(model: PolicyModel, rm, ref, trajectory: Trajectory,
                   beta: float, mode: str = "mean") -> float:
    """RM sequence score: length-normalized final prefix value ("mean") or the
    raw final value ("sum", the sequence-BCE/preference baselines' logit)."""
    total = float(_token_log_ratios(model, rm, ref, trajectory).sum()) * beta
    if mode == "sum":
        return total
    if mode == "mean":
        return total / trajectory.horizon
    raise ContractError(f"unknown score mode {mode!r}")


def bon_rerank(model: PolicyModel, rm, ref, prompts: Sequence[Prompt],
               sampler_params: ParamVector, n: int, rng: np.random.Generator,
               beta: float, mode: str = "mean", temperature: float = 1.0,
               score_fn: Optional[Callable[[Trajectory], float]] = None):
    """Sample n candidates per prompt, keep the best-scored one (ties go to
    the lowest candidate index), and report mean verifier correctness."""
    if n < 1:
        raise ContractError("n must be >= 1")
    repeated = [p for p in prompts for _ in range(n)]
    rollouts = model.sample_trajectories(sampler_params, repeated, temperature, rng)
    picks, records = [], []
    for i, prompt in enumerate(prompts):
        cands = rollouts[i * n:(i + 1) * n]
        if score_fn is None:
            scores = [sequence_score(model, rm, ref, t, beta, mode) for t in cands]
        else:
            scores = [score_fn(t) for t in cands]
        best = int(np.argmax(scores))
        picks.append(cands[best].outcome)
        records.append({"pick": best, "outcome": cands[best].outcome,
                        "any_correct": int(any(t.outcome for t in cands))})
    return float(np.mean(picks)), records


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def rm_score_metric(model: PolicyModel, rm, ref, trajectories: Sequence[Trajectory]) -> float:
    """Mean per-step log-ratio of the trajectories (defined without beta)."""
    rm_params = rm.params if isinstance(rm, PolicySnapshot) else rm
    ref_snap = ref if isinstance(ref, PolicySnapshot) else PolicySnapshot(
        model.arch, ref, "reference")
    return mean_per_step_rm_score(model, rm_params, ref_snap, trajectories)


def candidate_stats(model: PolicyModel, behavior: PolicySnapshot,
                    prompts: Sequence[Prompt], p_min: float,
                    rng: np.random.Generator, temperature: float = 1.0):
    """Average candidate-set size and retained probability mass over every
    timestep of one rollout per prompt."""
    rollouts = model.sample_trajectories(behavior.params, prompts, temperature, rng)
    sizes, masses = [], []
    for traj in rollouts:
        raw = model.logits(behavior.tensors(), traj.states()).data
        probs = np.exp(ad.log_softmax_np(raw / temperature))
        for t, tok in enumerate(traj.tokens):
            cs = build_candidate_set(probs[t], tok, p_min)
            sizes.append(cs.size)
            masses.append(cs.mass)
    return float(np.mean(sizes)), float(np.mean(masses))


# ---------------------------------------------------------------------------
# TD-fidelity analysis
# ---------------------------------------------------------------------------

def _rank_with_ties(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i, r = 0, 1
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (2 * r + (j - i)) / 2
        r += j - i + 1
        i = j + 1
    return ranks


def auc_score(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Rank-based AUC-ROC; None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _rank_with_ties(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation with a degeneracy flag (zero-variance convention: 0)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0, True
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy)), False


@dataclass
class TdFidelityReport:
    n_branches: int
    pearson_td_mc: Optional[float]
    pearson_degenerate: bool
    auc_value_mc: Optional[float]
    auc_abs_value_mc: Optional[float]
    pearson_td_exact: Optional[float]
    auc_value_exact: Optional[float]
    auc_abs_value_exact: Optional[float]


def td_fidelity(model: PolicyModel, rm, behavior: PolicySnapshot, env,
                num_branches: int, rng: np.random.Generator, beta: float,
                top_k: int = 5, rollouts_per_branch: int = 1,
                temperature: float = 1.0) -> TdFidelityReport:
    """At random truncation points of behavior rollouts, score the top-k
    candidate next tokens by their one-step TD and by the branch prefix value,
    against (a) Monte Carlo continuation outcomes and (b) exact DP success
    labels thresholded at 0.5."""
    rm_params = rm.params if isinstance(rm, PolicySnapshot) else rm
    oracle_policy = NetDpPolicy(model, behavior.params, temperature)
    from .envs import SuccessOracle
    oracle = SuccessOracle(oracle_policy)

    tds, values, mc_labels, exact_labels = [], [], [], []
    pending = []  # (branch state, value, td) awaiting MC continuation
    while len(tds) < num_branches:
        prompt = env.sample_prompt(rng)
        traj = model.sample_trajectory(behavior.params, prompt, temperature, rng)
        t = int(rng.integers(0, prompt.horizon))
        state = traj.states()[t]
        ratios = _token_log_ratios(model, rm_params, behavior, traj)
        prefix_value = beta * float(ratios[:t].sum())

        raw = model.logits(behavior.tensors(), [state]).data[0]
        old_logp = ad.log_softmax_np(raw / temperature)
        rm_logp = model.log_prob_rows(ad_const(rm_params), [state]).data[0]
        top = np.argsort(-old_logp, kind="mergesort")[:top_k]
        for cand in top:
            if len(tds) >= num_branches:
                break
            td = beta * float(rm_logp[cand] - old_logp[cand])
            branch = step(state, int(cand))
            tds.append(td)
            values.append(prefix_value + td)
            exact_labels.append(int(oracle.prob(branch) > 0.5))
            pending.append(branch)

    mc_labels = _mc_outcomes(model, behavior, pending, rollouts_per_branch,
                             temperature, rng)

    tds = np.array(tds)
    values = np.array(values)
    mc = np.array(mc_labels)
    exact = np.array(exact_labels)
    p_mc, degen = pearson(tds, mc)
    p_exact, _ = pearson(tds, exact)
    return TdFidelityReport(
        n_branches=len(tds),
        pearson_td_mc=p_mc, pearson_degenerate=degen,
        auc_value_mc=auc_score(values, mc),
        auc_abs_value_mc=auc_score(np.abs(values), mc),
        pearson_td_exact=p_exact,
        auc_value_exact=auc_score(values, exact),
        auc_abs_value_exact=auc_score(np.abs(values), exact),
    )


def _mc_outcomes(model: PolicyModel, behavior: PolicySnapshot,
                 branches: Sequence[EnvState], rollouts_per_branch: int,
                 temperature: float, rng: np.random.Generator) -> list[int]:
    """Continue every branch to the horizon in lockstep and verify."""
    states = [b for b in branches for _ in range(rollouts_per_branch)]
    tensors = behavior.tensors()
    max_left = max(s.prompt.horizon - s.t for s in states)
    for _ in range(max_left):
        active = [i for i, s in enumerate(states) if s.t < s.prompt.horizon]
        if not active:
            break
        raw = model.logits(tensors, [states[i] for i in active]).data
        rows = ad.log_softmax_np(raw / temperature)
        cdf = np.cumsum(np.exp(rows), axis=1)
        u = rng.random(len(active))
        chosen = np.minimum((u[:, None] > cdf).sum(axis=1), rows.shape[1] - 1)
        for j, i in enumerate(active):
            states[i] = step(states[i], int(chosen[j]))
    outcomes = [verify(s.prompt, s.prefix) for s in states]
    grouped = np.array(outcomes).reshape(len(branches), rollouts_per_branch)
    return [int(g.mean() > 0.5) for g in grouped]
