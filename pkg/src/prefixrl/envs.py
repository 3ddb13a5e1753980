"""Synthetic verifiable token-level MDPs with exact dynamic-programming oracles.

Two environments, both fixed-horizon with a terminal binary verifier:

* ``modsum``  -- emit ``horizon`` digit tokens; success iff their sum is
  congruent to the prompt target modulo ``modulus``.
* ``bitbudget`` -- emit INC/SKIP tokens; success iff the number of INC
  tokens equals the prompt target. Overshoot and undershoot-without-slack
  are unrecoverable, which makes first-error localization well defined.

A state is fully determined by (position, sufficient statistic, recent
token window), so success probabilities admit exact tabulation for any
policy that conditions on at most those ingredients.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np

from .errors import BudgetError, ContractError, GenerationError

INC, SKIP = 0, 1

MODSUM, BITBUDGET = "modsum", "bitbudget"
_ENV_NUM = {MODSUM: 0, BITBUDGET: 1}


@dataclass(frozen=True)
class Prompt:
    env: str
    target: int
    horizon: int
    vocab: int
    modulus: int = 0  # modsum only

    def __post_init__(self):
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")
        if self.env == MODSUM:
            if not 0 <= self.target < self.modulus:
                raise ContractError(f"target {self.target} outside [0, {self.modulus})")
            if self.vocab < self.modulus:
                raise ContractError("modsum needs vocab >= modulus so every residue stays reachable")
        elif self.env == BITBUDGET:
            if not 0 <= self.target <= self.horizon:
                raise ContractError(f"count target {self.target} outside [0, {self.horizon}]")
            if self.vocab != 2:
                raise ContractError("bitbudget vocabulary is {INC, SKIP}")
        else:
            raise ContractError(f"unknown env {self.env!r}")

    def features(self) -> np.ndarray:
        """Integer features handed to policies: (target, horizon, env id)."""
        return np.array([self.target, self.horizon, _ENV_NUM[self.env]], dtype=np.float64)

    def n_stats(self) -> int:
        return self.modulus if self.env == MODSUM else self.horizon + 1

    def to_dict(self) -> dict:
        d = {"env": self.env, "target": self.target, "horizon": self.horizon,
             "vocab": self.vocab}
        if self.env == MODSUM:
            d["modulus"] = self.modulus
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Prompt":
        return cls(env=d["env"], target=d["target"], horizon=d["horizon"],
                   vocab=d["vocab"], modulus=d.get("modulus", 0))


@dataclass(frozen=True)
class EnvState:
    prompt: Prompt
    t: int
    stat: int
    prefix: tuple[int, ...]


def reset(prompt: Prompt) -> EnvState:
    return EnvState(prompt, 0, 0, ())


def stat_next(prompt: Prompt, stat: int, token: int) -> int:
    if prompt.env == MODSUM:
        return (stat + token) % prompt.modulus  # digit value of token i is i
    return stat + (1 if token == INC else 0)


def step(state: EnvState, token: int) -> EnvState:
    p = state.prompt
    if state.t >= p.horizon:
        raise ContractError(f"step past horizon at t={state.t}")
    if not 0 <= token < p.vocab:
        raise ContractError(f"token {token} outside vocabulary of size {p.vocab}")
    return EnvState(p, state.t + 1, stat_next(p, state.stat, token),
                    state.prefix + (token,))


def verify(prompt: Prompt, tokens: Sequence[int]) -> int:
    if len(tokens) != prompt.horizon:
        raise ContractError(f"expected {prompt.horizon} tokens, got {len(tokens)}")
    stat = 0
    for tok in tokens:
        if not 0 <= tok < prompt.vocab:
            raise ContractError(f"token {tok} outside vocabulary")
        stat = stat_next(prompt, stat, tok)
    return int(stat == prompt.target)


def value_star(prompt: Prompt, t: int, stat: int) -> int:
    """Optimal reachability: 1 iff some completion from (t, stat) verifies."""
    if t == prompt.horizon:
        return int(stat == prompt.target)
    if prompt.env == MODSUM:
        return 1  # digits cover every residue class, one step always suffices
    need = prompt.target - stat
    return int(0 <= need <= prompt.horizon - t)


@dataclass
class Trajectory:
    prompt: Prompt
    tokens: tuple[int, ...]
    behavior_logps: np.ndarray
    outcome: int

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        self.behavior_logps = np.asarray(self.behavior_logps, dtype=np.float64)
        if len(self.tokens) != self.prompt.horizon:
            raise ContractError("trajectory length must equal the fixed horizon")
        if self.outcome != verify(self.prompt, self.tokens):
            raise ContractError("outcome label disagrees with the verifier")

    @property
    def horizon(self) -> int:
        return len(self.tokens)

    def states(self) -> list[EnvState]:
        """States s_0 .. s_{T-1}: the state each token was emitted from."""
        out, s = [], reset(self.prompt)
        for tok in self.tokens:
            out.append(s)
            s = step(s, tok)
        return out


# ---------------------------------------------------------------------------
# policies the oracles understand
# ---------------------------------------------------------------------------

class DpPolicy(Protocol):
    """Next-token distribution as a function of the environment state.

    ``context_len`` is how many trailing prefix tokens the distribution
    depends on; ``uses_statistic`` declares dependence on the sufficient
    statistic. Both bound the oracle's tabulation work.
    """

    context_len: int
    uses_statistic: bool

    def probs_batch(self, states: Sequence[EnvState]) -> np.ndarray: ...


class UniformPolicy:
    context_len = 0
    uses_statistic = False

    def __init__(self, vocab: int):
        self.vocab = vocab

    def probs_batch(self, states):
        return np.full((len(states), self.vocab), 1.0 / self.vocab)


class PointMassPolicy:
    """Deterministically replays a fixed token sequence."""

    context_len = 0
    uses_statistic = False

    def __init__(self, tokens: Sequence[int], vocab: int):
        self.tokens = tuple(tokens)
        self.vocab = vocab

    def probs_batch(self, states):
        out = np.zeros((len(states), self.vocab))
        for i, s in enumerate(states):
            out[i, self.tokens[s.t]] = 1.0
        return out


class TablePolicy:
    """Arbitrary distribution table indexed by (position, statistic)."""

    context_len = 0
    uses_statistic = True

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)  # (horizon, n_stats, vocab)

    def probs_batch(self, states):
        return np.stack([self.table[s.t, s.stat] for s in states])

    @classmethod
    def random(cls, prompt: Prompt, rng: np.random.Generator) -> "TablePolicy":
        raw = rng.random((prompt.horizon, prompt.n_stats(), prompt.vocab)) + 0.05
        return cls(raw / raw.sum(axis=-1, keepdims=True))


class ModSumTeacher:
    """Optimal sampler: digits from a geometric-skew base distribution, then a
    correcting final digit (base-weighted over the valid residue class).

    skew = 0 gives uniform digits; larger skew slows the modular mixing of
    the running residue, which leaves success probability genuinely
    prefix-dependent under imitation policies."""

    context_len = 0
    uses_statistic = True

    def __init__(self, prompt: Prompt, skew: float = 0.0):
        self.prompt = prompt
        base = np.exp(-skew * np.arange(prompt.vocab, dtype=np.float64))
        self.base = base / base.sum()

    def probs_batch(self, states):
        p = self.prompt
        out = np.zeros((len(states), p.vocab))
        for i, s in enumerate(states):
            if s.t < p.horizon - 1:
                out[i] = self.base
            else:
                need = (p.target - s.stat) % p.modulus
                valid = [d for d in range(p.vocab) if d % p.modulus == need]
                out[i, valid] = self.base[valid] / self.base[valid].sum()
        return out


class BitBudgetTeacher:
    """Uniform over valid INC arrangements: P(INC) = remaining need / remaining steps.

    Clipped to [0, 1] so the distribution stays defined after an
    unrecoverable error (it then greedily chases the target).
    """

    context_len = 0
    uses_statistic = True

    def __init__(self, prompt: Prompt):
        self.prompt = prompt

    def probs_batch(self, states):
        p = self.prompt
        out = np.zeros((len(states), 2))
        for i, s in enumerate(states):
            p_inc = (p.target - s.stat) / (p.horizon - s.t)
            p_inc = min(max(p_inc, 0.0), 1.0)
            out[i, INC] = p_inc
            out[i, SKIP] = 1.0 - p_inc
        return out


def sample_policy_trajectory(prompt: Prompt, policy: DpPolicy,
                             rng: np.random.Generator) -> Trajectory:
    """Roll out a DpPolicy to the horizon, recording its own log-probs."""
    s = reset(prompt)
    tokens, logps = [], []
    for _ in range(prompt.horizon):
        probs = policy.probs_batch([s])[0]
        tok = int(rng.choice(prompt.vocab, p=probs))
        tokens.append(tok)
        logps.append(np.log(probs[tok]))
        s = step(s, tok)
    return Trajectory(prompt, tuple(tokens), np.array(logps), verify(prompt, tokens))


# ---------------------------------------------------------------------------
# exact success-probability oracle
# ---------------------------------------------------------------------------

class SuccessOracle:
    """Exact P(verifier success | state) for a fixed policy, by backward DP.

    Tables are tabulated per prompt over (position, statistic, token window)
    and cached, so repeated queries against the same prompt are lookups.
    """

    def __init__(self, policy: DpPolicy):
        self.policy = policy
        self._tables: dict[Prompt, list] = {}

    def prob(self, state: EnvState) -> float:
        values, windex = self._table(state.prompt)
        ctx = self.policy.context_len
        window = state.prefix[-ctx:] if ctx else ()
        return float(values[state.t][state.stat, windex[state.t][window]])

    def _table(self, prompt: Prompt):
        if prompt not in self._tables:
            self._tables[prompt] = self._build(prompt)
        return self._tables[prompt]

    def _build(self, prompt: Prompt):
        L, V, S = prompt.horizon, prompt.vocab, prompt.n_stats()
        ctx = self.policy.context_len
        windows = [list(itertools.product(range(V), repeat=min(t, ctx))) for t in range(L + 1)]
        windex = [{w: i for i, w in enumerate(ws)} for ws in windows]

        values = [None] * (L + 1)
        success = np.array([int(s == prompt.target) for s in range(S)], dtype=np.float64)
        values[L] = np.repeat(success[:, None], len(windows[L]), axis=1)

        # rows with stat > t are unreachable; clamping keeps their (unused)
        # transitions inside the table
        stat_step = np.array([[min(stat_next(prompt, s, a), S - 1) for a in range(V)]
                              for s in range(S)])

        for t in range(L - 1, -1, -1):
            ws = windows[t]
            nxt = np.array([[windex[t + 1][(w + (a,))[-ctx:] if ctx else ()]
                             for a in range(V)] for w in ws])
            probs = self._policy_grid(prompt, t, ws, S)  # (S, len(ws), V)
            vt = np.zeros((S, len(ws)))
            vnext = values[t + 1]
            for a in range(V):
                vt += probs[:, :, a] * vnext[stat_step[:, a]][:, nxt[:, a]]
            values[t] = vt
        return values, windex

    def _policy_grid(self, prompt, t, ws, n_stats):
        if self.policy.uses_statistic:
            states = [EnvState(prompt, t, s, w) for s in range(n_stats) for w in ws]
            probs = self.policy.probs_batch(states).reshape(n_stats, len(ws), prompt.vocab)
        else:
            states = [EnvState(prompt, t, 0, w) for w in ws]
            probs = self.policy.probs_batch(states)[None, :, :]
            probs = np.broadcast_to(probs, (n_stats, len(ws), prompt.vocab))
        sums = probs.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise ContractError("policy returned an unnormalized distribution")
        return probs


def exact_success_prob(policy: DpPolicy, state: EnvState) -> float:
    """One-shot oracle query; build a SuccessOracle directly to share tables."""
    return SuccessOracle(policy).prob(state)


# ---------------------------------------------------------------------------
# soft value by exhaustive enumeration
# ---------------------------------------------------------------------------

_SOFT_VALUE_MAX_PATHS = 2_000_000


def exact_soft_value(reward_fn: Callable[[tuple[int, ...]], float],
                     ref_policy: DpPolicy, state: EnvState, beta: float) -> float:
    """beta * log E_{y ~ ref}[exp(r(y)/beta)] over all completions of `state`."""
    prompt = state.prompt
    remaining = prompt.horizon - state.t
    if prompt.horizon > 8 or prompt.vocab > 12 or prompt.vocab ** remaining > _SOFT_VALUE_MAX_PATHS:
        raise BudgetError(
            f"enumeration of {prompt.vocab}^{remaining} completions exceeds the budget")

    terms = []  # log p(path) + r(path) / beta

    def walk(s: EnvState, logp: float):
        if s.t == prompt.horizon:
            terms.append(logp + reward_fn(s.prefix) / beta)
            return
        probs = ref_policy.probs_batch([s])[0]
        for a in range(prompt.vocab):
            if probs[a] > 0.0:
                walk(step(s, a), logp + np.log(probs[a]))

    walk(state, 0.0)
    m = max(terms)
    return beta * (m + np.log(sum(np.exp(t - m) for t in terms)))


# ---------------------------------------------------------------------------
# first-error localization cases
# ---------------------------------------------------------------------------

@dataclass
class LocalizationCase:
    trajectory: Trajectory
    step_size: int
    first_error_step: Optional[int]  # 1-based step index, None for clean traces


def make_localization_case(env: "BitBudgetEnv", base_policy_factory,
                           rng: np.random.Generator, step_size: int = 2,
                           p_err: float = 0.5, max_retries: int = 20) -> LocalizationCase:
    """Sample a labeled case: with probability p_err, splice one token that
    flips optimal reachability from 1 to 0 at a uniformly chosen feasible
    position of an otherwise optimal trace, then let the base policy finish.

    Stored log-probs describe the generating process (uniform over fatal
    tokens at the splice, base policy elsewhere).
    """
    if env.name != BITBUDGET:
        raise ContractError("localization cases need unrecoverable errors (bitbudget only)")
    for _ in range(max_retries):
        prompt = env.sample_prompt(rng)
        policy = base_policy_factory(prompt)
        if value_star(prompt, 0, 0) != 1:
            continue
        base = sample_policy_trajectory(prompt, policy, rng)
        if rng.random() >= p_err:
            return LocalizationCase(base, step_size, None)

        # feasible positions: a fatal token exists given the optimal prefix
        states = base.states()
        feasible = []
        for t, s in enumerate(states):
            fatal = [a for a in range(prompt.vocab)
                     if value_star(prompt, t + 1, stat_next(prompt, s.stat, a)) == 0]
            if fatal:
                feasible.append((t, fatal))
        if not feasible:
            continue
        u, fatal = feasible[rng.integers(len(feasible))]
        bad = int(fatal[rng.integers(len(fatal))])

        tokens = list(base.tokens[:u]) + [bad]
        logps = list(base.behavior_logps[:u]) + [float(np.log(1.0 / len(fatal)))]
        s = step(states[u], bad)
        while s.t < prompt.horizon:
            probs = policy.probs_batch([s])[0]
            tok = int(rng.choice(prompt.vocab, p=probs))
            tokens.append(tok)
            logps.append(float(np.log(probs[tok])))
            s = step(s, tok)
        traj = Trajectory(prompt, tuple(tokens), np.array(logps), verify(prompt, tokens))
        return LocalizationCase(traj, step_size, u // step_size + 1)
    raise GenerationError(f"no localization case after {max_retries} attempts")


def write_localization_corpus(cases: Iterable[LocalizationCase], path) -> None:
    with open(path, "w") as fh:
        for case in cases:
            fh.write(json.dumps({
                "prompt": case.trajectory.prompt.to_dict(),
                "tokens": list(case.trajectory.tokens),
                "logps": [float(x) for x in case.trajectory.behavior_logps],
                "step_size": case.step_size,
                "first_error_step": case.first_error_step,
            }) + "\n")


def read_localization_corpus(path) -> list[LocalizationCase]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            prompt = Prompt.from_dict(d["prompt"])
            traj = Trajectory(prompt, tuple(d["tokens"]), np.array(d["logps"]),
                              verify(prompt, d["tokens"]))
            out.append(LocalizationCase(traj, d["step_size"], d["first_error_step"]))
    return out


# ---------------------------------------------------------------------------
# environments (prompt samplers + teachers)
# ---------------------------------------------------------------------------

class ModSumEnv:
    name = MODSUM

    def __init__(self, modulus: int = 7, vocab: int = 8, horizon: int = 6,
                 teacher_skew: float = 1.2):
        self.modulus, self.vocab, self.horizon = modulus, vocab, horizon
        self.teacher_skew = teacher_skew

    def sample_prompt(self, rng: np.random.Generator) -> Prompt:
        return Prompt(MODSUM, int(rng.integers(self.modulus)), self.horizon,
                      self.vocab, self.modulus)

    def all_prompts(self) -> list[Prompt]:
        return [Prompt(MODSUM, r, self.horizon, self.vocab, self.modulus)
                for r in range(self.modulus)]

    def teacher(self, prompt: Prompt) -> ModSumTeacher:
        return ModSumTeacher(prompt, self.teacher_skew)


class BitBudgetEnv:
    name = BITBUDGET
    vocab = 2

    def __init__(self, horizon: int = 10, count_min: int = 2, count_max: int = 8):
        self.horizon, self.count_min, self.count_max = horizon, count_min, count_max

    def sample_prompt(self, rng: np.random.Generator) -> Prompt:
        return Prompt(BITBUDGET, int(rng.integers(self.count_min, self.count_max + 1)),
                      self.horizon, self.vocab)

    def all_prompts(self) -> list[Prompt]:
        return [Prompt(BITBUDGET, c, self.horizon, self.vocab)
                for c in range(self.count_min, self.count_max + 1)]

    def teacher(self, prompt: Prompt) -> BitBudgetTeacher:
        return BitBudgetTeacher(prompt)


def make_env(name: str, **kwargs):
    if name == MODSUM:
        return ModSumEnv(**kwargs)
    if name == BITBUDGET:
        return BitBudgetEnv(**kwargs)
    raise ContractError(f"unknown env {name!r}")
