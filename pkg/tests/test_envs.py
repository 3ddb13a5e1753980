import itertools
import math

import numpy as np
import pytest

from prefixrl import envs
from prefixrl.envs import (
    INC, SKIP, BitBudgetEnv, EnvState, ModSumEnv, PointMassPolicy, Prompt,
    SuccessOracle, TablePolicy, UniformPolicy, exact_soft_value,
    exact_success_prob, make_localization_case, read_localization_corpus,
    reset, sample_policy_trajectory, step, value_star, verify,
    write_localization_corpus,
)
from prefixrl.errors import BudgetError, ContractError, GenerationError


def enumerate_success_prob(policy, prompt: Prompt, state=None) -> float:
    """Independent oracle: sum path probabilities over every completion."""
    state = state or reset(prompt)
    total = 0.0
    for suffix in itertools.product(range(prompt.vocab), repeat=prompt.horizon - state.t):
        s, logp = state, 0.0
        for tok in suffix:
            p = policy.probs_batch([s])[0][tok]
            if p == 0.0:
                logp = -math.inf
                break
            logp += math.log(p)
            s = step(s, tok)
        if logp > -math.inf and s.t == prompt.horizon and s.stat == prompt.target:
            total += math.exp(logp)
    return total


def optimal_value_by_dp(prompt: Prompt, t: int, stat: int) -> int:
    """Independent reachability oracle: backward induction with max over actions."""
    if t == prompt.horizon:
        return int(stat == prompt.target)
    return max(optimal_value_by_dp(prompt, t + 1, envs.stat_next(prompt, stat, a))
               for a in range(prompt.vocab))


class WindowPolicy:
    """Test policy that genuinely depends on the last two tokens."""

    context_len = 2
    uses_statistic = False

    def __init__(self, vocab: int, seed: int):
        self.vocab = vocab
        self.rng = np.random.default_rng(seed)
        self.tables = {}

    def probs_batch(self, states):
        out = np.zeros((len(states), self.vocab))
        for i, s in enumerate(states):
            key = (s.t, s.prefix[-2:])
            if key not in self.tables:
                raw = self.rng.random(self.vocab) + 0.1
                self.tables[key] = raw / raw.sum()
            out[i] = self.tables[key]
        return out


class TestTransitions:
    def test_modsum_reset_and_step(self):
        p = Prompt("modsum", 3, 6, 8, 7)
        s = step(reset(p), 3)
        assert (s.t, s.stat) == (1, 3)

    def test_bitbudget_skip_keeps_count(self):
        p = Prompt("bitbudget", 2, 3, 2)
        s = EnvState(p, 1, 2, (INC,))
        s2 = step(s, SKIP)
        assert (s2.t, s2.stat) == (2, 2)

    def test_modsum_wraps_modulus(self):
        p = Prompt("modsum", 3, 6, 8, 7)
        s = EnvState(p, 1, 5, (5,))
        assert step(s, 4).stat == 2

    def test_step_past_horizon_raises(self):
        p = Prompt("bitbudget", 1, 1, 2)
        s = step(reset(p), INC)
        with pytest.raises(ContractError):
            step(s, SKIP)

    def test_state_is_pure_function_of_prefix(self):
        p = Prompt("modsum", 0, 4, 8, 7)
        s = reset(p)
        for tok in (2, 5, 1):
            s = step(s, tok)
        assert s.prefix == (2, 5, 1)
        assert s.stat == (2 + 5 + 1) % 7


class TestVerify:
    def test_modsum_congruence(self):
        p = Prompt("modsum", 3, 4, 8, 7)
        assert verify(p, (7, 1, 2, 0)) == 1  # sums to 10, 10 mod 7 = 3

    def test_bitbudget_exact_count(self):
        p = Prompt("bitbudget", 2, 3, 2)
        assert verify(p, (INC, INC, SKIP)) == 1
        assert verify(Prompt("bitbudget", 1, 3, 2), (INC, INC, SKIP)) == 0

    def test_wrong_length_raises(self):
        with pytest.raises(ContractError):
            verify(Prompt("modsum", 0, 4, 8, 7), (1, 2))


class TestExactSuccessProb:
    def test_two_digit_symmetry(self):
        p = Prompt("modsum", 1, 1, 2, 2)
        assert exact_success_prob(UniformPolicy(2), reset(p)) == pytest.approx(0.5)

    def test_bitbudget_two_step_half(self):
        p = Prompt("bitbudget", 1, 2, 2)
        assert exact_success_prob(UniformPolicy(2), reset(p)) == pytest.approx(0.5)

    def test_uniform_modsum_matches_enumeration(self):
        p = Prompt("modsum", 3, 4, 8, 7)
        policy = UniformPolicy(8)
        assert abs(exact_success_prob(policy, reset(p))
                   - enumerate_success_prob(policy, p)) <= 1e-12

    def test_random_table_policies_match_enumeration(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            p = Prompt("modsum", int(rng.integers(7)), 4, 8, 7)
            policy = TablePolicy.random(p, rng)
            assert abs(exact_success_prob(policy, reset(p))
                       - enumerate_success_prob(policy, p)) <= 1e-12

    def test_window_policy_matches_enumeration_from_mid_state(self):
        rng = np.random.default_rng(5)
        p = Prompt("bitbudget", 3, 6, 2)
        policy = WindowPolicy(2, seed=9)
        oracle = SuccessOracle(policy)
        for _ in range(20):
            s = reset(p)
            for _ in range(int(rng.integers(0, 4))):
                s = step(s, int(rng.integers(2)))
            assert abs(oracle.prob(s) - enumerate_success_prob(policy, p, s)) <= 1e-12

    def test_point_mass_iff_verify(self):
        rng = np.random.default_rng(23)
        p = Prompt("modsum", 2, 5, 8, 7)
        for _ in range(20):
            tokens = tuple(int(x) for x in rng.integers(0, 8, size=5))
            prob = exact_success_prob(PointMassPolicy(tokens, 8), reset(p))
            assert prob == pytest.approx(float(verify(p, tokens)), abs=1e-12)

    def test_invariant_to_prefix_realization(self):
        p = Prompt("modsum", 4, 6, 8, 7)
        policy = UniformPolicy(8)
        oracle = SuccessOracle(policy)
        a = oracle.prob(EnvState(p, 3, 5, (1, 3, 1)))
        b = oracle.prob(EnvState(p, 3, 5, (5, 0, 0)))
        assert a == b

    def test_unnormalized_policy_raises(self):
        class Bad:
            context_len = 0
            uses_statistic = False

            def probs_batch(self, states):
                return np.full((len(states), 2), 0.4)

        with pytest.raises(ContractError):
            exact_success_prob(Bad(), reset(Prompt("bitbudget", 1, 2, 2)))

    def test_monte_carlo_agrees_within_four_sigma(self):
        rng = np.random.default_rng(31)
        p = Prompt("bitbudget", 3, 6, 2)
        policy = TablePolicy.random(p, rng)
        exact = exact_success_prob(policy, reset(p))
        n = 10_000
        hits = sum(sample_policy_trajectory(p, policy, rng).outcome for _ in range(n))
        sigma = math.sqrt(exact * (1 - exact) / n)
        assert abs(hits / n - exact) <= 4 * sigma


class TestExactSoftValue:
    def test_constant_reward_returns_constant(self):
        p = Prompt("bitbudget", 1, 3, 2)
        for beta in (0.1, 1.0, 7.0):
            v = exact_soft_value(lambda toks: 2.5, UniformPolicy(2), reset(p), beta)
            assert v == pytest.approx(2.5, abs=1e-9)

    def test_two_path_zero_rewards(self):
        p = Prompt("bitbudget", 0, 1, 2)
        v = exact_soft_value(lambda toks: 0.0, UniformPolicy(2), reset(p), 1.0)
        assert v == pytest.approx(0.0, abs=1e-12)

    def test_two_path_closed_form(self):
        p = Prompt("bitbudget", 0, 1, 2)
        for beta in (0.5, 1.0, 3.0):
            reward = lambda toks: beta * math.log(3) if toks[0] == INC else 0.0
            v = exact_soft_value(reward, UniformPolicy(2), reset(p), beta)
            assert v == pytest.approx(beta * math.log(2), abs=1e-9)

    def test_large_beta_approaches_mean_reward(self):
        rng = np.random.default_rng(3)
        p = Prompt("bitbudget", 2, 5, 2)
        rewards = {toks: float(rng.random())
                   for toks in itertools.product(range(2), repeat=5)}
        policy = TablePolicy.random(p, rng)
        mean_reward = 0.0
        for toks in rewards:
            prob = math.exp(sum(
                math.log(policy.probs_batch([s])[0][tok])
                for s, tok in zip(_states_along(p, toks), toks)))
            mean_reward += prob * rewards[toks]
        v = exact_soft_value(lambda t: rewards[t], policy, reset(p), 1e3)
        assert abs(v - mean_reward) <= 1e-2

    def test_budget_error(self):
        p = Prompt("modsum", 0, 9, 14, 7)
        with pytest.raises(BudgetError):
            exact_soft_value(lambda t: 0.0, UniformPolicy(14), reset(p), 1.0)


def _states_along(prompt, tokens):
    s = reset(prompt)
    for tok in tokens:
        yield s
        s = step(s, tok)


class TestLocalization:
    def test_overshoot_is_unrecoverable_from_step_one(self):
        env = BitBudgetEnv(horizon=4, count_min=0, count_max=0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            case = make_localization_case(env, env.teacher, rng, step_size=2, p_err=1.0)
            # with c*=0 any INC is fatal; splices land on step 1 or 2
            assert case.first_error_step in (1, 2)
            assert case.trajectory.outcome == 0

    def test_error_free_traces_verify(self):
        env = BitBudgetEnv()
        rng = np.random.default_rng(1)
        cases = [make_localization_case(env, env.teacher, rng, p_err=0.0)
                 for _ in range(50)]
        assert all(c.first_error_step is None for c in cases)
        assert all(c.trajectory.outcome == 1 for c in cases)

    def test_labels_match_reachability_oracle(self):
        env = BitBudgetEnv(horizon=8)
        rng = np.random.default_rng(2)
        for _ in range(300):
            case = make_localization_case(env, env.teacher, rng, step_size=2)
            traj = case.trajectory
            prompt = traj.prompt
            drop = None
            stat = 0
            for t, tok in enumerate(traj.tokens):
                before = optimal_value_by_dp(prompt, t, stat)
                stat = envs.stat_next(prompt, stat, tok)
                after = optimal_value_by_dp(prompt, t + 1, stat)
                if before == 1 and after == 0:
                    drop = t
                    break
            if case.first_error_step is None:
                assert drop is None
            else:
                assert drop is not None
                assert case.first_error_step == drop // case.step_size + 1

    def test_requires_bitbudget(self):
        env = ModSumEnv()
        with pytest.raises(ContractError):
            make_localization_case(env, env.teacher, np.random.default_rng(0))

    def test_generation_error_on_zero_retries(self):
        env = BitBudgetEnv()
        with pytest.raises(GenerationError):
            make_localization_case(env, env.teacher, np.random.default_rng(0),
                                   max_retries=0)

    def test_corpus_roundtrip(self, tmp_path):
        env = BitBudgetEnv()
        rng = np.random.default_rng(3)
        cases = [make_localization_case(env, env.teacher, rng) for _ in range(10)]
        path = tmp_path / "corpus.jsonl"
        write_localization_corpus(cases, path)
        loaded = read_localization_corpus(path)
        assert len(loaded) == len(cases)
        for a, b in zip(cases, loaded):
            assert a.trajectory.tokens == b.trajectory.tokens
            assert a.trajectory.prompt == b.trajectory.prompt
            assert a.first_error_step == b.first_error_step
            np.testing.assert_allclose(a.trajectory.behavior_logps,
                                       b.trajectory.behavior_logps)


class TestValueStar:
    def test_matches_dp_oracle_on_bitbudget(self):
        prompt = Prompt("bitbudget", 3, 6, 2)
        for t in range(7):
            for stat in range(t + 1):
                assert value_star(prompt, t, stat) == optimal_value_by_dp(prompt, t, stat)

    def test_modsum_always_recoverable_before_horizon(self):
        prompt = Prompt("modsum", 5, 4, 8, 7)
        for t in range(4):
            for stat in range(7):
                assert value_star(prompt, t, stat) == 1
        assert value_star(prompt, 4, 5) == 1
        assert value_star(prompt, 4, 3) == 0


class TestPromptValidation:
    def test_bad_targets(self):
        with pytest.raises(ContractError):
            Prompt("modsum", 7, 6, 8, 7)
        with pytest.raises(ContractError):
            Prompt("bitbudget", 11, 10, 2)

    def test_teacher_policies_are_optimal(self):
        rng = np.random.default_rng(4)
        menv, benv = ModSumEnv(), BitBudgetEnv()
        for env in (menv, benv):
            for _ in range(5):
                prompt = env.sample_prompt(rng)
                policy = env.teacher(prompt)
                assert exact_success_prob(policy, reset(prompt)) == pytest.approx(1.0, abs=1e-12)
