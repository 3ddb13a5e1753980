import math

import numpy as np
import pytest
from helpers import fd_probe, forced_params, forced_snapshot

from prefixrl import autodiff as ad
from prefixrl import policy as pol
from prefixrl import rewards as rw
from prefixrl.envs import Prompt, Trajectory, reset, verify
from prefixrl.errors import ContractError

ARCH2 = pol.PolicyArch(context=2, embed_dim=3, hidden_dim=4, vocab=2)
MODEL2 = pol.PolicyModel(ARCH2)
ARCH8 = pol.PolicyArch(context=4, embed_dim=8, hidden_dim=32, vocab=8)
MODEL8 = pol.PolicyModel(ARCH8)


def traj_of(tokens, prompt):
    return Trajectory(prompt, tuple(tokens), np.zeros(len(tokens)),
                      verify(prompt, tokens))


def bit_prompt(horizon, target=None):
    target = sum(1 for _ in range(0)) if target is None else target
    return Prompt("bitbudget", target, horizon, 2)


class TestTokenLogRatio:
    def test_identical_pair_is_zero(self):
        snap = forced_snapshot(ARCH2, [0.3, 0.7])
        p = bit_prompt(3, 1)
        out = rw.token_log_ratio(MODEL2, snap, snap, reset(p), 0, beta=2.0)
        assert out.item() == 0.0

    def test_direct_evaluation(self):
        rm = forced_snapshot(ARCH2, [0.5, 0.5])
        ref = forced_snapshot(ARCH2, [0.25, 0.75])
        p = bit_prompt(3, 1)
        out = rw.token_log_ratio(MODEL2, rm, ref, reset(p), 0, beta=1.0)
        assert out.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_linear_in_beta(self):
        rm = forced_snapshot(ARCH2, [0.6, 0.4])
        ref = forced_snapshot(ARCH2, [0.2, 0.8])
        p = bit_prompt(3, 1)
        one = rw.token_log_ratio(MODEL2, rm, ref, reset(p), 1, beta=1.0).item()
        two = rw.token_log_ratio(MODEL2, rm, ref, reset(p), 1, beta=2.0).item()
        assert two == pytest.approx(2 * one, abs=1e-12)


class TestPrefixValues:
    def test_identical_pair_all_zero(self):
        snap = forced_snapshot(ARCH2, [0.4, 0.6])
        p = bit_prompt(4, 2)
        series = rw.prefix_values(MODEL2, snap, snap, traj_of([0, 1, 0, 1], p), 3.0)
        np.testing.assert_array_equal(series.values.data, np.zeros(5))

    def test_constant_ratio_arithmetic(self):
        rm = forced_snapshot(ARCH2, [0.5, 0.5])
        ref = forced_snapshot(ARCH2, [0.25, 0.75])
        p = bit_prompt(3, 3)
        series = rw.prefix_values(MODEL2, rm, ref, traj_of([0, 0, 0], p), 1.0)
        assert series.values.data[3] == pytest.approx(3 * math.log(2), abs=1e-12)
        np.testing.assert_allclose(series.vbar.data, math.log(2), atol=1e-12)

    def test_telescoping_identity_random_triples(self):
        rng = np.random.default_rng(0)
        p = Prompt("modsum", 2, 6, 8, 7)
        for _ in range(100):
            rm = pol.PolicySnapshot(ARCH8, pol.init_params(ARCH8, rng), "reward_model")
            ref = pol.PolicySnapshot(ARCH8, pol.init_params(ARCH8, rng), "reference")
            tokens = [int(x) for x in rng.integers(0, 8, size=6)]
            beta = float(rng.uniform(0.05, 12.0))
            traj = traj_of(tokens, p)
            series = rw.prefix_values(MODEL8, rm, ref, traj, beta)
            for t in range(6):
                lhs = series.values.data[t + 1] - series.values.data[t]
                direct = rw.token_log_ratio(MODEL8, rm, ref, traj.states()[t],
                                            tokens[t], beta).item()
                assert abs(lhs - direct) <= 1e-9


class TestIpvrmLoss:
    def _series_with_constant_vbar(self, vbar, T=4, beta=1.0):
        ratios = ad.leaf(np.full(T, vbar))
        return rw.series_from_ratios(ratios, beta)

    def test_positive_at_margin_gives_ln2(self):
        m = 0.7
        series = self._series_with_constant_vbar(m)
        assert rw.ipvrm_loss(series, 1, m).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_negative_at_minus_margin_gives_ln2(self):
        m = 0.7
        series = self._series_with_constant_vbar(-m)
        assert rw.ipvrm_loss(series, 0, m).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_single_step_weightings_coincide(self):
        series = self._series_with_constant_vbar(0.3, T=1)
        losses = [rw.ipvrm_loss(series, 1, 0.5, w).item() for w in rw.WEIGHTINGS]
        assert losses[0] == losses[1] == losses[2]

    def test_m0_t1_reduces_to_plain_bce(self):
        for label in (0, 1):
            for v in (-1.3, 0.0, 2.2):
                series = self._series_with_constant_vbar(v, T=1)
                got = rw.ipvrm_loss(series, label, 0.0).item()
                p = 1 / (1 + math.exp(-v))
                want = -math.log(p) if label == 1 else -math.log(1 - p)
                assert got == pytest.approx(want, abs=1e-12)

    def test_late_at_least_early_for_monotone_steps(self):
        # increasing ratios give increasing vbar; for label 0 that means
        # per-step losses are non-decreasing in t
        series = rw.series_from_ratios(ad.constant(np.array([0.1, 0.4, 0.9, 1.7])), 1.0)
        late = rw.ipvrm_loss(series, 0, 0.2, "late").item()
        early = rw.ipvrm_loss(series, 0, 0.2, "early").item()
        assert late >= early

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        p = Prompt("modsum", 4, 4, 8, 7)
        ref = pol.PolicySnapshot(ARCH8, pol.init_params(ARCH8, rng), "reference")
        traj = traj_of([1, 5, 0, 3], p)
        params = pol.init_params(ARCH8, rng)
        for weighting in rw.WEIGHTINGS:
            def builder(leaves):
                series = rw.prefix_values(MODEL8, leaves, ref, traj, beta=3.0)
                return rw.ipvrm_loss(series, traj.outcome, 1.5, weighting)

            fd_probe(builder, params, n_entries=10, seed=2)


class TestImplicitPrmLoss:
    def test_zero_logit_gives_ln2(self):
        series = rw.series_from_ratios(ad.constant(np.zeros(3)), 1.0)
        assert rw.implicit_prm_loss(series, 1).item() == pytest.approx(math.log(2))

    def test_saturation(self):
        series = rw.series_from_ratios(ad.constant(np.full(3, 20.0)), 1.0)
        assert rw.implicit_prm_loss(series, 1).item() == pytest.approx(0.0, abs=1e-9)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        p = Prompt("modsum", 1, 4, 8, 7)
        ref = pol.PolicySnapshot(ARCH8, pol.init_params(ARCH8, rng), "reference")
        traj = traj_of([2, 2, 7, 1], p)
        params = pol.init_params(ARCH8, rng)

        def builder(leaves):
            series = rw.prefix_values(MODEL8, leaves, ref, traj, beta=0.05)
            return rw.implicit_prm_loss(series, traj.outcome)

        fd_probe(builder, params, n_entries=15, seed=4, rtol=1e-4)


class TestDpoLoss:
    def _pair(self):
        p = bit_prompt(1, 1)
        return rw.OutcomePair(p, traj_of([0], p), traj_of([1], p))

    def test_zero_gap_gives_ln2(self):
        snap = forced_snapshot(ARCH2, [0.35, 0.65])
        loss = rw.dpo_loss(MODEL2, snap, snap, self._pair(), beta=0.05)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_ln3_gap(self):
        rm = forced_snapshot(ARCH2, [0.75, 0.25])
        ref = forced_snapshot(ARCH2, [0.5, 0.5])
        loss = rw.dpo_loss(MODEL2, rm, ref, self._pair(), beta=1.0)
        assert loss.item() == pytest.approx(math.log(4 / 3), abs=1e-12)

    def test_swapping_models_negates_gap(self):
        rm = forced_snapshot(ARCH2, [0.7, 0.3])
        ref = forced_snapshot(ARCH2, [0.45, 0.55])
        l1 = rw.dpo_loss(MODEL2, rm, ref, self._pair(), beta=2.0).item()
        l2 = rw.dpo_loss(MODEL2, ref, rm, self._pair(), beta=2.0).item()
        assert l2 == pytest.approx(-math.log(1 - math.exp(-l1)), abs=1e-9)

    def test_pair_validation(self):
        p = bit_prompt(1, 1)
        with pytest.raises(ContractError):
            rw.OutcomePair(p, traj_of([1], p), traj_of([0], p))  # labels flipped

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        p = Prompt("modsum", 0, 3, 8, 7)
        winner = traj_of([0, 0, 0], p)
        loser = traj_of([1, 0, 0], p)
        pair = rw.OutcomePair(p, winner, loser)
        ref = pol.PolicySnapshot(ARCH8, pol.init_params(ARCH8, rng), "reference")
        params = pol.init_params(ARCH8, rng)
        fd_probe(lambda lv: rw.dpo_loss(MODEL8, lv, ref, pair, beta=0.05),
                 params, n_entries=15, seed=6)


class TestGroupContext:
    def test_basic_stats(self):
        g = rw.GroupContext.from_outcomes([1, 1, 0, 0])
        assert (g.mu, g.s) == (0.5, 0.5)
        assert g.v_x == 0.0

    def test_degenerate_group_clamps(self):
        g = rw.GroupContext.from_outcomes([1, 1, 1, 1])
        assert g.mu == 1.0 and g.s == 0.0
        assert g.mu_clamped == 1 - 1 / 8
        assert np.isfinite(g.v_x)
        assert g.weight(1) == pytest.approx(1 / 8)


class TestOnlineIpvrmLoss:
    def _series(self, vbar, T=4):
        return rw.series_from_ratios(ad.constant(np.full(T, vbar)), 1.0)

    def test_neutral_difficulty_halves_offline_loss(self):
        g = rw.GroupContext.from_outcomes([1, 0, 1, 0])
        series = self._series(0.4)
        online = rw.online_ipvrm_loss(series, 1, 0.8, g).item()
        offline = rw.ipvrm_loss(series, 1, 0.8).item()
        assert online == pytest.approx(0.5 * offline, abs=1e-12)

    def test_easy_prompt_downweights_correct_rollouts(self):
        g = rw.GroupContext.from_outcomes([1] * 4)
        series = self._series(0.4)
        base = rw.online_ipvrm_loss(series, 1, 0.8, g, adb=False).item()
        plain = rw.ipvrm_loss(series, 1, 0.8).item()
        assert base == pytest.approx(plain / 8, abs=1e-12)

    def test_monotone_decreasing_in_difficulty_baseline(self):
        series = self._series(0.3)
        losses = []
        for mu in np.linspace(0.1, 0.9, 9):
            k = int(round(mu * 10))
            g = rw.GroupContext.from_outcomes([1] * k + [0] * (10 - k))
            losses.append(rw.online_ipvrm_loss(series, 1, 0.5, g).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_switches_off_equals_uniform_ipvrm(self):
        g = rw.GroupContext.from_outcomes([1, 1, 1, 0])
        for label in (0, 1):
            series = self._series(-0.2 if label else 0.7)
            naive = rw.online_ipvrm_loss(series, label, 0.9, g, adb=False, dlw=False).item()
            plain = rw.ipvrm_loss(series, label, 0.9, "uniform").item()
            assert naive == plain

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(8)
        p = Prompt("modsum", 5, 4, 8, 7)
        ref = pol.PolicySnapshot(ARCH8, pol.init_params(ARCH8, rng), "reference")
        traj = traj_of([5, 0, 0, 0], p)
        g = rw.GroupContext.from_outcomes([1, 0, 0, 1])
        params = pol.init_params(ARCH8, rng)

        def builder(leaves):
            series = rw.prefix_values(MODEL8, leaves, ref, traj, beta=10.0)
            return rw.online_ipvrm_loss(series, traj.outcome, 5.0, g)

        fd_probe(builder, params, n_entries=15, seed=9)
