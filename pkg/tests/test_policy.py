import math

import numpy as np
import pytest

from prefixrl import autodiff as ad
from prefixrl import policy as pol
from prefixrl.envs import (
    BitBudgetEnv, ModSumEnv, Prompt, UniformPolicy, exact_success_prob, reset,
    step,
)
from prefixrl.errors import ContractError

ARCH = pol.PolicyArch(context=4, embed_dim=8, hidden_dim=32, vocab=8)
MODEL = pol.PolicyModel(ARCH)
MODSUM = Prompt("modsum", 3, 6, 8, 7)


def random_params(seed=0):
    return pol.init_params(ARCH, np.random.default_rng(seed))


class TestLogits:
    def test_zero_params_give_uniform(self):
        probs = np.exp(MODEL.log_prob_rows_np(pol.zero_params(ARCH), [reset(MODSUM)]))
        np.testing.assert_allclose(probs, 1.0 / 8, atol=1e-12)

    def test_deterministic(self):
        params = random_params(1)
        s = step(reset(MODSUM), 4)
        a = MODEL.logits_np(params, [s])
        b = MODEL.logits_np(params, [s])
        np.testing.assert_array_equal(a, b)

    def test_output_weight_touches_single_logit(self):
        params = random_params(2)
        s = step(reset(MODSUM), 2)
        base = MODEL.logits_np(params, [s])[0]
        bumped = params.copy()
        bumped.segments["out_w"][5, 3] += 1e-3
        delta = MODEL.logits_np(bumped, [s])[0] - base
        assert delta[3] != 0.0
        mask = np.ones(8, dtype=bool)
        mask[3] = False
        np.testing.assert_array_equal(delta[mask], np.zeros(7))

    def test_softmax_rows_are_distributions(self):
        rng = np.random.default_rng(3)
        params = random_params(3)
        states = []
        for _ in range(20):
            s = reset(MODSUM)
            for _ in range(int(rng.integers(0, 6))):
                s = step(s, int(rng.integers(8)))
            states.append(s)
        probs = np.exp(MODEL.log_prob_rows_np(params, states))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(probs >= 0)

    def test_architecture_mismatch_raises(self):
        with pytest.raises(ContractError):
            MODEL.logits_np(random_params(), [reset(Prompt("bitbudget", 2, 10, 2))])


class TestSampling:
    def test_greedy_is_argmax_with_low_index_ties(self):
        traj = MODEL.sample_trajectory(pol.zero_params(ARCH), MODSUM, 1.0,
                                       np.random.default_rng(0), greedy=True)
        assert traj.tokens == (0,) * 6  # all-zero logits tie; lowest index wins

    def test_zero_params_store_uniform_logps(self):
        traj = MODEL.sample_trajectory(pol.zero_params(ARCH), MODSUM, 1.0,
                                       np.random.default_rng(1))
        np.testing.assert_allclose(traj.behavior_logps, -math.log(8), atol=1e-12)

    def test_token_frequencies_uniform_within_four_sigma(self):
        n_traj = 1700
        trajs = MODEL.sample_trajectories(pol.zero_params(ARCH), [MODSUM] * n_traj,
                                          1.0, np.random.default_rng(2))
        counts = np.zeros(8)
        for t in trajs:
            for tok in t.tokens:
                counts[tok] += 1
        n = counts.sum()
        sigma = math.sqrt(n * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - n / 8) <= 4 * sigma)

    def test_fixed_seed_is_bit_reproducible(self):
        params = random_params(5)
        a = MODEL.sample_trajectories(params, [MODSUM] * 10, 1.0, np.random.default_rng(7))
        b = MODEL.sample_trajectories(params, [MODSUM] * 10, 1.0, np.random.default_rng(7))
        for x, y in zip(a, b):
            assert x.tokens == y.tokens
            np.testing.assert_array_equal(x.behavior_logps, y.behavior_logps)

    def test_temperature_changes_distribution_not_support(self):
        params = random_params(8)
        cold = MODEL.sample_trajectories(params, [MODSUM] * 200, 0.25,
                                         np.random.default_rng(3))
        hot = MODEL.sample_trajectories(params, [MODSUM] * 200, 4.0,
                                        np.random.default_rng(3))
        ent = lambda ts: len({t.tokens for t in ts})
        assert ent(cold) < ent(hot)


class TestSequenceLogProb:
    def test_matches_stored_behavior_logps(self):
        params = random_params(4)
        traj = MODEL.sample_trajectory(params, MODSUM, 1.0, np.random.default_rng(4))
        lp = MODEL.sequence_log_prob(pol.const_tensors(params), traj).data
        np.testing.assert_allclose(lp, traj.behavior_logps, atol=1e-9)

    def test_per_step_vocabulary_normalizes(self):
        params = random_params(6)
        traj = MODEL.sample_trajectory(params, MODSUM, 1.0, np.random.default_rng(6))
        rows = MODEL.log_prob_rows_np(params, traj.states())
        assert np.all(np.exp(rows).sum(axis=1) <= 1.0 + 1e-9)

    def test_gradient_matches_finite_differences(self):
        params = random_params(9)
        traj = MODEL.sample_trajectory(params, MODSUM, 1.0, np.random.default_rng(9))

        def builder(leaves):
            return ad.tsum(MODEL.sequence_log_prob(leaves, traj))

        _, grad = ad.eval_with_grad(builder, params)
        flat = params.flat()
        g = grad.flat()
        rng = np.random.default_rng(10)
        h = 1e-4
        for i in rng.choice(flat.size, size=25, replace=False):
            up, down = flat.copy(), flat.copy()
            up[i] += h
            down[i] -= h
            fd = (ad.eval_with_grad(builder, params.replace_flat(up))[0]
                  - ad.eval_with_grad(builder, params.replace_flat(down))[0]) / (2 * h)
            assert abs(g[i] - fd) / (1.0 + abs(fd)) <= 1e-5


class TestSft:
    def _teacher_batch(self, env, n, seed):
        rng = np.random.default_rng(seed)
        out = []
        from prefixrl.envs import sample_policy_trajectory
        for _ in range(n):
            prompt = env.sample_prompt(rng)
            out.append(sample_policy_trajectory(prompt, env.teacher(prompt), rng))
        return out

    def test_zero_lr_keeps_params(self):
        env = BitBudgetEnv()
        arch = pol.PolicyArch(vocab=2)
        model = pol.PolicyModel(arch)
        params = pol.init_params(arch, np.random.default_rng(0))
        batch = self._teacher_batch(env, 1, 0)
        after = model.sft_update(params, batch, lr=0.0)
        assert params.allclose(after)

    def test_empty_batch_raises(self):
        with pytest.raises(ContractError):
            MODEL.sft_update(random_params(), [], lr=0.1)

    def test_nll_drops_and_beats_uniform_accuracy(self):
        env = BitBudgetEnv()
        arch = pol.PolicyArch(vocab=2)
        model = pol.PolicyModel(arch)
        rng = np.random.default_rng(11)
        params = pol.init_params(arch, rng)
        traces = self._teacher_batch(env, 500, 11)
        nll0 = model.batch_nll(params, traces[:200])
        for step_i in range(200):
            batch = [traces[int(i)] for i in rng.integers(0, len(traces), size=32)]
            params = model.sft_update(params, batch, lr=0.3)
        assert model.batch_nll(params, traces[:200]) < nll0

        prompts = [env.sample_prompt(rng) for _ in range(400)]
        rollouts = model.sample_trajectories(params, prompts, 1.0, rng)
        acc = np.mean([t.outcome for t in rollouts])
        uniform_acc = np.mean([exact_success_prob(UniformPolicy(2), reset(p))
                               for p in prompts])
        assert acc > uniform_acc

    def test_strict_decrease_at_small_lr_on_fixed_batch(self):
        env = ModSumEnv()
        rng = np.random.default_rng(12)
        for trial in range(10):
            params = pol.init_params(ARCH, np.random.default_rng(100 + trial))
            batch = self._teacher_batch(env, 8, 200 + trial)
            before = MODEL.batch_nll(params, batch)
            after_params = MODEL.sft_update(params, batch, lr=1e-3)
            assert MODEL.batch_nll(after_params, batch) < before


class TestSnapshots:
    def test_snapshot_restore_roundtrip(self):
        params = random_params(13)
        snap = pol.snapshot(ARCH, params, "behavior")
        np.testing.assert_array_equal(snap.params.flat(), pol.restore(snap).flat())

    def test_snapshot_isolated_from_live_params(self):
        params = random_params(14)
        snap = pol.snapshot(ARCH, params, "reference")
        params.segments["out_b"][0] = 99.0
        assert snap.params.segments["out_b"][0] != 99.0

    def test_invalid_role_rejected(self):
        with pytest.raises(ContractError):
            pol.snapshot(ARCH, random_params(), "oracle")


class TestCheckpoints:
    def test_roles_and_arch_survive_roundtrip(self, tmp_path):
        snap = pol.PolicySnapshot(ARCH, random_params(15), "reward_model")
        path = tmp_path / "rm.ckpt"
        pol.save_checkpoint(path, snap)
        loaded = pol.load_checkpoint(path)
        assert loaded.role == "reward_model"
        assert loaded.arch == ARCH

    def test_file_level_bit_exact_roundtrip(self, tmp_path):
        snap = pol.PolicySnapshot(ARCH, random_params(16), "sft")
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        pol.save_checkpoint(p1, snap)
        pol.save_checkpoint(p2, pol.load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(ContractError):
            pol.load_checkpoint(path)
