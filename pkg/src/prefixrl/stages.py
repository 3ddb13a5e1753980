"""Pipeline stages: supervised warm start, reward-model data collection,
reward-model training, the RL loop, and the evaluation drivers.

Every stage derives its RNG stream from (seed, stage id), so sft, rm-data,
and train-rm artifacts are bit-identical across runs with the same config.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import evals
from .config import ExperimentConfig
from .envs import (BitBudgetEnv, ModSumEnv, Prompt, Trajectory,
                   make_localization_case, sample_policy_trajectory,
                   write_localization_corpus)
from .errors import ContractError
from .policy import (PolicyArch, PolicyModel, PolicySnapshot, init_params,
                     load_checkpoint, save_checkpoint)
from .rewards import (GroupContext, OutcomePair, implicit_prm_loss, ipvrm_loss,
                      series_from_ratios)
from .trainer import OnlineRmConfig, train_iteration

_STAGE_IDS = {"sft": 0, "rm-data": 1, "train-rm": 2, "train-rl": 3,
              "eval-bon": 4, "eval-steps": 5, "eval-td": 6}

ARTIFACTS = {
    "sft": "sft.ckpt",
    "rm-data": "rm_data.jsonl",
    "train-rm": "rm.ckpt",
    "train-rl": "policy.ckpt",
}


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STAGE_IDS[stage]]))


def build_env(cfg: ExperimentConfig):
    if cfg.env.name == "modsum":
        return ModSumEnv(cfg.env.modulus, cfg.env.vocab, cfg.env.horizon,
                         cfg.env.teacher_skew)
    return BitBudgetEnv(cfg.env.horizon, cfg.env.count_min, cfg.env.count_max)


def build_model(cfg: ExperimentConfig, env) -> PolicyModel:
    vocab = env.vocab if hasattr(env, "vocab") else 2
    arch = PolicyArch(cfg.policy.context, cfg.policy.embed_dim,
                      cfg.policy.hidden_dim, vocab)
    return PolicyModel(arch)


def _require(run_dir: Path, artifact: str, stage: str) -> Path:
    path = run_dir / artifact
    if not path.exists():
        raise ContractError(
            f"missing {artifact}: run the {stage!r} stage first (looked in {run_dir})")
    return path


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def _update_summary(run_dir: Path, section: str, payload: dict) -> None:
    path = run_dir / "summary.json"
    summary = json.loads(path.read_text()) if path.exists() else {}
    summary[section] = payload
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# supervised warm start
# ---------------------------------------------------------------------------

def teacher_trajectories(env, n: int, rng: np.random.Generator) -> list[Trajectory]:
    out = []
    for _ in range(n):
        prompt = env.sample_prompt(rng)
        out.append(sample_policy_trajectory(prompt, env.teacher(prompt), rng))
    return out


def train_sft(model: PolicyModel, env, cfg, rng: np.random.Generator):
    """Imitate the environment teacher: SGD on token NLL over sampled batches."""
    traces = teacher_trajectories(env, cfg.num_traces, rng)
    params = init_params(model.arch, rng)
    losses = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(traces), size=cfg.batch_size)
        batch = [traces[int(i)] for i in idx]
        losses.append(model.batch_nll(params, batch))
        params = model.sft_update(params, batch, cfg.lr)
    return params, losses


def run_sft(cfg: ExperimentConfig) -> Path:
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    env = build_env(cfg)
    model = build_model(cfg, env)
    params, losses = train_sft(model, env, cfg.sft, stage_rng(cfg.seed, "sft"))
    save_checkpoint(run_dir / "sft.ckpt", PolicySnapshot(model.arch, params, "sft"))
    _write_jsonl(run_dir / "sft_log.jsonl",
                 ({"step": i, "nll": loss} for i, loss in enumerate(losses)))
    return run_dir / "sft.ckpt"


# ---------------------------------------------------------------------------
# reward-model data
# ---------------------------------------------------------------------------

@dataclass
class RmDataGroup:
    prompt: Prompt
    trajectories: list[Trajectory]
    group: GroupContext
    pair: tuple[int, int]  # indices of one (correct, incorrect) rollout

    def outcome_pair(self) -> OutcomePair:
        return OutcomePair(self.prompt, self.trajectories[self.pair[0]],
                           self.trajectories[self.pair[1]])


def generate_rm_data(model: PolicyModel, sft: PolicySnapshot, env, cfg,
                     rng: np.random.Generator) -> list[RmDataGroup]:
    """Rollouts from the warm-started policy; keep prompts with mixed
    outcomes and pick one (correct, incorrect) pair per kept prompt."""
    prompts = [env.sample_prompt(rng) for _ in range(cfg.num_prompts)]
    repeated = [p for p in prompts for _ in range(cfg.rollouts_per_prompt)]
    rollouts = model.sample_trajectories(sft.params, repeated, cfg.temperature, rng)
    groups = []
    k = cfg.rollouts_per_prompt
    for i, prompt in enumerate(prompts):
        chunk = rollouts[i * k:(i + 1) * k]
        outcomes = [t.outcome for t in chunk]
        ctx = GroupContext.from_outcomes(outcomes)
        if not 0.0 < ctx.mu < 1.0:
            continue
        correct = [j for j, o in enumerate(outcomes) if o == 1]
        wrong = [j for j, o in enumerate(outcomes) if o == 0]
        pair = (int(correct[rng.integers(len(correct))]),
                int(wrong[rng.integers(len(wrong))]))
        groups.append(RmDataGroup(prompt, chunk, ctx, pair))
    return groups


def write_rm_data(groups: Sequence[RmDataGroup], path) -> None:
    def rec(g):
        return {
            "prompt": g.prompt.to_dict(),
            "rollouts": [{"tokens": list(t.tokens),
                          "logps": [float(x) for x in t.behavior_logps],
                          "outcome": t.outcome} for t in g.trajectories],
            "pair": list(g.pair),
            "mu": g.group.mu,
            "s": g.group.s,
        }
    _write_jsonl(Path(path), (rec(g) for g in groups))


def read_rm_data(path) -> list[RmDataGroup]:
    groups = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            prompt = Prompt.from_dict(d["prompt"])
            trajs = [Trajectory(prompt, tuple(r["tokens"]), np.array(r["logps"]),
                                r["outcome"]) for r in d["rollouts"]]
            ctx = GroupContext.from_outcomes([t.outcome for t in trajs])
            groups.append(RmDataGroup(prompt, trajs, ctx, tuple(d["pair"])))
    return groups


def run_rm_data(cfg: ExperimentConfig) -> Path:
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    sft = load_checkpoint(_require(run_dir, "sft.ckpt", "sft"))
    env = build_env(cfg)
    model = PolicyModel(sft.arch)
    groups = generate_rm_data(model, sft, env, cfg.rm_data,
                              stage_rng(cfg.seed, "rm-data"))
    write_rm_data(groups, run_dir / "rm_data.jsonl")
    return run_dir / "rm_data.jsonl"


# ---------------------------------------------------------------------------
# reward-model training
# ---------------------------------------------------------------------------

def _rm_batch_loss(model, leaves, items, ref_logps, method, beta, margin):
    """One graph for a whole minibatch: a single batched forward of the
    trainable model; the frozen reference log-probs enter as constants."""
    states, tokens = [], []
    for traj in items:
        states.extend(traj.states())
        tokens.extend(traj.tokens)
    rows = model.log_prob_rows(leaves, states)
    logps = ad.take_per_row(rows, np.array(tokens))
    ratios_all = (logps - ad.constant(np.concatenate(ref_logps))) * beta
    total, offset = None, 0
    for traj, ref_lp in zip(items, ref_logps):
        T = len(ref_lp)
        series = series_from_ratios(ratios_all[offset:offset + T], beta)
        offset += T
        if method == "implicit_prm":
            term = implicit_prm_loss(series, traj.outcome)
        else:
            weighting = {"ipvrm": "uniform", "ipvrm_late": "late",
                         "ipvrm_early": "early"}[method]
            term = ipvrm_loss(series, traj.outcome, margin, weighting)
        total = term if total is None else total + term
    return total / float(len(items))


def _dpo_batch_loss(model, leaves, pairs, ref_logps, beta):
    states, tokens, lengths = [], [], []
    for pair in pairs:
        for traj in (pair.winner, pair.loser):
            states.extend(traj.states())
            tokens.extend(traj.tokens)
            lengths.append(traj.horizon)
    rows = model.log_prob_rows(leaves, states)
    logps = ad.take_per_row(rows, np.array(tokens))
    diffs = (logps - ad.constant(np.concatenate(ref_logps))) * beta
    total, offset = None, 0
    for i, pair in enumerate(pairs):
        w = ad.tsum(diffs[offset:offset + lengths[2 * i]])
        offset += lengths[2 * i]
        l = ad.tsum(diffs[offset:offset + lengths[2 * i + 1]])
        offset += lengths[2 * i + 1]
        term = -ad.log_sigmoid(w - l)
        total = term if total is None else total + term
    return total / float(len(pairs))


def train_rm(model: PolicyModel, sft: PolicySnapshot, groups: Sequence[RmDataGroup],
             cfg, rng: np.random.Generator):
    """Initialize from the warm-start checkpoint and fit the configured
    objective against the frozen warm-start reference (SGD, optional momentum)."""
    params = sft.params.copy()
    beta = cfg.effective_beta()
    sft_tensors = sft.tensors()

    def ref_token_logps(traj):
        return model.sequence_log_prob(sft_tensors, traj).data

    if cfg.method == "dpo":
        items = [g.outcome_pair() for g in groups]
        ref_logps = [lp for p in items
                     for lp in (ref_token_logps(p.winner), ref_token_logps(p.loser))]

        def batch_loss(leaves, batch_items, batch_refs):
            return _dpo_batch_loss(model, leaves, batch_items, batch_refs, beta)

        def refs_of(indices):
            out = []
            for i in indices:
                out.extend(ref_logps[2 * i:2 * i + 2])
            return out
    else:
        items = [t for g in groups for t in g.trajectories]
        ref_logps = [ref_token_logps(t) for t in items]

        def batch_loss(leaves, batch_items, batch_refs):
            return _rm_batch_loss(model, leaves, batch_items, batch_refs,
                                  cfg.method, beta, cfg.margin)

        def refs_of(indices):
            return [ref_logps[i] for i in indices]

    losses = []
    velocity = params.zeros_like()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(items))
        epoch_losses = []
        for start in range(0, len(items), cfg.batch_size):
            idx = [int(i) for i in order[start:start + cfg.batch_size]]
            batch = [items[i] for i in idx]
            refs = refs_of(idx)
            loss, grad = ad.eval_with_grad(
                lambda lv: batch_loss(lv, batch, refs), params)
            if cfg.momentum > 0.0:
                velocity = ad.ParamVector(
                    {k: cfg.momentum * velocity.segments[k] - cfg.lr * grad.segments[k]
                     for k in velocity.segments}, check=False)
                params = ad.ParamVector(
                    {k: params.segments[k] + velocity.segments[k]
                     for k in params.segments}, check=False)
            else:
                params = params.axpy(-cfg.lr, grad)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return params, losses


def run_train_rm(cfg: ExperimentConfig) -> Path:
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    sft = load_checkpoint(_require(run_dir, "sft.ckpt", "sft"))
    groups = read_rm_data(_require(run_dir, "rm_data.jsonl", "rm-data"))
    model = PolicyModel(sft.arch)
    params, losses = train_rm(model, sft, groups, cfg.rm,
                              stage_rng(cfg.seed, "train-rm"))
    save_checkpoint(run_dir / "rm.ckpt",
                    PolicySnapshot(model.arch, params, "reward_model"))
    _write_jsonl(run_dir / "rm_loss.jsonl",
                 ({"epoch": i, "loss": loss} for i, loss in enumerate(losses)))
    return run_dir / "rm.ckpt"


# ---------------------------------------------------------------------------
# RL loop
# ---------------------------------------------------------------------------

def run_train_rl(cfg: ExperimentConfig) -> Path:
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    sft = load_checkpoint(_require(run_dir, "sft.ckpt", "sft"))
    rm_snap = load_checkpoint(_require(run_dir, "rm.ckpt", "train-rm"))
    env = build_env(cfg)
    model = PolicyModel(sft.arch)
    rng = stage_rng(cfg.seed, "train-rl")

    student = sft.params.copy()
    rm = rm_snap.params.copy()
    rm_cfg = OnlineRmConfig(beta=cfg.rm.effective_beta(), margin=cfg.rm.margin,
                            lr=cfg.rl.rm_lr, adb=cfg.online.adb,
                            dlw=cfg.online.dlw, frozen=cfg.online.frozen)
    metrics_path = run_dir / "metrics.jsonl"
    metrics_path.write_text("")
    for i in range(cfg.rl.iterations):
        student, rm, metrics = train_iteration(
            model, student, rm, sft, env, cfg.rl.ppo, rm_cfg, rng,
            rl_method=cfg.rl.method)
        _append_jsonl(metrics_path, {"iter": i, **metrics})
    save_checkpoint(run_dir / "policy.ckpt",
                    PolicySnapshot(model.arch, student, "student"))
    save_checkpoint(run_dir / "rm_online.ckpt",
                    PolicySnapshot(model.arch, rm, "reward_model"))
    return run_dir / "policy.ckpt"


# ---------------------------------------------------------------------------
# evaluations
# ---------------------------------------------------------------------------

def _load_eval_models(run_dir: Path):
    sft = load_checkpoint(_require(run_dir, "sft.ckpt", "sft"))
    rm = load_checkpoint(_require(run_dir, "rm.ckpt", "train-rm"))
    return sft, rm


def _write_csv(path: Path, fieldnames: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def run_eval_bon(cfg: ExperimentConfig) -> dict:
    run_dir = Path(cfg.out)
    sft, rm = _load_eval_models(run_dir)
    env = build_env(cfg)
    model = PolicyModel(sft.arch)
    rng = stage_rng(cfg.seed, "eval-bon")
    prompts = [env.sample_prompt(rng) for _ in range(cfg.eval.num_prompts)]
    beta = cfg.rm.effective_beta()
    mode = cfg.rm.score_mode()
    results, rows = {}, []
    for n in cfg.eval.bon_n:
        acc, records = evals.bon_rerank(model, rm, sft, prompts, sft.params, n,
                                        rng, beta, mode)
        results[f"acc@{n}"] = acc
        for i, rec in enumerate(records):
            rows.append({"n": n, "case": i, **rec})
    _write_csv(run_dir / "reports" / "bon.csv",
               ["n", "case", "pick", "outcome", "any_correct"], rows)
    payload = {"results": results, "num_prompts": cfg.eval.num_prompts,
               "rm_method": cfg.rm.method, "score_mode": mode, "seed": cfg.seed}
    _update_summary(run_dir, "bon", payload)
    return payload


def run_eval_steps(cfg: ExperimentConfig) -> dict:
    run_dir = Path(cfg.out)
    sft, rm = _load_eval_models(run_dir)
    env = build_env(cfg)
    if env.name != "bitbudget":
        raise ContractError("eval-steps needs env.name = bitbudget "
                            "(first-error labels require unrecoverable errors)")
    model = PolicyModel(sft.arch)
    rng = stage_rng(cfg.seed, "eval-steps")
    cases = [make_localization_case(env, env.teacher, rng, cfg.eval.step_size,
                                    cfg.eval.p_err)
             for _ in range(cfg.eval.localization_cases)]
    write_localization_corpus(cases, run_dir / "localization_cases.jsonl")
    beta = cfg.rm.effective_beta()
    payload = {"rm_method": cfg.rm.method, "protocol": cfg.eval.protocol,
               "threshold": cfg.eval.threshold, "cases": len(cases), "seed": cfg.seed}
    rows = None
    for protocol in ("process", "prefix"):
        f1, records = evals.evaluate_localization(
            model, rm, sft, cases, beta, cfg.eval.threshold, protocol)
        payload[f"f1_{protocol}"] = f1
        if protocol == cfg.eval.protocol:
            payload["f1"] = f1
            rows = [{"case": i, **r} for i, r in enumerate(records)]
    _write_csv(run_dir / "reports" / "steps.csv",
               ["case", "label", "prediction"], rows)
    _update_summary(run_dir, "steps", payload)
    return payload


def run_eval_td(cfg: ExperimentConfig) -> dict:
    run_dir = Path(cfg.out)
    sft, rm = _load_eval_models(run_dir)
    env = build_env(cfg)
    model = PolicyModel(sft.arch)
    rng = stage_rng(cfg.seed, "eval-td")
    report = evals.td_fidelity(model, rm, sft, env, cfg.eval.td_branches, rng,
                               cfg.rm.effective_beta(), cfg.eval.td_top_k,
                               cfg.eval.rollouts_per_branch)
    payload = {k: getattr(report, k) for k in (
        "n_branches", "pearson_td_mc", "pearson_degenerate", "auc_value_mc",
        "auc_abs_value_mc", "pearson_td_exact", "auc_value_exact",
        "auc_abs_value_exact")}
    payload["seed"] = cfg.seed
    _write_csv(run_dir / "reports" / "td.csv", list(payload), [payload])
    _update_summary(run_dir, "td", payload)
    return payload
