"""Experiment configuration: dataclasses, JSON round-trip, validation, and
the paper-derived defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .trainer import RL_METHODS, PpoConfig

RM_METHODS = ("ipvrm", "ipvrm_late", "ipvrm_early", "implicit_prm", "dpo")
PROTOCOLS = ("process", "prefix")


@dataclass
class EnvConfig:
    name: str = "modsum"
    modulus: int = 7
    vocab: int = 8
    horizon: int = 6
    teacher_skew: float = 1.2
    count_min: int = 2
    count_max: int = 8


@dataclass
class PolicyConfig:
    context: int = 4
    embed_dim: int = 8
    hidden_dim: int = 32


@dataclass
class SftConfig:
    num_traces: int = 2000
    steps: int = 600
    batch_size: int = 32
    lr: float = 0.3


@dataclass
class RmDataConfig:
    num_prompts: int = 2000
    rollouts_per_prompt: int = 5
    temperature: float = 1.0


@dataclass
class RmConfig:
    method: str = "ipvrm"
    beta: float = 10.0          # prefix-value methods
    margin: float = 5.0
    baseline_beta: float = 0.05  # sequence-BCE / preference baselines
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.0

    def effective_beta(self) -> float:
        return self.beta if self.method.startswith("ipvrm") else self.baseline_beta

    def score_mode(self) -> str:
        """Sequence score for reranking: length-normalized for prefix-value
        models, raw final value for the sequence-level baselines."""
        return "mean" if self.method.startswith("ipvrm") else "sum"


@dataclass
class OnlineFlags:
    adb: bool = True
    dlw: bool = True
    frozen: bool = False

    @property
    def naive(self) -> bool:
        return not self.frozen and not self.adb and not self.dlw


@dataclass
class RlConfig:
    method: str = "distrl"
    iterations: int = 200
    rm_lr: float = 1e-3
    ppo: PpoConfig = field(default_factory=PpoConfig)


@dataclass
class EvalConfig:
    bon_n: list = field(default_factory=lambda: [4, 16, 64])
    num_prompts: int = 500
    localization_cases: int = 500
    step_size: int = 2
    p_err: float = 0.5
    protocol: str = "process"
    threshold: float = 0.5
    td_branches: int = 2000
    td_top_k: int = 5
    rollouts_per_branch: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 42
    out: str = "runs/default"
    workers: int = 1
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    rm_data: RmDataConfig = field(default_factory=RmDataConfig)
    rm: RmConfig = field(default_factory=RmConfig)
    online: OnlineFlags = field(default_factory=OnlineFlags)
    rl: RlConfig = field(default_factory=RlConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        rl = dict(d.get("rl", {}))
        if "ppo" in rl:
            rl["ppo"] = PpoConfig(**rl["ppo"])
        return cls(
            seed=d.get("seed", 42),
            out=d.get("out", "runs/default"),
            workers=d.get("workers", 1),
            env=EnvConfig(**d.get("env", {})),
            policy=PolicyConfig(**d.get("policy", {})),
            sft=SftConfig(**d.get("sft", {})),
            rm_data=RmDataConfig(**d.get("rm_data", {})),
            rm=RmConfig(**d.get("rm", {})),
            online=OnlineFlags(**d.get("online", {})),
            rl=RlConfig(**rl),
            eval=EvalConfig(**d.get("eval", {})),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    # -- validation ------------------------------------------------------------
    def validate(self) -> None:
        problems = []
        if self.env.name not in ("modsum", "bitbudget"):
            problems.append(f"env.name {self.env.name!r} not in (modsum, bitbudget)")
        if self.env.name == "modsum" and self.env.vocab < self.env.modulus:
            problems.append("env.vocab must be >= env.modulus for modsum")
        if self.env.horizon < 1:
            problems.append("env.horizon must be >= 1")
        if (self.env.name == "bitbudget"
                and not 0 <= self.env.count_min <= self.env.count_max <= self.env.horizon):
            problems.append("bitbudget count range must satisfy 0 <= min <= max <= horizon")
        if self.rm.method not in RM_METHODS:
            problems.append(f"rm.method {self.rm.method!r} not in {RM_METHODS}")
        if self.rl.method not in RL_METHODS:
            problems.append(f"rl.method {self.rl.method!r} not in {RL_METHODS}")
        if self.eval.protocol not in PROTOCOLS:
            problems.append(f"eval.protocol {self.eval.protocol!r} not in {PROTOCOLS}")
        if not 0 < self.eval.threshold < 1:
            problems.append("eval.threshold must lie in (0, 1)")
        if not 0 <= self.eval.p_err <= 1:
            problems.append("eval.p_err must lie in [0, 1]")
        if self.eval.step_size < 1:
            problems.append("eval.step_size must be >= 1")
        for name in ("beta", "baseline_beta"):
            if getattr(self.rm, name) <= 0:
                problems.append(f"rm.{name} must be positive")
        if self.rm.margin < 0:
            problems.append("rm.margin must be non-negative")
        for section, attr in (("sft", "num_traces"), ("sft", "steps"),
                              ("sft", "batch_size"), ("rm_data", "num_prompts"),
                              ("rm_data", "rollouts_per_prompt"), ("rm", "epochs"),
                              ("rm", "batch_size"), ("rl", "iterations")):
            if getattr(getattr(self, section), attr) < 1:
                problems.append(f"{section}.{attr} must be >= 1")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        problems.extend(f"rl.ppo: {p}" for p in self.rl.ppo.validate())
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def defaults() -> ExperimentConfig:
    """Paper-derived defaults: beta 10 and margin 5 for the prefix-value
    objective, beta 0.05 for the sequence baselines, p_min 0.1, alpha 0.1,
    clip bounds 0.20/0.28, gamma 1, four rollouts per prompt, oversampling
    factor 2, sampling temperature 1, seed 42."""
    return ExperimentConfig()
