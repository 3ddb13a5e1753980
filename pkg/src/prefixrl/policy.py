"""Tiny autoregressive softmax policy over environment tokens.

Inputs per state: the prompt's three integer features, the position, and
learned embeddings of the last ``context`` tokens (index 0 is the padding
row; real token i maps to embedding row i+1). One tanh hidden layer feeds
vocabulary logits. The same graph code serves sampling (constant leaves)
and training (parameter leaves).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .envs import EnvState, Prompt, Trajectory, reset, step, verify
from .errors import ContractError

ROLES = ("sft", "behavior", "reference", "reward_model", "student")

_MAGIC = b"PVRM"
_VERSION = 1
_SEGMENTS = ("embedding", "hidden_w", "hidden_b", "out_w", "out_b")


@dataclass(frozen=True)
class PolicyArch:
    context: int = 4
    embed_dim: int = 8
    hidden_dim: int = 32
    vocab: int = 8

    @property
    def input_dim(self) -> int:
        return 4 + self.context * self.embed_dim  # 3 prompt features + position

    def segment_shapes(self) -> dict[str, tuple]:
        return {
            "embedding": (self.vocab + 1, self.embed_dim),
            "hidden_w": (self.input_dim, self.hidden_dim),
            "hidden_b": (self.hidden_dim,),
            "out_w": (self.hidden_dim, self.vocab),
            "out_b": (self.vocab,),
        }


def init_params(arch: PolicyArch, rng: np.random.Generator) -> ParamVector:
    shapes = arch.segment_shapes()
    segs = {
        "embedding": rng.normal(0.0, 0.1, shapes["embedding"]),
        "hidden_w": rng.normal(0.0, 1.0 / np.sqrt(arch.input_dim), shapes["hidden_w"]),
        "hidden_b": np.zeros(shapes["hidden_b"]),
        "out_w": rng.normal(0.0, 1.0 / np.sqrt(arch.hidden_dim), shapes["out_w"]),
        "out_b": np.zeros(shapes["out_b"]),
    }
    return ParamVector(segs)


def zero_params(arch: PolicyArch) -> ParamVector:
    return ParamVector({k: np.zeros(s) for k, s in arch.segment_shapes().items()},
                       check=False)


class PolicyModel:
    """Stateless forward definitions for one architecture."""

    def __init__(self, arch: PolicyArch):
        self.arch = arch

    # -- feature assembly ---------------------------------------------------
    def _check_state(self, state: EnvState) -> None:
        if state.prompt.vocab != self.arch.vocab:
            raise ContractError(
                f"state vocabulary {state.prompt.vocab} != model vocabulary {self.arch.vocab}")

    def state_features(self, states: Sequence[EnvState]) -> np.ndarray:
        feats = np.empty((len(states), 4))
        for i, s in enumerate(states):
            self._check_state(s)
            f = s.prompt.features()
            feats[i, 0] = f[0] / 10.0
            feats[i, 1] = f[1] / 10.0
            feats[i, 2] = f[2]
            feats[i, 3] = s.t / s.prompt.horizon
        return feats

    def context_indices(self, states: Sequence[EnvState]) -> np.ndarray:
        k = self.arch.context
        idx = np.zeros((len(states), k), dtype=np.intp)
        for i, s in enumerate(states):
            recent = s.prefix[-k:]
            for j, tok in enumerate(recent):
                idx[i, k - len(recent) + j] = tok + 1  # 0 is the padding row
        return idx

    # -- graph forward ------------------------------------------------------
    def logits(self, tensors: dict[str, Tensor], states: Sequence[EnvState]) -> Tensor:
        n, k = len(states), self.arch.context
        feats = ad.constant(self.state_features(states))
        ctx = self.context_indices(states)
        emb = ad.gather_rows(tensors["embedding"], ctx.ravel())
        emb = ad.reshape(emb, (n, k * self.arch.embed_dim))
        x = ad.concat([feats, emb], axis=1)
        h = ad.tanh(ad.matmul(x, tensors["hidden_w"]) + tensors["hidden_b"])
        return ad.matmul(h, tensors["out_w"]) + tensors["out_b"]

    def log_prob_rows(self, tensors: dict[str, Tensor], states: Sequence[EnvState]) -> Tensor:
        return ad.log_softmax(self.logits(tensors, states))

    def sequence_log_prob(self, tensors: dict[str, Tensor], trajectory: Trajectory) -> Tensor:
        """log pi(y_t | s_t) for every emitted token, as graph values."""
        rows = self.log_prob_rows(tensors, trajectory.states())
        return ad.take_per_row(rows, np.array(trajectory.tokens))

    # -- numpy conveniences ---------------------------------------------------
    def logits_np(self, params: ParamVector, states: Sequence[EnvState]) -> np.ndarray:
        return self.logits(const_tensors(params), states).data

    def log_prob_rows_np(self, params: ParamVector, states) -> np.ndarray:
        return ad.log_softmax_np(self.logits_np(params, states))

    # -- training -------------------------------------------------------------
    def nll(self, tensors: dict[str, Tensor], batch: Sequence[Trajectory]) -> Tensor:
        states, tokens = [], []
        for traj in batch:
            states.extend(traj.states())
            tokens.extend(traj.tokens)
        rows = self.log_prob_rows(tensors, states)
        return -ad.tmean(ad.take_per_row(rows, np.array(tokens)))

    def sft_update(self, params: ParamVector, batch: Sequence[Trajectory],
                   lr: float) -> ParamVector:
        """One SGD step on mean negative log-likelihood over the batch."""
        if len(batch) == 0:
            raise ContractError("sft_update needs a non-empty batch")
        _, grad = ad.eval_with_grad(lambda lv: self.nll(lv, batch), params)
        return params.axpy(-lr, grad)

    def batch_nll(self, params: ParamVector, batch: Sequence[Trajectory]) -> float:
        return self.nll(const_tensors(params), batch).item()

    # -- sampling -------------------------------------------------------------
    def sample_trajectories(self, params: ParamVector, prompts: Sequence[Prompt],
                            temperature: float, rng: np.random.Generator,
                            greedy: bool = False) -> list[Trajectory]:
        """Lockstep ancestral sampling (all prompts share the fixed horizon).

        Stored log-probs are those of the sampling distribution
        softmax(logits / temperature).
        """
        if not greedy and temperature <= 0:
            raise ContractError("temperature must be positive (or use greedy)")
        horizons = {p.horizon for p in prompts}
        if len(horizons) != 1:
            raise ContractError("lockstep sampling needs a shared horizon")
        tensors = const_tensors(params)
        states = [reset(p) for p in prompts]
        tokens = [[] for _ in prompts]
        logps = [[] for _ in prompts]
        for _ in range(horizons.pop()):
            raw = self.logits(tensors, states).data
            if greedy:
                chosen = np.argmax(raw, axis=1)
                lp = np.zeros(len(states))
            else:
                logp_rows = ad.log_softmax_np(raw / temperature)
                cdf = np.cumsum(np.exp(logp_rows), axis=1)
                u = rng.random(len(states))
                chosen = np.minimum((u[:, None] > cdf).sum(axis=1), self.arch.vocab - 1)
                lp = logp_rows[np.arange(len(states)), chosen]
            for i, tok in enumerate(chosen):
                tokens[i].append(int(tok))
                logps[i].append(lp[i])
                states[i] = step(states[i], int(tok))
        return [Trajectory(p, tuple(tk), np.array(lg), verify(p, tk))
                for p, tk, lg in zip(prompts, tokens, logps)]

    def sample_trajectory(self, params: ParamVector, prompt: Prompt, temperature: float,
                          rng: np.random.Generator, greedy: bool = False) -> Trajectory:
        return self.sample_trajectories(params, [prompt], temperature, rng, greedy)[0]


def const_tensors(params: ParamVector) -> dict[str, Tensor]:
    return {name: ad.constant(arr) for name, arr in params.segments.items()}


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

@dataclass
class PolicySnapshot:
    arch: PolicyArch
    params: ParamVector
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown role {self.role!r}")
        self.params = self.params.copy()

    def tensors(self) -> dict[str, Tensor]:
        return const_tensors(self.params)

    def model(self) -> PolicyModel:
        return PolicyModel(self.arch)


def snapshot(arch: PolicyArch, params: ParamVector, role: str) -> PolicySnapshot:
    return PolicySnapshot(arch, params, role)


def restore(snap: PolicySnapshot) -> ParamVector:
    return snap.params.copy()


class NetDpPolicy:
    """Adapter exposing a network policy to the exact DP oracles."""

    uses_statistic = False

    def __init__(self, model: PolicyModel, params: ParamVector, temperature: float = 1.0):
        self.model = model
        self.params = params
        self.temperature = temperature
        self.context_len = model.arch.context
        self._tensors = const_tensors(params)

    def probs_batch(self, states):
        raw = self.model.logits(self._tensors, states).data
        return np.exp(ad.log_softmax_np(raw / self.temperature))


# ---------------------------------------------------------------------------
# checkpoints: magic, version, role, arch ints, then little-endian float32
# ---------------------------------------------------------------------------

def save_checkpoint(path, snap: PolicySnapshot) -> None:
    a = snap.arch
    header = _MAGIC + struct.pack("<6I", _VERSION, ROLES.index(snap.role),
                                  a.context, a.embed_dim, a.hidden_dim, a.vocab)
    with open(path, "wb") as fh:
        fh.write(header)
        for name in _SEGMENTS:
            fh.write(snap.params.segments[name].astype("<f4").tobytes())


def load_checkpoint(path) -> PolicySnapshot:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ContractError(f"{path}: not a policy checkpoint")
    version, role_idx, context, embed_dim, hidden_dim, vocab = struct.unpack(
        "<6I", blob[4:28])
    if version != _VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    arch = PolicyArch(context, embed_dim, hidden_dim, vocab)
    offset = 28
    segs = {}
    for name, shape in arch.segment_shapes().items():
        count = int(np.prod(shape))
        segs[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                   offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(blob):
        raise ContractError(f"{path}: trailing bytes in checkpoint")
    return PolicySnapshot(arch, ParamVector(segs), ROLES[role_idx])
