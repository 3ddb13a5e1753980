"""Shared test utilities: finite-difference probes and forced-probability policies."""

import numpy as np

from prefixrl import autodiff as ad
from prefixrl import policy as pol


def fd_probe(builder, params, n_entries=20, h=1e-4, seed=0, rtol=1e-4):
    """Check eval_with_grad against central finite differences on random entries."""
    value, grad = ad.eval_with_grad(builder, params)
    flat, g = params.flat(), grad.flat()
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
    worst = 0.0
    for i in idx:
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        fd = (ad.eval_with_grad(builder, params.replace_flat(up))[0]
              - ad.eval_with_grad(builder, params.replace_flat(down))[0]) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / (1.0 + abs(fd)))
    assert worst <= rtol, f"gradient mismatch: rel err {worst:.2e} > {rtol}"
    return value


def forced_params(arch: pol.PolicyArch, probs) -> ad.ParamVector:
    """Zero weights with out_b = log(probs): every state emits `probs` exactly."""
    probs = np.asarray(probs, dtype=np.float64)
    assert probs.shape == (arch.vocab,)
    params = pol.zero_params(arch)
    params.segments["out_b"][:] = np.log(probs)
    return params


def forced_snapshot(arch, probs, role="reward_model") -> pol.PolicySnapshot:
    return pol.PolicySnapshot(arch, forced_params(arch, probs), role)
