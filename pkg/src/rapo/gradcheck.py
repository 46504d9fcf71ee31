"""Finite-difference check of the analytic policy gradient on random tiny problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rapo.policy_opt import (
    ClipConfig,
    GateConfig,
    TabularSoftmaxPolicy,
    group_advantage,
    policy_gradient,
    rapo_objective,
)
from rapo.trajectory import Rollout

FD_STEP = 1e-6
# ratios closer than this to a clip edge could flip branches under the FD step
_EDGE_MARGIN = 1e-3


@dataclass
class GradProblem:
    policy: TabularSoftmaxPolicy
    rollouts: list[Rollout]
    advantages: np.ndarray


def random_problem(rng: np.random.Generator, clip: ClipConfig = ClipConfig(),
                   max_states: int = 20, max_tokens: int = 10, G: int = 4,
                   max_len: int = 12, drift: float = 0.3) -> GradProblem:
    """A random policy plus rollouts drawn from a perturbed "old" copy of it."""
    while True:
        S = int(rng.integers(2, max_states + 1))
        V = int(rng.integers(2, max_tokens + 1))
        logits = rng.normal(size=(S, V))
        old = TabularSoftmaxPolicy(logits + rng.normal(scale=drift, size=(S, V)))
        old_lp = old.log_probs()
        old_h = old.entropy()
        new_lp = TabularSoftmaxPolicy(logits).log_probs()
        rollouts = []
        ok = True
        for _ in range(G):
            n = int(rng.integers(1, max_len + 1))
            states = rng.integers(0, S, size=n)
            tokens = np.array([rng.choice(V, p=np.exp(old_lp[s])) for s in states])
            lp = old_lp[states, tokens]
            r = np.exp(new_lp[states, tokens] - lp)
            if np.any(np.abs(r - clip.low) < _EDGE_MARGIN) or np.any(np.abs(r - clip.high) < _EDGE_MARGIN):
                ok = False
                break
            rollouts.append(Rollout("q", tuple(int(t) for t in tokens), "", tuple(lp), tuple(lp),
                                    tuple(old_h[states]), states=tuple(int(s) for s in states)))
        if not ok:
            continue
        adv = group_advantage(rng.normal(size=G))
        if np.all(adv == 0):
            continue
        return GradProblem(TabularSoftmaxPolicy(logits), rollouts, adv)


def fd_gradient(problem: GradProblem, clip: ClipConfig, gate: GateConfig,
                step: float = FD_STEP) -> np.ndarray:
    pol = problem.policy.copy()
    flat = pol.logits.reshape(-1)
    g = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = rapo_objective(pol, problem.rollouts, problem.advantages, clip, gate)
        flat[i] = orig - step
        down = rapo_objective(pol, problem.rollouts, problem.advantages, clip, gate)
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return g.reshape(pol.logits.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entry-wise discrepancy, relative to the larger gradient's largest entry."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(seed: int, trials: int = 100, clip: ClipConfig = ClipConfig(),
                    gate: GateConfig = GateConfig()) -> list[float]:
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        prob = random_problem(rng, clip)
        analytic = policy_gradient(prob.policy, prob.rollouts, prob.advantages, clip, gate)
        errors.append(relative_error(analytic, fd_gradient(prob, clip, gate)))
    return errors
