"""Group advantages, entropy gating, the clipped policy-gradient term and its gradient.

The objective for one rollout group is

    J = sum_i sum_t gate[i,t] * PG(r[i,t], A[i]) / sum_i |o_i|

where PG uses only the clipped ratio for non-positive advantages and the
usual PPO ``min`` otherwise. Gated-out tokens still count in the
denominator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from rapo.trajectory import Rollout


class InvalidBatchError(ValueError):
    pass


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28
    optimized: bool = True  # False gives the plain PPO min() for every advantage sign

    def __post_init__(self):
        if self.eps_low <= 0 or self.eps_high <= 0:
            raise ValueError("clip epsilons must be positive")
        if 1 - self.eps_low <= 0:
            raise ValueError("eps_low must be below 1")

    @property
    def low(self) -> float:
        return 1.0 - self.eps_low

    @property
    def high(self) -> float:
        return 1.0 + self.eps_high


@dataclass(frozen=True)
class GateConfig:
    rho: float = 0.2

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")


def group_advantage(rewards: Sequence[float]) -> np.ndarray:
    """(R - mean) / std with the population std; all zeros for a constant group."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two rewards")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def gate_count(rho: float, length: int) -> int:
    # Fraction avoids ceil(0.2 * 15) == 4 from float rounding
    return max(1, math.ceil(Fraction(rho).limit_denominator(10**9) * length))


def entropy_gate(entropies: Sequence[float], cfg: GateConfig = GateConfig()
                 ) -> tuple[float, np.ndarray]:
    """Select the ``ceil(rho * len)`` highest-entropy tokens; earlier tokens win ties."""
    h = np.asarray(entropies, dtype=float)
    if h.size < 1:
        raise ValueError("rollout must have at least one token")
    m = gate_count(cfg.rho, h.size)
    order = np.lexsort((np.arange(h.size), -h))
    chosen = order[:m]
    mask = np.zeros(h.size, dtype=bool)
    mask[chosen] = True
    return float(h[chosen[-1]]), mask


def clip_ratio(r, cfg: ClipConfig):
    return np.clip(r, cfg.low, cfg.high)


def pg_term(r, adv, cfg: ClipConfig = ClipConfig()):
    """Per-token policy-gradient term; works elementwise on arrays."""
    r = np.asarray(r, dtype=float)
    adv = np.asarray(adv, dtype=float)
    clipped = clip_ratio(r, cfg) * adv
    plain = np.minimum(r * adv, clipped)
    out = np.where(adv <= 0, clipped, plain) if cfg.optimized else plain
    return out if out.ndim else float(out)


def vanilla_pg_term(r, adv, cfg: ClipConfig = ClipConfig()):
    return pg_term(r, adv, ClipConfig(cfg.eps_low, cfg.eps_high, optimized=False))


def pg_active(r: np.ndarray, adv: np.ndarray, cfg: ClipConfig) -> np.ndarray:
    """Where the PG term still depends on the ratio (its derivative is adv * dr)."""
    below_high = r < cfg.high
    if cfg.optimized:
        return np.where(adv <= 0, (r > cfg.low) & below_high, below_high)
    return np.where(adv <= 0, r > cfg.low, below_high)


@dataclass
class TokenBatch:
    """Per-rollout token arrays for one normalization unit (a rollout group)."""

    ratios: list[np.ndarray]
    advantages: np.ndarray
    entropies: list[np.ndarray]
    gate_masks: list[np.ndarray]

    def __post_init__(self):
        if not self.ratios:
            raise InvalidBatchError("empty batch")
        if not (len(self.ratios) == len(self.advantages) == len(self.entropies)
                == len(self.gate_masks)):
            raise InvalidBatchError("per-rollout fields disagree in length")
        for r, h, g in zip(self.ratios, self.entropies, self.gate_masks):
            if not (r.shape == h.shape == g.shape) or r.size < 1:
                raise InvalidBatchError("token arrays must share a non-empty shape")
            if np.any(r <= 0):
                raise InvalidBatchError("ratios must be positive")

    @classmethod
    def from_rollouts(cls, rollouts: Sequence[Rollout], advantages: Sequence[float],
                      gate: GateConfig = GateConfig(),
                      logprob_new: Sequence[np.ndarray] | None = None) -> TokenBatch:
        if not rollouts:
            raise InvalidBatchError("empty batch")
        ratios, ents, masks = [], [], []
        for i, ro in enumerate(rollouts):
            new = np.asarray(ro.logprob_new if logprob_new is None else logprob_new[i], float)
            ratios.append(np.exp(new - np.asarray(ro.logprob_old, float)))
            h = np.asarray(ro.entropy, float)
            ents.append(h)
            masks.append(entropy_gate(h, gate)[1])
        return cls(ratios, np.asarray(advantages, float), ents, masks)

    @property
    def n_tokens(self) -> int:
        return sum(r.size for r in self.ratios)


def rapo_loss(batch: TokenBatch, clip: ClipConfig = ClipConfig()) -> float:
    total = 0.0
    for r, a, g in zip(batch.ratios, batch.advantages, batch.gate_masks):
        total += float(np.sum(np.where(g, pg_term(r, np.full(r.shape, a), clip), 0.0)))
    return total / batch.n_tokens


def loss_audit(batch: TokenBatch, clip: ClipConfig = ClipConfig()) -> dict:
    r = np.concatenate(batch.ratios)
    g = np.concatenate(batch.gate_masks)
    a = np.concatenate([np.full(x.shape, adv) for x, adv in zip(batch.ratios, batch.advantages)])
    gated = int(g.sum())
    saturated = int(np.sum(g & ~pg_active(r, a, clip) & (a != 0)))
    return {
        "J": rapo_loss(batch, clip),
        "gated_fraction": gated / r.size,
        "mean_ratio": float(r.mean()),
        "clip_saturation_fraction": saturated / gated if gated else 0.0,
    }


class TabularSoftmaxPolicy:
    """Softmax policy over a token vocabulary with one logit row per discrete state."""

    def __init__(self, logits: np.ndarray):
        logits = np.array(logits, dtype=float)
        if logits.ndim != 2:
            raise ValueError("logits must be a (states, tokens) table")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        self.logits = logits

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.logits.shape[1]

    def copy(self) -> TabularSoftmaxPolicy:
        return TabularSoftmaxPolicy(self.logits.copy())

    def log_probs(self, states=None) -> np.ndarray:
        z = self.logits if states is None else self.logits[states]
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def probs(self, states=None) -> np.ndarray:
        return np.exp(self.log_probs(states))

    def entropy(self, states=None) -> np.ndarray:
        lp = self.log_probs(states)
        return -(np.exp(lp) * lp).sum(axis=-1)

    def token_logprobs(self, states: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
        return self.log_probs(np.asarray(states))[np.arange(len(tokens)), np.asarray(tokens)]


def _check_shapes(policy: TabularSoftmaxPolicy, rollouts: Sequence[Rollout]) -> None:
    for ro in rollouts:
        if ro.states is None:
            raise ValueError("rollout has no state trace")
        if max(ro.states) >= policy.n_states or min(ro.states) < 0:
            raise ValueError("rollout state outside the policy table")
        if max(ro.tokens) >= policy.n_tokens or min(ro.tokens) < 0:
            raise ValueError("rollout token outside the policy vocabulary")


def rapo_objective(policy: TabularSoftmaxPolicy, rollouts: Sequence[Rollout],
                   advantages: Sequence[float], clip: ClipConfig = ClipConfig(),
                   gate: GateConfig = GateConfig()) -> float:
    """J for one group, with the new log-probabilities taken from ``policy``."""
    _check_shapes(policy, rollouts)
    new = [policy.token_logprobs(ro.states, ro.tokens) for ro in rollouts]
    return rapo_loss(TokenBatch.from_rollouts(rollouts, advantages, gate, new), clip)


def policy_gradient(policy: TabularSoftmaxPolicy, rollouts: Sequence[Rollout],
                    advantages: Sequence[float], clip: ClipConfig = ClipConfig(),
                    gate: GateConfig = GateConfig()) -> np.ndarray:
    """Analytic dJ/dlogits for one group.

    A token whose term still depends on its ratio contributes
    ``adv * r * (onehot(token) - softmax(state)) / n_tokens`` to its state
    row; clipped or gated-out tokens contribute nothing.
    """
    _check_shapes(policy, rollouts)
    grad = np.zeros_like(policy.logits)
    n_tokens = sum(len(ro) for ro in rollouts)
    for ro, adv in zip(rollouts, advantages):
        states = np.asarray(ro.states)
        tokens = np.asarray(ro.tokens)
        logp = policy.log_probs(states)
        r = np.exp(logp[np.arange(len(tokens)), tokens] - np.asarray(ro.logprob_old))
        mask = entropy_gate(ro.entropy, gate)[1]
        a = np.full(r.shape, float(adv))
        live = mask & pg_active(r, a, clip) & (a != 0)
        if not live.any():
            continue
        coef = (a * r)[live] / n_tokens
        s = states[live]
        g = -np.exp(logp[live]) * coef[:, None]
        g[np.arange(len(s)), tokens[live]] += coef
        np.add.at(grad, s, g)
    return grad

