"""Synthetic reasoning environment and the full RAPO training loop.

A prompt's "reasoning" is a token sequence over a few content tokens and
three sentinels: ANS (the next token is an answer), VERIFY (a reflection
step) and STOP. The policy is a table of logits indexed by
prompt and position bucket, plus one answer state per prompt entered right
after ANS. Rewards go through the
real annotation and reward code, so a rollout that answers early and stops
earns more than one that keeps verifying.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from rapo.batching import (
    BatchSpec,
    Decision,
    EmptyBatchError,
    RepetitionMonitor,
    TruncationConfig,
    ads_resample,
    filter_groups,
    oversample_filter,
)
from rapo.policy_opt import (
    ClipConfig,
    GateConfig,
    TabularSoftmaxPolicy,
    TokenBatch,
    group_advantage,
    loss_audit,
    policy_gradient,
)
from rapo.rewards import PenaltyConfig, composite_reward, final_correct
from rapo.answers import reasoning_body
from rapo.trajectory import (
    AnnotatedTrace,
    Finish,
    Prompt,
    Rollout,
    RolloutGroup,
    RuleAnnotator,
    TaskKind,
    annotate,
)

log = logging.getLogger(__name__)

ANSWER_SENTINEL = "ANS:"
VERIFY_SENTINEL = "VERIFY"

# prior logit bonus on the correct answer token after ANS
DIFFICULTY_BONUS = {"easy": 2.0, "medium": 0.0, "hard": -1.5}
DIFFICULTIES = ("trivial", "easy", "medium", "hard", "impossible")


@dataclass(frozen=True)
class EnvConfig:
    n_prompts: int = 64
    n_content: int = 6
    max_len: int = 24
    position_buckets: int = 8
    difficulty: tuple[str, ...] = ("easy", "medium")
    # initial logits for the reasoning states
    content_logit: float = -1.0
    answer_logit: float = 0.5
    verify_logit: float = 1.5
    stop_logit: float = -0.3

    def __post_init__(self):
        object.__setattr__(self, "difficulty", tuple(self.difficulty))
        if self.n_prompts < 1 or self.n_content < 2 or self.max_len < 2:
            raise ValueError("environment too small")
        if self.position_buckets < 1:
            raise ValueError("position_buckets must be positive")
        bad = set(self.difficulty) - set(DIFFICULTIES)
        if bad or not self.difficulty:
            raise ValueError(f"unknown difficulty levels {sorted(bad)}")


class ToyEnv:
    """Prompts with one correct content token each; difficulty shapes the prior."""

    def __init__(self, cfg: EnvConfig = EnvConfig(), seed: int = 0):
        self.cfg = cfg
        C = cfg.n_content
        self.ANS, self.VERIFY, self.STOP = C, C + 1, C + 2
        self.n_tokens = C + 3
        rng = np.random.default_rng(seed)
        self.answers = rng.integers(0, C, size=cfg.n_prompts)
        self.levels = [cfg.difficulty[i % len(cfg.difficulty)] for i in range(cfg.n_prompts)]
        self.prompts = [
            Prompt(id=f"p{i:03d}", text=f"toy question {i}",
                   ground_truth="none" if lvl == "impossible" else self.word(int(a)),
                   task_kind=TaskKind.THINKING_MATH_SCIENCE, length_group=cfg.max_len)
            for i, (a, lvl) in enumerate(zip(self.answers, self.levels))
        ]
        self.annotator = RuleAnnotator(ANSWER_SENTINEL, VERIFY_SENTINEL)

    @property
    def states_per_prompt(self) -> int:
        return self.cfg.position_buckets + 2

    @property
    def n_states(self) -> int:
        return self.cfg.n_prompts * self.states_per_prompt

    def state(self, prompt: int, position: int, after_answer: bool) -> int:
        """Thinking states are bucketed by position; the answer slot has one state."""
        buckets = self.cfg.position_buckets
        local = buckets + 1 if after_answer else min(position, buckets)
        return prompt * self.states_per_prompt + local

    def word(self, tok: int) -> str:
        if tok < self.cfg.n_content:
            return f"t{tok}"
        return {self.ANS: ANSWER_SENTINEL, self.VERIFY: VERIFY_SENTINEL, self.STOP: ""}[tok]

    def initial_logits(self) -> np.ndarray:
        cfg = self.cfg
        C = cfg.n_content
        table = np.zeros((self.n_states, self.n_tokens))
        for p, lvl in enumerate(self.levels):
            think = [self.state(p, pos, False) for pos in range(cfg.position_buckets + 1)]
            after = self.state(p, 0, True)
            if lvl == "trivial":
                # ANS, answer, STOP with overwhelming probability
                table[think] = -30.0
                table[think[0], self.ANS] = 30.0
                table[think[1:], self.STOP] = 30.0
                table[after] = -30.0
                table[after, self.answers[p]] = 30.0
                continue
            table[np.ix_(think, range(C))] = cfg.content_logit
            table[think, self.ANS] = cfg.answer_logit
            table[think, self.VERIFY] = cfg.verify_logit
            table[think, self.STOP] = cfg.stop_logit
            table[after, C:] = -4.0
            table[after, self.answers[p]] += DIFFICULTY_BONUS.get(lvl, 0.0)
        return table

    def decode(self, tokens: Sequence[int], stopped: bool) -> str:
        words: list[str] = []
        glue = False
        for tok in tokens:
            if tok == self.STOP:
                break
            w = self.word(tok)
            if glue and words:
                words[-1] += w
            else:
                words.append(w)
            glue = tok == self.ANS
        body = " ".join(words)
        if not stopped:
            return "<think>" + body
        answers = [tokens[i + 1] for i in range(len(tokens) - 1)
                   if tokens[i] == self.ANS and tokens[i + 1] < self.cfg.n_content]
        final = ANSWER_SENTINEL + self.word(answers[-1]) if answers else ""
        return "<think>" + body + "</think>" + final + "<|end_of_sentence|>"


def sample_rollout(env: ToyEnv, cum_probs: np.ndarray, entropies: np.ndarray,
                   log_probs: np.ndarray, prompt_index: int, rng: np.random.Generator,
                   truncation: TruncationConfig) -> Rollout:
    monitor = RepetitionMonitor(truncation)
    tokens, states, lp, ent = [], [], [], []
    finish = Finish.LENGTH_CAPPED
    after = False
    for pos in range(env.cfg.max_len):
        s = env.state(prompt_index, pos, after)
        tok = int(np.searchsorted(cum_probs[s], rng.random() * cum_probs[s, -1], side="right"))
        tok = min(tok, env.n_tokens - 1)
        tokens.append(tok)
        states.append(s)
        lp.append(float(log_probs[s, tok]))
        ent.append(float(entropies[s]))
        if tok == env.STOP:
            finish = Finish.STOPPED
            break
        if monitor.append(tok) is Decision.TRUNCATE:
            finish = Finish.REPETITION_TRUNCATED
            break
        after = tok == env.ANS
    text = env.decode(tokens, finish is Finish.STOPPED)
    return Rollout(env.prompts[prompt_index].id, tuple(tokens), text, tuple(lp), tuple(lp),
                   tuple(ent), finish, tuple(states))


class _PolicyTables:
    """Sampling tables for a frozen snapshot of the policy."""

    def __init__(self, policy: TabularSoftmaxPolicy):
        self.log_probs = policy.log_probs()
        self.cum = np.cumsum(np.exp(self.log_probs), axis=1)
        self.entropy = policy.entropy()


def sample_group(env: ToyEnv, policy: TabularSoftmaxPolicy | _PolicyTables, prompt_index: int,
                 G: int, truncation: TruncationConfig, rng: np.random.Generator) -> RolloutGroup:
    """G independent rollouts under the (frozen) policy, correctness from the final answer."""
    tables = policy if isinstance(policy, _PolicyTables) else _PolicyTables(policy)
    prompt = env.prompts[prompt_index]
    rollouts = tuple(sample_rollout(env, tables.cum, tables.entropy, tables.log_probs,
                                    prompt_index, rng, truncation) for _ in range(G))
    correct = tuple(bool(final_correct(r.text, prompt.ground_truth)) for r in rollouts)
    return RolloutGroup(prompt, rollouts, correct)


@dataclass
class ScoredGroup:
    group: RolloutGroup
    traces: list[AnnotatedTrace]
    totals: np.ndarray
    advantages: np.ndarray

    @property
    def pass_rate(self) -> float:
        return self.group.pass_rate


def score_group(env: ToyEnv, group: RolloutGroup, penalty: PenaltyConfig) -> ScoredGroup:
    traces = [annotate(reasoning_body(r.text), group.prompt.ground_truth, env.annotator)
              for r in group.rollouts]
    rewards = composite_reward(group, traces, penalty)
    totals = np.array([rb.total for rb in rewards])
    return ScoredGroup(group, traces, totals, group_advantage(totals))


@dataclass(frozen=True)
class TrainConfig:
    batch: BatchSpec = BatchSpec(gbs=32, mbs=8, G=8)
    clip: ClipConfig = ClipConfig()
    gate: GateConfig = GateConfig()
    penalty: PenaltyConfig = PenaltyConfig()
    truncation: TruncationConfig = TruncationConfig(check_every=8, subseq_len=3, threshold=3)
    env: EnvConfig = EnvConfig()
    learning_rate: float = 250.0
    steps: int = 500
    seed: int = 7
    sampler: str = "ads"  # or "oversample"
    oversample_factor: int = 3
    max_redraws: int = 3
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.sampler not in ("ads", "oversample"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.batch.gbs > self.env.n_prompts:
            raise ValueError("gbs cannot exceed the number of prompts")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["penalty"]["enabled"] = sorted(d["penalty"]["enabled"])
        d["env"]["difficulty"] = list(d["env"]["difficulty"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        nested = {"batch": BatchSpec, "clip": ClipConfig, "gate": GateConfig,
                  "penalty": PenaltyConfig, "truncation": TruncationConfig, "env": EnvConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                if key == "penalty" and "enabled" in value:
                    value = {**value, "enabled": frozenset(value["enabled"])}
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


class PromptStream:
    """Endless stream of prompt indices: a fresh permutation per epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self._buf: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self._buf:
                self._buf = [int(i) for i in self.rng.permutation(self.n)]
            out.append(self._buf.pop(0))
        return out


@dataclass
class TrainResult:
    metrics: list[dict]
    policy: TabularSoftmaxPolicy
    initial_policy: TabularSoftmaxPolicy
    status: str = "completed"
    rollouts_generated: int = 0
    groups_trained: int = 0
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)


def _draw_batch(cfg, env, tables, stream, rng):
    n = cfg.batch.gbs * (cfg.oversample_factor if cfg.sampler == "oversample" else 1)
    return [score_group(env, sample_group(env, tables, p, cfg.batch.G, cfg.truncation, rng),
                        cfg.penalty)
            for p in stream.take(n)]


def _batch_metrics(scored: Sequence[ScoredGroup]) -> dict:
    rollouts = [r for sg in scored for r in sg.group.rollouts]
    correct = [c for sg in scored for c in sg.group.correct]
    verify = [t.verify_count for sg in scored for t in sg.traces]
    lengths = np.array([len(r) for r in rollouts])
    acc = np.array(correct, dtype=float)
    return {
        "mean_reward": float(np.mean(np.concatenate([sg.totals for sg in scored]))),
        "accuracy": float(acc.mean()),
        "mean_verify_count": float(np.mean(verify)),
        "mean_tokens": float(lengths.mean()),
        "mean_tokens_correct": float(lengths[acc == 1].mean()) if acc.any() else None,
    }


def run_training(cfg: TrainConfig, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Sample, score, filter, resample and take gradient steps for ``cfg.steps`` steps."""
    env = ToyEnv(cfg.env, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    stream = PromptStream(cfg.env.n_prompts, rng)
    policy = TabularSoftmaxPolicy(env.initial_logits())
    result = TrainResult([], policy, policy.copy())

    for step in range(cfg.steps):
        tables = _PolicyTables(policy)  # old-policy snapshot for the whole step
        drawn: list[ScoredGroup] = []
        trained = None
        for _ in range(cfg.max_redraws):
            batch = _draw_batch(cfg, env, tables, stream, rng)
            drawn.extend(batch)
            result.rollouts_generated += len(batch) * cfg.batch.G
            if cfg.sampler == "ads":
                try:
                    rb = ads_resample(filter_groups(batch)[0], cfg.batch.mbs)
                except EmptyBatchError:
                    continue
                trained, n_dup = list(rb.groups), rb.n_duplicates
            else:
                kept, _ = oversample_filter(batch, cfg.batch.gbs)
                if not kept:
                    continue
                trained, n_dup = kept, 0
            break
        if trained is None:
            result.status = "saturated"
            log.info("step %d: every drawn prompt is saturated, stopping", step)
            break

        audits = []
        grad_norms = []
        for i in range(0, len(trained), cfg.batch.mbs):
            mini = trained[i:i + cfg.batch.mbs]
            grad = np.zeros_like(policy.logits)
            for sg in mini:
                new = [policy.token_logprobs(r.states, r.tokens) for r in sg.group.rollouts]
                tb = TokenBatch.from_rollouts(sg.group.rollouts, sg.advantages, cfg.gate, new)
                audits.append(loss_audit(tb, cfg.clip))
                grad += policy_gradient(policy, sg.group.rollouts, sg.advantages,
                                        cfg.clip, cfg.gate)
            grad /= len(mini)
            grad_norms.append(float(np.linalg.norm(grad)))
            policy.logits += cfg.learning_rate * grad
        result.groups_trained += len(trained)

        row = {"step": step, **_batch_metrics(drawn)}
        row.update({
            "J": float(np.mean([a["J"] for a in audits])),
            "grad_norm": float(np.mean(grad_norms)),
            "gated_fraction": float(np.mean([a["gated_fraction"] for a in audits])),
            "mean_ratio": float(np.mean([a["mean_ratio"] for a in audits])),
            "clip_saturation_fraction": float(np.mean(
                [a["clip_saturation_fraction"] for a in audits])),
            "kept_groups": len(trained) - n_dup,
            "duplicated_groups": n_dup,
            "trained_groups": len(trained),
            "rollouts_generated": result.rollouts_generated,
        })
        result.metrics.append(row)
        if on_step is not None:
            on_step(row)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            result.checkpoints.append((step + 1, policy.logits.copy()))
    return result


def iter_metrics(cfg: TrainConfig) -> Iterator[dict]:
    yield from run_training(cfg).metrics


def compare_samplers(cfg: TrainConfig) -> dict:
    """Run the ADS arm and the oversample-and-discard arm with identical settings."""
    report = {}
    for arm in ("ads", "oversample"):
        res = run_training(dataclasses.replace(cfg, sampler=arm))
        per_group = (res.rollouts_generated / res.groups_trained
                     if res.groups_trained else None)
        report[arm] = {
            "status": res.status,
            "steps_run": len(res.metrics),
            "rollouts_generated": res.rollouts_generated,
            "groups_trained": res.groups_trained,
            "rollouts_per_trained_group": per_group,
            "final_accuracy": res.metrics[-1]["accuracy"] if res.metrics else None,
        }
    return report
