"""Reflection inhibition reward, rule-based penalties and the composite reward."""

from __future__ import annotations

import enum
import unicodedata
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from rapo.answers import (
    DEFAULT_ANSWER_PATTERN,
    answer_accuracy,
    extract_answer,
)
from rapo.trajectory import (
    AnnotatedTrace,
    InvalidGroupError,
    RolloutGroup,
    TaskKind,
)

FIXED_BOUNDS = (2, 10)


class BoundsSource(str, enum.Enum):
    FIXED = "fixed"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class ReflectionBounds:
    r_min: int
    r_max: int
    source: BoundsSource = BoundsSource.FIXED

    def __post_init__(self):
        object.__setattr__(self, "source", BoundsSource(self.source))
        if self.r_min < 0 or self.r_max < self.r_min:
            raise ValueError(f"invalid bounds ({self.r_min}, {self.r_max})")
        if self.source is BoundsSource.FIXED and (self.r_min, self.r_max) != FIXED_BOUNDS:
            raise ValueError(f"fixed bounds must be {FIXED_BOUNDS}")

    @property
    def degenerate(self) -> bool:
        return self.r_min == self.r_max


@dataclass(frozen=True)
class PenaltyConfig:
    target_language: str = "en"
    nontarget_threshold: float = 0.20
    ngram_n: int = 13
    unique_ratio_threshold: float = 0.80
    # None means derive from the prompt's length group: (0.8 L, L)
    length_soft_start: int | None = None
    length_hard_cap: int | None = None
    enabled: frozenset[str] = frozenset({"format", "language", "repetition", "length"})

    def __post_init__(self):
        if self.target_language not in ("zh", "en"):
            raise ValueError(f"unsupported target language {self.target_language!r}")
        if not 0 < self.nontarget_threshold < 1:
            raise ValueError("nontarget_threshold must lie in (0, 1)")
        if not 0 < self.unique_ratio_threshold <= 1:
            raise ValueError("unique_ratio_threshold must lie in (0, 1]")
        if self.ngram_n < 1:
            raise ValueError("ngram_n must be positive")
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - {"format", "language", "repetition", "length"}
        if unknown:
            raise ValueError(f"unknown penalties {sorted(unknown)}")
        if (self.length_soft_start is None) != (self.length_hard_cap is None):
            raise ValueError("set both length_soft_start and length_hard_cap or neither")
        if self.length_soft_start is not None and not self.length_soft_start < self.length_hard_cap:
            raise ValueError("length_soft_start must be below length_hard_cap")

    def length_interval(self, length_group: int) -> tuple[float, float]:
        if self.length_soft_start is not None:
            return float(self.length_soft_start), float(self.length_hard_cap)
        return 0.8 * length_group, float(length_group)


@dataclass(frozen=True)
class FormatTemplate:
    """Ordered markers a response must contain exactly once, per mode."""

    thinking: tuple[str, ...] = ("<think>", "</think>", "<|end_of_sentence|>")
    non_thinking: tuple[str, ...] = ("<|end_of_sentence|>",)

    def markers(self, mode: str) -> tuple[str, ...]:
        if mode == "thinking":
            return self.thinking
        if mode == "non_thinking":
            return self.non_thinking
        raise ValueError(f"unknown mode {mode!r}")


@dataclass
class RewardBreakdown:
    r_ans: int = 0
    r_ver: float = 0.0
    r_acc: int = 0
    penalties: dict = field(default_factory=lambda: {
        "format": 0, "language": 0, "repetition": 0, "length": 0.0})
    base: float | None = None

    @property
    def r_reflect(self) -> float:
        return self.r_ans + self.r_ver + self.r_acc

    @property
    def total(self) -> float:
        base = self.r_reflect if self.base is None else self.base
        return base + sum(self.penalties.values())

    def to_record(self) -> dict:
        return {
            "r_ans": self.r_ans,
            "r_ver": self.r_ver,
            "r_acc": self.r_acc,
            "r_reflect": self.r_reflect,
            "penalties": {k: (int(v) if k != "length" else float(v))
                          for k, v in self.penalties.items()},
            "total": self.total,
        }


class GenerativeScorer(Protocol):
    """Open-ended response scorer returning a score in [1, 10]."""

    def __call__(self, prompt: str, response: str) -> float: ...


class Verifier(Protocol):
    """Task-specific correctness check (code execution, SQL, ...) returning 0 or 1."""

    def __call__(self, prompt, response: str) -> int: ...


def reflection_bounds(pass_rate: float, group_verify_counts: Sequence[int]) -> ReflectionBounds:
    if not group_verify_counts:
        raise ValueError("group_verify_counts must be non-empty")
    if pass_rate >= 0.5:
        return ReflectionBounds(*FIXED_BOUNDS, BoundsSource.FIXED)
    return ReflectionBounds(min(group_verify_counts), max(group_verify_counts), BoundsSource.DYNAMIC)


def r_ver(v: int, bounds: ReflectionBounds) -> float:
    """Reflection-count score: 1 up to r_min, linear down to 0 at r_max."""
    if v <= bounds.r_min:
        return 1.0
    if v > bounds.r_max or bounds.degenerate:
        return 0.0
    return 1.0 - (v - bounds.r_min) / (bounds.r_max - bounds.r_min)


def reflect_reward(trace: AnnotatedTrace | None, final_correct: int,
                   bounds: ReflectionBounds) -> RewardBreakdown:
    """Reflection fields of the reward; ``trace=None`` means annotation was unavailable."""
    if trace is None:
        return RewardBreakdown(r_ans=0, r_ver=0.0, r_acc=int(bool(final_correct)))
    return RewardBreakdown(
        r_ans=int(trace.has_first_answer),
        r_ver=r_ver(trace.verify_count, bounds),
        r_acc=int(bool(final_correct)),
    )


def format_penalty(text: str, mode: str, template: FormatTemplate = FormatTemplate()) -> int:
    pos = -1
    for marker in template.markers(mode):
        if text.count(marker) != 1:
            return -1
        at = text.find(marker)
        if at < pos:
            return -1
        pos = at + len(marker)
    return 0


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (0x4E00 <= cp <= 0x9FFF or 0x3400 <= cp <= 0x4DBF or 0x20000 <= cp <= 0x2EBEF
            or 0xF900 <= cp <= 0xFAFF)


def _char_class(ch: str) -> str | None:
    """'zh', 'en', 'other' for letters; None for ignorable characters."""
    if _is_cjk(ch):
        return "zh"
    if not ch.isalpha():
        return None
    if ch.isascii() or "LATIN" in unicodedata.name(ch, ""):
        return "en"
    return "other"


def nontarget_fraction(text: str, target_language: str) -> float | None:
    target = nontarget = 0
    for ch in text:
        cls = _char_class(ch)
        if cls is None:
            continue
        if cls == target_language:
            target += 1
        else:
            nontarget += 1
    total = target + nontarget
    return None if total == 0 else nontarget / total


def language_penalty(text: str, cfg: PenaltyConfig = PenaltyConfig()) -> int:
    frac = nontarget_fraction(text, cfg.target_language)
    return -1 if frac is not None and frac > cfg.nontarget_threshold else 0


def unique_ngram_ratio(text: str, n: int) -> float | None:
    windows = len(text) - n + 1
    if windows < 1:
        return None
    return len({text[i:i + n] for i in range(windows)}) / windows


def repetition_quality_penalty(text: str, cfg: PenaltyConfig = PenaltyConfig()) -> int:
    ratio = unique_ngram_ratio(text, cfg.ngram_n)
    return -1 if ratio is not None and ratio < cfg.unique_ratio_threshold else 0


def length_penalty(n_tokens: int, soft_start: float, hard_cap: float) -> float:
    """0 up to ``soft_start``, linear down to -1 at ``hard_cap``, -1 beyond."""
    if n_tokens <= soft_start:
        return 0.0
    if n_tokens >= hard_cap:
        return -1.0
    return -(n_tokens - soft_start) / (hard_cap - soft_start)


def final_correct(text: str, ground_truth: str, pattern: str = DEFAULT_ANSWER_PATTERN) -> int:
    answer = extract_answer(text, pattern)
    return 0 if answer is None else answer_accuracy(answer, ground_truth)


def composite_reward(group: RolloutGroup, traces: Sequence[AnnotatedTrace | None],
                     cfg: PenaltyConfig = PenaltyConfig(),
                     template: FormatTemplate = FormatTemplate(),
                     correct: Sequence[int] | None = None) -> list[RewardBreakdown]:
    """Per-rollout rewards for one group.

    Math/science thinking prompts get the reflection inhibition reward; code
    and non-thinking prompts get accuracy plus a soft length penalty. A
    ``None`` trace marks a failed annotation. ``correct`` overrides the
    group's stored correctness flags (e.g. from an external verifier).
    """
    rollouts = group.rollouts
    if not rollouts:
        raise InvalidGroupError("group has no rollouts")
    if len(traces) != len(rollouts):
        raise InvalidGroupError(f"{len(traces)} traces for {len(rollouts)} rollouts")
    flags = [int(bool(c)) for c in (group.correct if correct is None else correct)]
    kind = group.prompt.task_kind
    mode = "non_thinking" if kind is TaskKind.NON_THINKING else "thinking"

    bounds = None
    if kind is TaskKind.THINKING_MATH_SCIENCE:
        counts = [t.verify_count if t is not None else 0 for t in traces]
        bounds = reflection_bounds(sum(flags) / len(flags), counts)
    soft, hard = cfg.length_interval(group.prompt.length_group)

    out = []
    for rollout, trace, acc in zip(rollouts, traces, flags):
        if bounds is not None:
            rb = reflect_reward(trace, acc, bounds)
        else:
            rb = RewardBreakdown(r_acc=acc, base=float(acc))
        p = rb.penalties
        if "format" in cfg.enabled:
            p["format"] = format_penalty(rollout.text, mode, template)
        if "language" in cfg.enabled:
            p["language"] = language_penalty(rollout.text, cfg)
        if "repetition" in cfg.enabled:
            p["repetition"] = repetition_quality_penalty(rollout.text, cfg)
        if bounds is None and "length" in cfg.enabled:
            p["length"] = length_penalty(len(rollout), soft, hard)
        out.append(rb)
    return out

