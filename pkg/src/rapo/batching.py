"""Adaptive dynamic sampling, length-group scheduling and repetition truncation."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Protocol, Sequence, TypeVar


class Scored(Protocol):
    @property
    def pass_rate(self) -> float: ...


GroupT = TypeVar("GroupT", bound=Scored)


class EmptyBatchError(ValueError):
    """No group survived filtering; the caller has to draw a fresh batch."""


@dataclass(frozen=True)
class BatchSpec:
    gbs: int = 512
    mbs: int = 64
    G: int = 8

    def __post_init__(self):
        if self.gbs < 1 or self.mbs < 1:
            raise ValueError("batch sizes must be positive")
        if self.gbs % self.mbs:
            raise ValueError(f"gbs={self.gbs} is not a multiple of mbs={self.mbs}")
        if self.G < 2:
            raise ValueError("G must be at least 2")


def filter_groups(batch: Iterable[GroupT]) -> tuple[list[GroupT], int]:
    """Drop groups whose rollouts are all correct or all incorrect."""
    kept, dropped = [], 0
    for group in batch:
        if 0.0 < group.pass_rate < 1.0:
            kept.append(group)
        else:
            dropped += 1
    return kept, dropped


@dataclass(frozen=True)
class ResampledBatch:
    """A batch padded to a multiple of the mini-batch size.

    ``source[i]`` is the index into the filtered input of ``groups[i]``;
    the first ``n_original`` entries are the input itself, in order.
    """

    groups: tuple
    source: tuple[int, ...]
    n_original: int
    mbs: int

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    @property
    def k(self) -> int:
        return len(self.groups) // self.mbs

    @property
    def n_duplicates(self) -> int:
        return len(self.groups) - self.n_original

    def is_duplicate(self, i: int) -> bool:
        return i >= self.n_original

    def minibatches(self) -> Iterator[tuple]:
        for i in range(0, len(self.groups), self.mbs):
            yield self.groups[i:i + self.mbs]


def ads_resample(kept: Sequence[GroupT], mbs: int) -> ResampledBatch:
    """Replenish ``kept`` up to the smallest multiple of ``mbs``.

    Extra slots are filled with the highest-pass-rate groups, earliest first
    among equal pass rates, cycling through the ranking when the deficit is
    larger than the batch itself.
    """
    if mbs < 1:
        raise ValueError("mbs must be positive")
    if not kept:
        raise EmptyBatchError("no groups left after filtering")
    k = (len(kept) + mbs - 1) // mbs
    deficit = k * mbs - len(kept)
    ranked = sorted(range(len(kept)), key=lambda i: -kept[i].pass_rate)
    extra = [ranked[j % len(ranked)] for j in range(deficit)]
    source = tuple(range(len(kept))) + tuple(extra)
    return ResampledBatch(tuple(kept[i] for i in source), source, len(kept), mbs)


def oversample_filter(batch: Sequence[GroupT], gbs: int) -> tuple[list[GroupT], int]:
    """Baseline dynamic sampling: keep the first ``gbs`` informative groups, discard the rest.

    Returns the trained groups and how many generated groups were thrown away
    (saturated ones plus the informative excess).
    """
    kept, dropped = filter_groups(batch)
    return kept[:gbs], dropped + max(0, len(kept) - gbs)


@dataclass(frozen=True)
class ScheduleConfig:
    groups: tuple[tuple[object, int], ...] = ((4096, 2), (16384, 1))

    def __post_init__(self):
        if not self.groups:
            raise ValueError("at least one length group is required")
        for label, ratio in self.groups:
            if ratio < 1:
                raise ValueError(f"ratio for {label!r} must be >= 1")


def alternating_schedule(cfg: ScheduleConfig) -> Iterator[object]:
    """Endless stream of length-group labels, ``ratio`` batches of each per period."""
    period = [label for label, ratio in cfg.groups for _ in range(ratio)]
    return itertools.cycle(period)


@dataclass(frozen=True)
class TruncationConfig:
    check_every: int = 1024
    subseq_len: int = 200
    threshold: int = 10

    def __post_init__(self):
        if min(self.check_every, self.subseq_len, self.threshold) < 1:
            raise ValueError("truncation parameters must be positive")


class Decision(str, enum.Enum):
    CONTINUE = "continue"
    TRUNCATE = "truncate"


_MOD = (1 << 61) - 1
_BASE = 1_000_003


class RepetitionMonitor:
    """Online detector for a length-N token run that recurs too often.

    Window hashes are Rabin-Karp rolling hashes; each new window is checked
    exactly against its bucket's representatives. When the previous window
    already matched the representative's previous window, equality needs
    only the last token, so periodic streams verify in O(1) per token.
    A decision is taken every ``check_every`` tokens; overlapping
    occurrences count.
    """

    def __init__(self, cfg: TruncationConfig = TruncationConfig()):
        self.cfg = cfg
        self.tokens: list[int] = []
        self.decision = Decision.CONTINUE
        self.checkpoints: list[tuple[int, Decision]] = []
        self.max_count = 0
        self._hash = 0
        self._drop = pow(_BASE, cfg.subseq_len - 1, _MOD)
        self._buckets: dict[int, list[int]] = {}
        self._rep: list[int] = []      # class id -> start of representative window
        self._count: list[int] = []    # class id -> occurrences
        self._cls: list[int] = []      # window start -> class id

    @staticmethod
    def _value(tok: int) -> int:
        return (tok + 1) % _MOD

    def _same_window(self, i: int, j: int) -> bool:
        n = self.cfg.subseq_len
        t = self.tokens
        if i > 0 and j > 0 and self._cls[i - 1] == self._cls[j - 1]:
            return t[i + n - 1] == t[j + n - 1]
        return t[i:i + n] == t[j:j + n]

    def _add_window(self, start: int) -> None:
        bucket = self._buckets.setdefault(self._hash, [])
        for cid in bucket:
            if self._same_window(start, self._rep[cid]):
                self._count[cid] += 1
                self._cls.append(cid)
                self.max_count = max(self.max_count, self._count[cid])
                return
        cid = len(self._rep)
        self._rep.append(start)
        self._count.append(1)
        self._cls.append(cid)
        bucket.append(cid)
        self.max_count = max(self.max_count, 1)

    def append(self, token: int) -> Decision:
        """Add one token; returns the decision in force afterwards."""
        n = self.cfg.subseq_len
        self.tokens.append(token)
        L = len(self.tokens)
        if L > n:
            self._hash = (self._hash - self._value(self.tokens[L - 1 - n]) * self._drop) % _MOD
        self._hash = (self._hash * _BASE + self._value(token)) % _MOD
        if L >= n:
            self._add_window(L - n)
        if L % self.cfg.check_every == 0 and self.decision is Decision.CONTINUE:
            if self.max_count > self.cfg.threshold:
                self.decision = Decision.TRUNCATE
            self.checkpoints.append((L, self.decision))
        return self.decision

    def extend(self, tokens: Iterable[int]) -> Decision:
        for tok in tokens:
            if self.append(tok) is Decision.TRUNCATE:
                break
        return self.decision


def truncation_monitor(stream: Iterable[int], cfg: TruncationConfig = TruncationConfig()
                       ) -> list[tuple[int, Decision]]:
    """Run a monitor over a finite stream; returns the per-checkpoint decisions."""
    mon = RepetitionMonitor(cfg)
    mon.extend(stream)
    return mon.checkpoints

