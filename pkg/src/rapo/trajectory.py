"""Prompts, rollouts, rollout groups and annotated reasoning traces.

Trace annotation marks the segment where the correct answer first shows up
and every reflection ("verify") step that follows it. The marking itself is
delegated to an :class:`Annotator`; :class:`RuleAnnotator` is the built-in
sentinel-based implementation.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from rapo.answers import answer_accuracy

DEFAULT_SEGMENT_LENGTH = 64


class TaskKind(str, enum.Enum):
    THINKING_MATH_SCIENCE = "thinking_math_science"
    THINKING_CODE = "thinking_code"
    NON_THINKING = "non_thinking"


class Finish(str, enum.Enum):
    STOPPED = "stopped"
    LENGTH_CAPPED = "length_capped"
    REPETITION_TRUNCATED = "repetition_truncated"


class Marker(str, enum.Enum):
    NONE = "none"
    FIRST_ANSWER = "first_answer"
    VERIFY = "verify"


class DegenerateTraceError(ValueError):
    """Raised when a trace has nothing to segment."""


class AnnotationUnavailable(RuntimeError):
    """Raised by an annotator whose backend could not produce markers."""


class InvalidGroupError(ValueError):
    pass


@dataclass(frozen=True)
class Prompt:
    id: str
    text: str
    ground_truth: str
    task_kind: TaskKind = TaskKind.THINKING_MATH_SCIENCE
    length_group: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if self.length_group <= 0:
            raise ValueError(f"length_group must be positive, got {self.length_group}")
        if not self.ground_truth:
            raise ValueError(f"prompt {self.id!r}: ground_truth must be non-empty")


@dataclass(frozen=True)
class Rollout:
    """One sampled response.

    ``states`` is only filled by the simulator: it records which table row of
    a tabular policy produced each token, so the loss can be differentiated.
    """

    prompt_id: str
    tokens: tuple[int, ...]
    text: str
    logprob_old: tuple[float, ...]
    logprob_new: tuple[float, ...]
    entropy: tuple[float, ...]
    finish: Finish = Finish.STOPPED
    states: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "finish", Finish(self.finish))
        n = len(self.tokens)
        if n < 1:
            raise ValueError("rollout must contain at least one token")
        for name in ("logprob_old", "logprob_new", "entropy"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if self.states is not None and len(self.states) != n:
            raise ValueError("states must align with tokens")
        if any(h < 0 for h in self.entropy):
            raise ValueError("entropies must be non-negative")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class RolloutGroup:
    prompt: Prompt
    rollouts: tuple[Rollout, ...]
    correct: tuple[bool, ...]

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise InvalidGroupError(f"a group needs at least 2 rollouts, got {len(self.rollouts)}")
        if len(self.correct) != len(self.rollouts):
            raise InvalidGroupError("one correctness flag per rollout is required")

    @property
    def G(self) -> int:
        return len(self.rollouts)

    @property
    def pass_rate(self) -> float:
        return sum(bool(c) for c in self.correct) / len(self.correct)


@dataclass(frozen=True)
class Segment:
    text: str
    marker: Marker = Marker.NONE


@dataclass(frozen=True)
class AnnotatedTrace:
    segments: tuple[Segment, ...] = ()
    first_answer_index: int | None = None
    verify_count: int = field(init=False)

    def __post_init__(self):
        firsts = [i for i, s in enumerate(self.segments) if s.marker is Marker.FIRST_ANSWER]
        if len(firsts) > 1:
            raise ValueError("at most one segment may carry the first-answer marker")
        expected = firsts[0] if firsts else None
        if self.first_answer_index != expected:
            raise ValueError("first_answer_index disagrees with segment markers")
        verifies = [i for i, s in enumerate(self.segments) if s.marker is Marker.VERIFY]
        if expected is not None and any(i <= expected for i in verifies):
            raise ValueError("verify segments must follow the first answer")
        object.__setattr__(self, "verify_count", len(verifies))

    @property
    def has_first_answer(self) -> bool:
        return self.first_answer_index is not None

    @property
    def text(self) -> str:
        return "".join(s.text for s in self.segments)


def segment_trace(text: str, segment_length: int = DEFAULT_SEGMENT_LENGTH) -> list[str]:
    """Split ``text`` into consecutive chunks of ``segment_length`` characters."""
    if segment_length < 1:
        raise ValueError("segment_length must be >= 1")
    if not text:
        raise DegenerateTraceError("empty trace")
    return [text[i:i + segment_length] for i in range(0, len(text), segment_length)]


# (segment index, character offset inside that segment, marker)
Event = tuple[int, int, Marker]


class Annotator(Protocol):
    def locate(self, segments: Sequence[str], ground_truth: str) -> list[Event]:
        """Return marker events; may raise :class:`AnnotationUnavailable`."""
        ...


class RuleAnnotator:
    """Marks sentinel occurrences found in the joined trace.

    An answer occurrence is ``answer_sentinel`` followed by a value; it is a
    first-answer event if the value matches the ground truth. Every
    ``verify_sentinel`` occurrence is a verify event.
    """

    def __init__(self, answer_sentinel: str = "ANS:", verify_sentinel: str = "VERIFY",
                 value_pattern: str = r"[^\s<]+"):
        if not answer_sentinel or not verify_sentinel:
            raise ValueError("sentinels must be non-empty")
        self.answer_sentinel = answer_sentinel
        self.verify_sentinel = verify_sentinel
        self._answer_re = re.compile(re.escape(answer_sentinel) + r"\s*(" + value_pattern + ")")
        self._verify_re = re.compile(re.escape(verify_sentinel))

    def locate(self, segments: Sequence[str], ground_truth: str) -> list[Event]:
        text = "".join(segments)
        starts = []
        pos = 0
        for s in segments:
            starts.append(pos)
            pos += len(s)

        def where(offset: int) -> tuple[int, int]:
            # last segment starting at or before offset
            lo, hi = 0, len(starts) - 1
            while lo < hi:
                mid = (lo + hi + 1) // 2
                if starts[mid] <= offset:
                    lo = mid
                else:
                    hi = mid - 1
            return lo, offset - starts[lo]

        events: list[Event] = []
        for m in self._answer_re.finditer(text):
            if answer_accuracy(m.group(1), ground_truth):
                events.append((*where(m.start()), Marker.FIRST_ANSWER))
                break
        for m in self._verify_re.finditer(text):
            events.append((*where(m.start()), Marker.VERIFY))
        return events


def annotate(trace_text: str, ground_truth: str, annotator: Annotator,
             segment_length: int = DEFAULT_SEGMENT_LENGTH) -> AnnotatedTrace:
    """Segment a reasoning trace and attach first-answer / verify markers.

    Segments are refined at every retained event offset so each event opens
    its own segment; a segment-level annotator (offsets all zero) leaves the
    equal-length segmentation untouched. Verify events before the first
    correct answer are dropped; with no correct answer all of them count.
    """
    try:
        base = segment_trace(trace_text, segment_length)
    except DegenerateTraceError:
        return AnnotatedTrace()
    events = annotator.locate(base, ground_truth)

    starts = [0]
    for s in base[:-1]:
        starts.append(starts[-1] + len(s))
    flat = sorted((starts[i] + off, marker) for i, off, marker in events)

    first = next((pos for pos, m in flat if m is Marker.FIRST_ANSWER), None)
    marks: dict[int, Marker] = {}
    if first is not None:
        marks[first] = Marker.FIRST_ANSWER
    for pos, m in flat:
        if m is Marker.VERIFY and (first is None or pos > first) and pos not in marks:
            marks[pos] = Marker.VERIFY

    cuts = sorted(set(starts) | set(marks) | {len(trace_text)})
    segments = []
    first_index = None
    for a, b in zip(cuts, cuts[1:]):
        marker = marks.get(a, Marker.NONE)
        if marker is Marker.FIRST_ANSWER:
            first_index = len(segments)
        segments.append(Segment(trace_text[a:b], marker))
    return AnnotatedTrace(tuple(segments), first_index)
