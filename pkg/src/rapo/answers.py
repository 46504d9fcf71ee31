"""Rule-based answer matching and extraction."""

from __future__ import annotations

import re
from fractions import Fraction

DEFAULT_ANSWER_PATTERN = r"(?:ANS:|\\boxed\{)\s*([^\s<{}]+)"

_THINK_CLOSE = "</think>"


def normalize(s: str) -> str:
    return " ".join(s.strip().casefold().split())


def parse_number(s: str) -> Fraction | None:
    """Parse an integer, decimal, scientific or ``p/q`` literal exactly."""
    s = s.strip().replace(",", "")
    if not s:
        return None
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def answer_accuracy(extracted_answer: str, ground_truth: str) -> int:
    """1 when the two answers match after normalization or are numerically equal."""
    if normalize(extracted_answer) == normalize(ground_truth):
        return 1
    a = parse_number(extracted_answer)
    b = parse_number(ground_truth)
    if a is not None and b is not None and a == b:
        return 1
    return 0


def post_think(text: str) -> str:
    """Text after the last closing think tag.

    An unclosed ``<think>`` means the response never left its reasoning
    phase, so there is no post-think text at all.
    """
    idx = text.rfind(_THINK_CLOSE)
    if idx >= 0:
        return text[idx + len(_THINK_CLOSE):]
    if "<think>" in text:
        return ""
    return text


def reasoning_body(text: str) -> str:
    """The reasoning trajectory: text inside the think block, or the whole text."""
    start = text.find("<think>")
    if start < 0:
        return text
    start += len("<think>")
    end = text.find(_THINK_CLOSE, start)
    return text[start:] if end < 0 else text[start:end]


def extract_answer(text: str, pattern: str = DEFAULT_ANSWER_PATTERN) -> str | None:
    """Last match of ``pattern`` in the post-think part of ``text``."""
    matches = re.findall(pattern, post_think(text))
    if not matches:
        return None
    last = matches[-1]
    if isinstance(last, tuple):
        last = next((g for g in last if g), "")
    return last
