import pytest
from hypothesis import given, strategies as st

from rapo.trajectory import (
    AnnotatedTrace,
    AnnotationUnavailable,
    DegenerateTraceError,
    InvalidGroupError,
    Marker,
    Prompt,
    Rollout,
    RolloutGroup,
    RuleAnnotator,
    Segment,
    annotate,
    segment_trace,
)


def _rollout(n=3, **kw):
    base = dict(prompt_id="q", tokens=tuple(range(n)), text="x", logprob_old=(-1.0,) * n,
                logprob_new=(-1.0,) * n, entropy=(0.5,) * n)
    base.update(kw)
    return Rollout(**base)


@pytest.mark.parametrize("text,L,expected", [
    ("abcdef", 2, ["ab", "cd", "ef"]),
    ("abcde", 2, ["ab", "cd", "e"]),
])
def test_segment_trace_examples(text, L, expected):
    assert segment_trace(text, L) == expected


def test_segment_trace_empty_is_degenerate():
    with pytest.raises(DegenerateTraceError):
        segment_trace("", 4)


def test_segment_trace_rejects_bad_length():
    with pytest.raises(ValueError):
        segment_trace("abc", 0)


@given(st.text(min_size=1), st.integers(1, 50))
def test_segment_round_trip(text, L):
    parts = segment_trace(text, L)
    assert "".join(parts) == text
    assert all(len(p) == L for p in parts[:-1])
    assert 1 <= len(parts[-1]) <= L


def test_annotate_sentinel_example():
    ann = RuleAnnotator("ANS:", "VERIFY")
    trace = annotate("step1 ANS:42 check VERIFY ok VERIFY done", "42", ann)
    assert trace.has_first_answer
    assert "ANS:42" in trace.segments[trace.first_answer_index].text
    assert trace.verify_count == 2


def test_annotate_without_sentinels():
    trace = annotate("just some reasoning text", "42", RuleAnnotator())
    assert trace.first_answer_index is None
    assert trace.verify_count == 0


def test_annotate_first_correct_answer_only():
    trace = annotate("ANS:41 VERIFY ANS:42", "42", RuleAnnotator("ANS:", "VERIFY"))
    assert trace.segments[trace.first_answer_index].text.startswith("ANS:42")
    assert trace.verify_count == 0


def test_annotate_numeric_equivalence():
    trace = annotate("ANS:0.5 VERIFY", "1/2", RuleAnnotator())
    assert trace.has_first_answer and trace.verify_count == 1


def test_annotate_counts_all_verifies_without_answer():
    trace = annotate("VERIFY a VERIFY", "42", RuleAnnotator())
    assert not trace.has_first_answer
    assert trace.verify_count == 2


def test_annotate_sentinel_across_segment_boundary():
    text = "abcdANS:42 xVERIFY"
    trace = annotate(text, "42", RuleAnnotator(), segment_length=6)
    assert trace.text == text
    assert trace.has_first_answer and trace.verify_count == 1


def test_annotate_empty_trace():
    trace = annotate("", "42", RuleAnnotator())
    assert trace.segments == () and trace.verify_count == 0


class _Broken:
    def locate(self, segments, ground_truth):
        raise AnnotationUnavailable("backend down")


def test_annotation_failure_propagates():
    with pytest.raises(AnnotationUnavailable):
        annotate("ANS:1", "1", _Broken())


class _EverySecondSegment:
    """Segment-level annotator: marks whole segments, never splits them."""

    def locate(self, segments, ground_truth):
        events = [(0, 0, Marker.FIRST_ANSWER)]
        events += [(i, 0, Marker.VERIFY) for i in range(2, len(segments), 2)]
        return events


_texts = st.text(alphabet="ab VERIFYANS:42", min_size=1, max_size=200)


@given(_texts, st.integers(1, 20))
def test_marker_ordering_invariant(text, L):
    trace = annotate(text, "42", RuleAnnotator(), segment_length=L)
    assert trace.text == text
    verify = [i for i, s in enumerate(trace.segments) if s.marker is Marker.VERIFY]
    assert trace.verify_count == len(verify)
    if trace.first_answer_index is not None:
        assert all(i > trace.first_answer_index for i in verify)


@given(_texts, st.integers(1, 20))
def test_segment_level_annotator_keeps_segments(text, L):
    base = segment_trace(text, L)
    trace = annotate(text, "42", _EverySecondSegment(), segment_length=L)
    assert [s.text for s in trace.segments] == base


@given(_texts, st.integers(1, 20))
def test_rule_annotator_only_refines_segments(text, L):
    # equal-length cut points survive whatever the annotator adds
    trace = annotate(text, "42", RuleAnnotator(), segment_length=L)
    cuts, pos = set(), 0
    for s in trace.segments:
        cuts.add(pos)
        pos += len(s.text)
    assert set(range(0, len(text), L)) <= cuts


def test_annotated_trace_validates_order():
    with pytest.raises(ValueError):
        AnnotatedTrace((Segment("a", Marker.VERIFY), Segment("b", Marker.FIRST_ANSWER)), 1)
    with pytest.raises(ValueError):
        AnnotatedTrace((Segment("a", Marker.FIRST_ANSWER), Segment("b", Marker.FIRST_ANSWER)), 0)


def test_rollout_invariants():
    with pytest.raises(ValueError):
        _rollout(n=0)
    with pytest.raises(ValueError):
        _rollout(entropy=(0.1, -0.1, 0.2))
    with pytest.raises(ValueError):
        _rollout(logprob_old=(-1.0,))


def test_group_pass_rate():
    p = Prompt("q", "what", "4")
    rs = tuple(_rollout() for _ in range(8))
    group = RolloutGroup(p, rs, (True, True, True) + (False,) * 5)
    assert group.pass_rate == 0.375
    with pytest.raises(InvalidGroupError):
        RolloutGroup(p, rs[:1], (True,))


def test_prompt_validation():
    with pytest.raises(ValueError):
        Prompt("q", "t", "")
    with pytest.raises(ValueError):
        Prompt("q", "t", "1", length_group=0)
