import json

import pytest
from hypothesis import given, strategies as st

from spanforget.core import (
    Corpus,
    InputError,
    Instance,
    ScoredSequence,
    Span,
    SpanSet,
    TokenSequence,
    covered_positions,
    read_traces,
    span_set_from_indices,
    write_traces,
)


@pytest.mark.parametrize(
    "indices, T, expected",
    [
        ({1}, 7, [(1, 1)]),
        ({4, 5}, 7, [(4, 2)]),
        ({0, 1, 3, 4, 5}, 6, [(0, 2), (3, 3)]),
        (set(), 3, []),
    ],
)
def test_span_set_from_indices(indices, T, expected):
    assert span_set_from_indices(indices, T) == SpanSet(expected)


def test_span_set_from_indices_out_of_range():
    with pytest.raises(InputError):
        span_set_from_indices({7}, 7)


@pytest.mark.parametrize(
    "spans, expected",
    [([], set()), ([(2, 3)], {2, 3, 4}), ([(0, 1), (4, 2)], {0, 4, 5})],
)
def test_covered_positions(spans, expected):
    assert covered_positions(SpanSet(spans)) == expected


def test_spanset_merges_overlapping_and_adjacent():
    s = SpanSet([(5, 3), (0, 2), (2, 1), (6, 1)])
    assert s.to_list() == [[0, 3], [5, 3]]
    assert repr(s) == "SpanSet([(0, 3), (5, 3)])"
    assert s.n_covered == 6 and s.max_end == 8


def test_span_rejects_bad_values():
    with pytest.raises(InputError):
        Span(-1, 2)
    with pytest.raises(InputError):
        Span(0, 0)


def test_spanset_validate_and_shift():
    s = SpanSet([(2, 3), (8, 2)])
    s.validate(10)
    with pytest.raises(InputError):
        s.validate(9)
    assert s.shift(-3, 7) == SpanSet([(0, 2), (5, 2)])
    assert s.shift(-20) == SpanSet()


index_sets = st.integers(1, 40).flatmap(
    lambda T: st.tuples(st.just(T), st.sets(st.integers(0, T - 1)))
)


@given(index_sets)
def test_indices_roundtrip(case):
    T, idx = case
    assert covered_positions(span_set_from_indices(idx, T)) == idx


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(1, 6)), max_size=8))
def test_construction_covers_union(raw):
    s = SpanSet(raw)
    union = {p for a, ln in raw for p in range(a, a + ln)}
    assert covered_positions(s) == union
    assert span_set_from_indices(covered_positions(s), 40) == s
    spans = s.spans
    assert all(x.end < y.start for x, y in zip(spans, spans[1:]))


def test_token_sequence_checks():
    with pytest.raises(InputError):
        TokenSequence("a", [])
    with pytest.raises(InputError):
        TokenSequence("a", [1, -2])
    with pytest.raises(InputError):
        TokenSequence("a", [1, 2], ["x"])
    assert TokenSequence("a", [104, 105], ["h", "i"]).text == "hi"


def test_scored_sequence_rejects_positive_logprob():
    seq = TokenSequence("a", [1, 2])
    with pytest.raises(InputError):
        ScoredSequence(seq, [-1.0, 0.5])
    with pytest.raises(InputError):
        ScoredSequence(seq, [-1.0])


def test_instance_spans_must_fit():
    with pytest.raises(InputError):
        Instance(TokenSequence("a", [1, 2, 3]), SpanSet([(2, 2)]))


def test_corpus_ids_unique_and_indexed():
    a = Instance(TokenSequence("a", [1]))
    with pytest.raises(InputError):
        Corpus([a, a])
    with pytest.raises(InputError):
        Corpus([a], "dev")
    c = Corpus([a, Instance(TokenSequence("b", [2]))], "forget")
    assert c["b"].seq.tokens == (2,)
    assert c.ids == ["a", "b"]
    assert c.with_spans({"a": SpanSet([(0, 1)])})["a"].spans == SpanSet([(0, 1)])


def test_trace_jsonl_roundtrip(tmp_path):
    inst = Instance(TokenSequence("x1", [3, 4, 5], ["a", "b", "c"]), SpanSet([(1, 2)]), (-0.5, -1.0, -2.0))
    path = tmp_path / "t.jsonl"
    write_traces(path, [inst, Instance(TokenSequence("x2", [7]))])
    back = read_traces(path)
    assert back["x1"] == inst
    assert back["x2"].spans is None and back["x2"].logprobs is None
    assert json.loads(path.read_text().splitlines()[0])["spans"] == [[1, 2]]


@pytest.mark.parametrize(
    "line, msg",
    [
        ('{"tokens": [1]}', "need 'id'"),
        ('{"id": "a", "tokens": [1], "spans": [[0, 5]]}', "exceeds"),
        ('{"id": "a", "tokens": [1], "logprobs": [0.3]}', "<= 0"),
        ("not json", "invalid JSON"),
    ],
)
def test_trace_errors_are_input_errors(tmp_path, line, msg):
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(InputError, match=msg):
        read_traces(path)
