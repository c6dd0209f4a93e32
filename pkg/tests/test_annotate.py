import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES
from spanforget import annotate as ann
from spanforget.core import InputError, SpanSet, TokenSequence, read_traces
from spanforget.synth import to_sequence

EXPECTED = {
    "doc-1": SpanSet([(8, 17), (34, 8)]),
    "doc-2": SpanSet([(5, 9), (21, 9)]),
    "doc-3": SpanSet(),
}


@pytest.fixture
def cfg():
    return ann.AnnotationPromptConfig(fewshot_examples=ann.load_fewshot(FIXTURES / "annotate_fewshot.jsonl"))


@pytest.fixture
def replay():
    return ann.ReplayChatClient(FIXTURES / "annotate_replay.jsonl")


def scripted(cfg, replies):
    """Replay client answering prompts given as rendered text."""
    return ann.ReplayChatClient({ann.request_digest(cfg.model_name, p, cfg.temperature): r for p, r in replies})


# -- prompt config -------------------------------------------------------------------

def test_backward_prompt_has_scale_and_single_slot():
    cfg = ann.AnnotationPromptConfig()
    prompt = cfg.render_backward("555-0142")
    assert "555-0142" in prompt and "{0, 1, 2}" in prompt
    assert prompt.rstrip().endswith("integer rating.")
    with pytest.raises(InputError):
        ann.AnnotationPromptConfig(backward_template="rate {span} and {span} on a scale")
    with pytest.raises(InputError):
        ann.AnnotationPromptConfig(backward_template="rate {span}")
    with pytest.raises(InputError):
        ann.AnnotationPromptConfig(forward_template="{text} only")


def test_forward_prompt_includes_examples(cfg):
    prompt = cfg.render_forward("Hi there.")
    assert "Ask Tom Reyes at 12 Elm Road." in prompt and "- 12 Elm Road" in prompt
    assert "It rained all week.\nSensitive spans:\n- none" in prompt
    assert prompt.rstrip().endswith("Text: Hi there.\nSensitive spans:")


def test_fewshot_file_validation(tmp_path):
    bad = tmp_path / "f.jsonl"
    bad.write_text('{"spans": []}\n')
    with pytest.raises(InputError):
        ann.load_fewshot(bad)


# -- forward parsing -----------------------------------------------------------------

@pytest.mark.parametrize("reply,expected", [
    ("", []),
    ("- a@b.com\n- 555-0142", ["a@b.com", "555-0142"]),
    ("1. Tom\n2) Elm Road\n* \"X1\"", ["Tom", "Elm Road", "X1"]),
    ('["a", "b", "a"]', ["a", "b", "a"]),
    ("Here are the spans:\n- x\n- x", ["x", "x"]),
    ("- none", []),
])
def test_parse_candidates(reply, expected):
    assert ann.parse_candidates(reply) == expected


def test_forward_unparseable_reply_gives_diagnostic():
    cfg = ann.AnnotationPromptConfig()
    seq = to_sequence("a", "hello")
    client = scripted(cfg, [(cfg.render_forward("hello"), "   \n  ")])
    diags = []
    assert ann.forward_annotate(seq, cfg, client, diags) == [] and diags == []
    client = scripted(cfg, [(cfg.render_forward("hello"), "Sensitive spans:")])
    assert ann.forward_annotate(seq, cfg, client, diags) == [] and len(diags) == 1
    with pytest.raises(InputError):
        ann.forward_annotate(TokenSequence("b", [1, 2]), cfg, client)


def test_forward_fixture_lists_two_spans_in_order(cfg, replay):
    seq = read_traces(FIXTURES / "annotate_traces.jsonl")["doc-2"].seq
    assert ann.forward_annotate(seq, cfg, replay) == ["bob@x.org", "bob@x.org"]


# -- resolution ------------------------------------------------------------------------

def test_resolve_full_text_absent_and_repeated():
    seq = to_sequence("a", "Mail bob@x.org, then bob@x.org again.")
    out = ann.resolve_spans([seq.text, "alice", "bob@x.org", "bob@x.org"], seq)
    assert [c.text for c in out] == [seq.text, "alice", "bob@x.org"]
    assert [(s.start, s.len) for s in out[0].spans] == [(0, len(seq))]
    assert not out[1].resolved
    assert [(s.start, s.len) for s in out[2].spans] == [(5, 9), (21, 9)]


def test_resolve_respects_token_boundaries():
    seq = TokenSequence("w", [1, 2, 3, 4], ("Call", " ", "An", "na"))
    out = ann.resolve_spans(["Ann", "Anna", " Anna", "all"], seq)
    assert [c.resolved for c in out] == [False, True, True, False]
    assert [(s.start, s.len) for s in out[1].spans] == [(2, 2)]
    assert [(s.start, s.len) for s in out[2].spans] == [(1, 3)]


def test_resolve_occurrences_do_not_overlap():
    seq = to_sequence("a", "aaaa")
    (cand,) = ann.resolve_spans(["aa"], seq)
    assert [(s.start, s.len) for s in cand.spans] == [(0, 2), (2, 2)]


# -- backward rating ------------------------------------------------------------------

@pytest.mark.parametrize("reply,rating,n_diag", [
    ("The span is an email address.\n2", 2, 0),
    ("0", 0, 0),
    ("Rating: 1", 1, 0),
    ("no idea", 0, 1),
    ("", 0, 1),
    ("Analysis mentions 3 and 4 things.\n7", 2, 1),
    ("-1", 0, 1),
    ("I rate it 2.\nThanks!", 2, 0),
])
def test_parse_rating(reply, rating, n_diag):
    diags = []
    assert ann.parse_rating(reply, diags) == rating
    assert len(diags) == n_diag


def test_backward_sends_span_alone():
    cfg = ann.AnnotationPromptConfig()
    seen = []

    class Spy(ann.ChatClient):
        def complete(self, prompt, cfg):
            seen.append(prompt)
            return "1"

    assert ann.backward_verify("bob@x.org", cfg, Spy()) == 1
    assert seen == [cfg.render_backward("bob@x.org")]


# -- clients ---------------------------------------------------------------------------

def test_replay_miss_is_distinct_error():
    cfg = ann.AnnotationPromptConfig()
    with pytest.raises(ann.ReplayMissError):
        ann.ReplayChatClient({}).complete("hello", cfg)


def test_replay_fixture_validation(tmp_path):
    f = tmp_path / "r.jsonl"
    f.write_text('{"digest": "x"}\n')
    with pytest.raises(InputError):
        ann.ReplayChatClient(f)


def test_digest_depends_on_model_prompt_and_temperature():
    base = ann.request_digest("m", "p", 0.0)
    assert base == ann.request_digest("m", "p", 0)
    assert len({base, ann.request_digest("n", "p", 0.0), ann.request_digest("m", "q", 0.0),
                ann.request_digest("m", "p", 0.5)}) == 4


def _ok(content):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


def test_live_client_retries_then_succeeds():
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        assert request.headers["authorization"] == "Bearer k"
        assert request.url.path == "/v1/chat/completions"
        return httpx.Response(429) if len(calls) < 3 else _ok("- x")

    client = ann.LiveChatClient("http://test/v1", "k", backoff=0, transport=httpx.MockTransport(handler))
    cfg = ann.AnnotationPromptConfig(model_name="m1", temperature=0.0)
    assert client.complete("hi", cfg) == "- x"
    assert len(calls) == 3
    assert calls[0] == {"model": "m1", "temperature": 0.0, "messages": [{"role": "user", "content": "hi"}]}


def test_live_client_gives_up_with_attempt_count():
    def handler(request):
        raise httpx.ConnectError("down", request=request)

    client = ann.LiveChatClient("http://test", "k", max_attempts=2, backoff=0,
                                transport=httpx.MockTransport(handler))
    with pytest.raises(ann.ClientError) as exc:
        client.complete("hi", ann.AnnotationPromptConfig())
    assert exc.value.attempts == 2


def test_live_client_does_not_retry_client_errors():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401)

    client = ann.LiveChatClient("http://test", "k", backoff=0, transport=httpx.MockTransport(handler))
    with pytest.raises(ann.ClientError, match="401"):
        client.complete("hi", ann.AnnotationPromptConfig())
    assert len(calls) == 1


def test_live_client_needs_key(monkeypatch):
    monkeypatch.delenv(ann.API_KEY_ENV, raising=False)
    with pytest.raises(ann.ClientError):
        ann.LiveChatClient("http://test")


def test_recording_client_produces_replayable_fixture(tmp_path, cfg, replay):
    rec = ann.RecordingChatClient(replay)
    corpus = read_traces(FIXTURES / "annotate_traces.jsonl")
    first = ann.annotate_corpus(corpus, cfg, rec)
    rec.save(tmp_path / "rec.jsonl")
    again = ann.annotate_corpus(corpus, cfg, ann.ReplayChatClient(tmp_path / "rec.jsonl"))
    assert [r.to_dict() for r in first] == [r.to_dict() for r in again]


# -- pipeline -----------------------------------------------------------------------------

def test_end_to_end_replay_matches_hand_offsets(cfg, replay):
    corpus = read_traces(FIXTURES / "annotate_traces.jsonl")
    records = ann.annotate_corpus(corpus, cfg, replay)
    assert {r.instance_id: r.final_spans for r in records} == EXPECTED
    by_id = {r.instance_id: r for r in records}
    assert by_id["doc-1"].ratings == [2, 1, 0]
    assert by_id["doc-2"].ratings == [2]
    assert by_id["doc-3"].ratings == [0]
    assert any("unresolved" in d for d in by_id["doc-3"].diagnostics)
    text = corpus["doc-1"].seq.text
    assert [text[s.start:s.end] for s in EXPECTED["doc-1"]] == ["jane.doe@mail.com", "555-0142"]
    out = by_id["doc-1"].to_dict()
    assert out["provenance"] == "offline" and out["spans"] == [[8, 17], [34, 8]]
    assert [c["rating"] for c in out["candidates"]] == [2, 1, 0]


def test_parallel_annotation_matches_serial(cfg, replay):
    corpus = read_traces(FIXTURES / "annotate_traces.jsonl")
    serial = [r.to_dict() for r in ann.annotate_corpus(corpus, cfg, replay)]
    assert [r.to_dict() for r in ann.annotate_corpus(corpus, cfg, replay, workers=3)] == serial


def test_all_zero_ratings_give_empty_spans():
    cfg = ann.AnnotationPromptConfig()

    class Zero(ann.ChatClient):
        def complete(self, prompt, cfg):
            return "- bob\n- Mail" if prompt.startswith("List") else "0"

    records = ann.annotate_corpus(read_traces(FIXTURES / "annotate_traces.jsonl"), cfg, Zero())
    assert all(r.final_spans == SpanSet() for r in records)


def test_client_failure_is_recorded_and_run_continues(cfg):
    records = ann.annotate_corpus(read_traces(FIXTURES / "annotate_traces.jsonl"), cfg, ann.ReplayChatClient({}))
    assert len(records) == 3 and all(r.error and r.final_spans == SpanSet() for r in records)


def test_annotation_file_roundtrip(tmp_path, cfg, replay):
    records = ann.annotate_corpus(read_traces(FIXTURES / "annotate_traces.jsonl"), cfg, replay)
    path = tmp_path / "a.jsonl"
    ann.write_annotations(path, records, {"seed": 0})
    assert ann.read_annotations(path) == EXPECTED
    path.write_text('{"id": "a", "spans": [], "provenance": "robot"}\n')
    with pytest.raises(InputError):
        ann.read_annotations(path)
    path.write_text('{"id": "a", "spans": []}\n{"id": "a", "spans": []}\n')
    with pytest.raises(InputError):
        ann.read_annotations(path)


# -- properties ------------------------------------------------------------------------------

WORDS = ["ann", "bob@x.org", "555", " ", "the", "Elm", ".", "aa"]


@settings(max_examples=150, deadline=None)
@given(
    pieces=st.lists(st.sampled_from(WORDS), min_size=1, max_size=12),
    cands=st.lists(st.sampled_from(WORDS + ["missing", "ann the", "a"]), max_size=6),
    ratings=st.lists(st.integers(0, 2), min_size=6, max_size=6),
)
def test_final_spans_are_verbatim_and_rated(pieces, cands, ratings):
    text = "".join(pieces)
    seq = to_sequence("p", text)
    cfg = ann.AnnotationPromptConfig()
    rating_of = dict(zip(dict.fromkeys(cands), ratings))

    class Scripted(ann.ChatClient):
        def complete(self, prompt, cfg):
            if prompt == cfg.render_forward(text):
                return json.dumps(cands)
            for c, r in rating_of.items():
                if prompt == cfg.render_backward(c):
                    return str(r)
            raise AssertionError("unexpected prompt")

    rec = ann.annotate_instance(seq, cfg, Scripted())
    kept = {c for c, r in rating_of.items() if r >= 1}
    covered = set()
    for c in rec.candidates:
        for s in c.spans:
            assert text[s.start:s.end] == c.text
            if c.text in kept:
                covered |= set(range(s.start, s.end))
    final = {t for s in rec.final_spans for t in range(s.start, s.end)}
    assert final == covered
    spans = list(rec.final_spans)
    assert all(a.end < b.start for a, b in zip(spans, spans[1:]))
