"""Two-stage LLM span annotation: forward extraction, backward rating.

The forward stage asks a chat model to list sensitive substrings of a text;
each listed string is then located verbatim in the token sequence. The
backward stage shows the model each located string on its own and asks
for a 0/1/2 sensitivity rating. Strings rated 0 are dropped.

Clients are pluggable. ``ReplayChatClient`` answers from a fixture file
keyed by a digest of the request and never touches the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import httpx

from .core import Corpus, InputError, Span, SpanSet, TokenSequence, read_jsonl, write_jsonl

log = logging.getLogger(__name__)

PROVENANCES = ("online", "offline", "human", "external")

API_KEY_ENV = "SPANFORGET_API_KEY"
ENDPOINT_ENV = "SPANFORGET_ENDPOINT"
DEFAULT_ENDPOINT = "https://api.openai.com/v1"

FORWARD_TEMPLATE = """\
List every span of the text below that is sensitive: information that could \
help identify a specific person, organization, event or other entity, such as \
names, contact details, account or card numbers, addresses and access codes.
Copy each span exactly as it appears in the text, one per line, prefixed with "- ".
If nothing is sensitive, answer "- none".

{examples}Text: {text}
Sensitive spans:
"""

FORWARD_EXAMPLE = "Text: {text}\nSensitive spans:\n{spans}\n\n"

# Kept word for word: the rating scale and output format are part of the
# method, and fixtures are keyed on the rendered prompt.
BACKWARD_TEMPLATE = (
    "Given the text span shown below:\n"
    "{span}\n"
    "Please rate it on a scale from {{0, 1, 2}}. Assign 0 for non-sensitive, 2 for sensitive, "
    "and 1 for somewhat sensitive. Sensitivity is defined here as information that could "
    "potentially help identify details about a specific organization, event, person, or "
    "other entities. Please first analyze the text content and then output a new single "
    "line containing only the integer rating."
)


@dataclass(frozen=True)
class AnnotationPromptConfig:
    forward_template: str = FORWARD_TEMPLATE
    backward_template: str = BACKWARD_TEMPLATE
    #: (text, sensitive substrings) pairs shown before the target text
    fewshot_examples: tuple[tuple[str, tuple[str, ...]], ...] = ()
    model_name: str = "gpt-3.5-turbo"
    temperature: float = 0.0

    def __post_init__(self):
        if self.backward_template.count("{span}") != 1:
            raise InputError("backward template needs exactly one {span} slot")
        if "scale" not in self.backward_template:
            raise InputError("backward template must state the rating scale")
        for slot in ("{examples}", "{text}"):
            if slot not in self.forward_template:
                raise InputError(f"forward template is missing the {slot} slot")
        object.__setattr__(
            self, "fewshot_examples",
            tuple((str(t), tuple(str(s) for s in spans)) for t, spans in self.fewshot_examples),
        )

    def render_forward(self, text: str) -> str:
        examples = "".join(
            FORWARD_EXAMPLE.format(
                text=t, spans="\n".join(f"- {s}" for s in spans) if spans else "- none"
            )
            for t, spans in self.fewshot_examples
        )
        return self.forward_template.format(examples=examples, text=text)

    def render_backward(self, span: str) -> str:
        return self.backward_template.format(span=span)


def load_fewshot(path: str | Path) -> tuple[tuple[str, tuple[str, ...]], ...]:
    """Few-shot examples from JSONL lines ``{"text": str, "spans": [str]}``."""
    out = []
    for i, rec in enumerate(read_jsonl(path), 1):
        if not isinstance(rec, dict) or "text" not in rec or not isinstance(rec.get("spans", []), list):
            raise InputError(f"{path}:{i}: few-shot records need 'text' and a 'spans' list")
        out.append((rec["text"], tuple(rec.get("spans", []))))
    return tuple(out)


# -- clients ------------------------------------------------------------------

class ClientError(RuntimeError):
    """A chat request failed (CLI exit code 4)."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class ReplayMissError(ClientError):
    """The replay fixture has no response for a request."""


def request_digest(model: str, prompt: str, temperature: float) -> str:
    payload = json.dumps([model, prompt, float(temperature)], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ChatClient(ABC):
    @abstractmethod
    def complete(self, prompt: str, cfg: AnnotationPromptConfig) -> str: ...


class LiveChatClient(ChatClient):
    """OpenAI-compatible ``/chat/completions`` client with retries.

    The key is read from ``SPANFORGET_API_KEY`` and the base URL from
    ``SPANFORGET_ENDPOINT`` unless given explicitly. ``min_interval``
    spaces out requests across threads.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, *,
                 max_attempts: int = 3, backoff: float = 1.0, timeout: float = 60.0,
                 min_interval: float = 0.0, transport: httpx.BaseTransport | None = None):
        self.endpoint = (endpoint or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise ClientError(f"no API key: set {API_KEY_ENV}", attempts=0)
        if max_attempts < 1:
            raise InputError("max_attempts must be >= 1")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.min_interval = min_interval
        self._http = httpx.Client(timeout=timeout, transport=transport)
        self._lock = threading.Lock()
        self._last = 0.0

    def _throttle(self):
        if self.min_interval <= 0:
            return
        with self._lock:
            wait = self._last + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()

    def complete(self, prompt, cfg):
        body = {
            "model": cfg.model_name,
            "temperature": cfg.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_err = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            self._throttle()
            try:
                resp = self._http.post(f"{self.endpoint}/chat/completions", json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_err = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise ClientError(f"malformed completion payload: {exc}", attempt) from None
                last_err = f"HTTP {resp.status_code}"
                if resp.status_code not in (408, 409, 429) and resp.status_code < 500:
                    raise ClientError(f"request rejected: {last_err}", attempt)
            if attempt < self.max_attempts:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise ClientError(f"request failed after {self.max_attempts} attempts: {last_err}", self.max_attempts)

    def close(self):
        self._http.close()


class ReplayChatClient(ChatClient):
    """Answers from recorded ``{"digest", "response"}`` JSONL lines."""

    def __init__(self, fixture: str | Path | dict[str, str]):
        if isinstance(fixture, dict):
            self.responses = dict(fixture)
        else:
            self.responses = {}
            for i, rec in enumerate(read_jsonl(fixture), 1):
                if not isinstance(rec, dict) or "digest" not in rec or "response" not in rec:
                    raise InputError(f"{fixture}:{i}: replay records need 'digest' and 'response'")
                self.responses[rec["digest"]] = rec["response"]

    def complete(self, prompt, cfg):
        key = request_digest(cfg.model_name, prompt, cfg.temperature)
        try:
            return self.responses[key]
        except KeyError:
            raise ReplayMissError(f"no recorded response for request {key[:12]}") from None


class RecordingChatClient(ChatClient):
    """Wraps another client and keeps every exchange for later replay."""

    def __init__(self, inner: ChatClient):
        self.inner = inner
        self.records: dict[str, dict] = {}
        self._lock = threading.Lock()

    def complete(self, prompt, cfg):
        response = self.inner.complete(prompt, cfg)
        key = request_digest(cfg.model_name, prompt, cfg.temperature)
        with self._lock:
            self.records[key] = {
                "digest": key, "model": cfg.model_name, "temperature": cfg.temperature,
                "prompt": prompt, "response": response,
            }
        return response

    def save(self, path: str | Path) -> None:
        with self._lock:
            rows = [self.records[k] for k in sorted(self.records)]
        write_jsonl(path, rows)


# -- forward stage --------------------------------------------------------------

_BULLET = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.)]|\[\d+\])\s*")
_QUOTES = "\"'`“”‘’"
_NONE = {"none", "n/a", "no sensitive spans", "nothing"}


def parse_candidates(response: str) -> list[str]:
    """Spans listed in a model reply, in order, duplicates kept.

    Accepts a JSON list of strings, or one span per line with optional
    bullets, numbering and quotes. Header lines ending in ``:`` are skipped.
    """
    response = response.strip()
    if not response:
        return []
    if response.startswith("["):
        try:
            items = json.loads(response)
        except json.JSONDecodeError:
            items = None
        if isinstance(items, list) and all(isinstance(s, str) for s in items):
            return [s for s in items if s]
    out = []
    for line in response.splitlines():
        item = _BULLET.sub("", line, count=1).strip()
        if len(item) >= 2 and item[0] in _QUOTES and item[-1] in _QUOTES:
            item = item[1:-1]
        if not item or item.endswith(":") or item.lower().rstrip(".") in _NONE:
            continue
        out.append(item)
    return out


def forward_annotate(seq: TokenSequence, cfg: AnnotationPromptConfig, client: ChatClient,
                     diagnostics: list[str] | None = None) -> list[str]:
    if seq.surfaces is None:
        raise InputError(f"{seq.id}: annotation needs token surfaces")
    response = client.complete(cfg.render_forward(seq.text), cfg)
    cands = parse_candidates(response)
    if not cands and response.strip() and diagnostics is not None:
        reply = response.strip()
        if reply.lstrip("-*• ").lower().rstrip(".") not in _NONE:
            diagnostics.append(f"no spans parsed from forward reply {reply[:60]!r}")
    return cands


@dataclass(frozen=True)
class ResolvedCandidate:
    text: str
    #: every non-overlapping occurrence; empty when unresolved
    spans: tuple[Span, ...]

    @property
    def resolved(self) -> bool:
        return bool(self.spans)


def resolve_spans(candidates: Sequence[str], seq: TokenSequence) -> list[ResolvedCandidate]:
    """Locate each distinct candidate as an exact run of whole tokens.

    A match must start and end on token boundaries of ``seq``; occurrences
    are found left to right without overlap.
    """
    if seq.surfaces is None:
        raise InputError(f"{seq.id}: span resolution needs token surfaces")
    starts: dict[int, int] = {}
    ends: dict[int, int] = {}
    pos = 0
    for i, s in enumerate(seq.surfaces):
        starts.setdefault(pos, i)
        pos += len(s)
        ends[pos] = i + 1
    text = seq.text
    out = []
    seen = set()
    for cand in candidates:
        if cand in seen:
            continue
        seen.add(cand)
        found = []
        at = 0
        while cand:
            hit = text.find(cand, at)
            if hit < 0:
                break
            stop = hit + len(cand)
            if hit in starts and stop in ends and ends[stop] > starts[hit]:
                found.append(Span(starts[hit], ends[stop] - starts[hit]))
                at = stop
            else:
                at = hit + 1
        out.append(ResolvedCandidate(cand, tuple(found)))
    return out


# -- backward stage ---------------------------------------------------------------

_ONE_INT = re.compile(r"^[^\d-]*(-?\d+)[^\d]*$")


def parse_rating(response: str, diagnostics: list[str] | None = None) -> int:
    """Integer on the last line that holds exactly one, clamped to 0..2."""
    for line in reversed(response.strip().splitlines()):
        m = _ONE_INT.match(line.strip())
        if m:
            value = int(m.group(1))
            if not 0 <= value <= 2:
                if diagnostics is not None:
                    diagnostics.append(f"rating {value} clamped to 0..2")
                value = min(max(value, 0), 2)
            return value
    if diagnostics is not None:
        diagnostics.append(f"no rating in reply {response.strip()[:60]!r}; treated as 0")
    return 0


def backward_verify(span: str, cfg: AnnotationPromptConfig, client: ChatClient,
                    diagnostics: list[str] | None = None) -> int:
    return parse_rating(client.complete(cfg.render_backward(span), cfg), diagnostics)


# -- pipeline ---------------------------------------------------------------------

@dataclass
class AnnotationRecord:
    instance_id: str
    final_spans: SpanSet
    provenance: str = "offline"
    candidates: list[ResolvedCandidate] = field(default_factory=list)
    #: one rating per resolved candidate, in candidate order
    ratings: list[int] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    error: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InputError(f"unknown provenance {self.provenance!r}")

    def to_dict(self) -> dict:
        out: dict = {
            "id": self.instance_id,
            "spans": self.final_spans.to_list(),
            "ratings": list(self.ratings),
            "provenance": self.provenance,
        }
        if self.candidates:
            rated = iter(self.ratings)
            out["candidates"] = [
                {
                    "text": c.text,
                    "spans": [[s.start, s.len] for s in c.spans],
                    "rating": next(rated, None) if c.resolved else None,
                }
                for c in self.candidates
            ]
        if self.diagnostics:
            out["diagnostics"] = list(self.diagnostics)
        if self.error is not None:
            out["error"] = self.error
        return out


def annotate_instance(seq: TokenSequence, cfg: AnnotationPromptConfig, client: ChatClient) -> AnnotationRecord:
    diags: list[str] = []
    try:
        resolved = resolve_spans(forward_annotate(seq, cfg, client, diags), seq)
        ratings = []
        kept = []
        for cand in resolved:
            if not cand.resolved:
                diags.append(f"unresolved candidate {cand.text!r}")
                continue
            rating = backward_verify(cand.text, cfg, client, diags)
            ratings.append(rating)
            if rating >= 1:
                kept.extend(cand.spans)
    except ClientError as exc:
        log.warning("%s: annotation failed: %s", seq.id, exc)
        return AnnotationRecord(seq.id, SpanSet(), diagnostics=diags, error=str(exc))
    return AnnotationRecord(seq.id, SpanSet(kept), "offline", resolved, ratings, diags)


def annotate_corpus(corpus: Corpus, cfg: AnnotationPromptConfig, client: ChatClient,
                    workers: int = 1) -> list[AnnotationRecord]:
    """Annotate every instance; failures are recorded and the run goes on."""
    for inst in corpus:
        if inst.seq.surfaces is None:
            raise InputError(f"{inst.id}: annotation needs token surfaces")
    seqs = [inst.seq for inst in corpus]
    if workers <= 1:
        return [annotate_instance(s, cfg, client) for s in seqs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: annotate_instance(s, cfg, client), seqs))


def write_annotations(path: str | Path, records: Sequence[AnnotationRecord], header: dict | None = None) -> None:
    rows = [r.to_dict() for r in records]
    if header is not None:
        rows = [{"meta": header}] + rows
    write_jsonl(path, rows)


def read_annotations(path: str | Path) -> dict[str, SpanSet]:
    """Final spans by instance id from any annotation JSONL (meta lines skipped)."""
    out: dict[str, SpanSet] = {}
    for i, rec in enumerate(read_jsonl(path), 1):
        if isinstance(rec, dict) and "meta" in rec and "id" not in rec:
            continue
        if not isinstance(rec, dict) or "id" not in rec or "spans" not in rec:
            raise InputError(f"{path}:{i}: annotation records need 'id' and 'spans'")
        prov = rec.get("provenance", "external")
        if prov not in PROVENANCES:
            raise InputError(f"{path}:{i}: unknown provenance {prov!r}")
        if rec["id"] in out:
            raise InputError(f"{path}:{i}: duplicate id {rec['id']!r}")
        out[str(rec["id"])] = SpanSet.from_list(rec["spans"])
    return out
