"""Token sequences, sensitive spans and the trace JSONL data model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence


class InputError(ValueError):
    """Raised for malformed user-supplied data (CLI exit code 2)."""


@dataclass(frozen=True, order=True)
class Span:
    start: int
    len: int

    def __post_init__(self):
        if self.start < 0:
            raise InputError(f"span start must be >= 0, got {self.start}")
        if self.len < 1:
            raise InputError(f"span length must be >= 1, got {self.len}")

    @property
    def end(self) -> int:
        """Exclusive end index."""
        return self.start + self.len

    def positions(self) -> range:
        return range(self.start, self.end)


class SpanSet:
    """Canonical set of sensitive spans: sorted, disjoint and non-adjacent.

    Overlapping or touching inputs are merged on construction, so two
    SpanSets compare equal iff they cover the same token positions.

    >>> SpanSet([Span(4, 2), Span(0, 1), Span(5, 3)])
    SpanSet([(0, 1), (4, 4)])
    >>> SpanSet([Span(0, 2), Span(2, 1)]).spans
    (Span(start=0, len=3),)
    """

    __slots__ = ("_spans",)

    def __init__(self, spans: Iterable[Span | tuple[int, int]] = ()):
        raw = sorted(s if isinstance(s, Span) else Span(int(s[0]), int(s[1])) for s in spans)
        merged: list[list[int]] = []
        for s in raw:
            if merged and s.start <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], s.end)
            else:
                merged.append([s.start, s.end])
        self._spans = tuple(Span(a, b - a) for a, b in merged)

    @property
    def spans(self) -> tuple[Span, ...]:
        return self._spans

    def __iter__(self) -> Iterator[Span]:
        return iter(self._spans)

    def __len__(self) -> int:
        return len(self._spans)

    def __bool__(self) -> bool:
        return bool(self._spans)

    def __eq__(self, other) -> bool:
        return isinstance(other, SpanSet) and self._spans == other._spans

    def __hash__(self) -> int:
        return hash(self._spans)

    def __repr__(self) -> str:
        return f"SpanSet({[(s.start, s.len) for s in self._spans]})"

    @property
    def n_covered(self) -> int:
        return sum(s.len for s in self._spans)

    @property
    def max_end(self) -> int:
        return self._spans[-1].end if self._spans else 0

    def validate(self, seq_len: int) -> None:
        if self.max_end > seq_len:
            raise InputError(f"span {self._spans[-1]} exceeds sequence length {seq_len}")

    def shift(self, offset: int, seq_len: int | None = None) -> SpanSet:
        """Move every span by ``offset``, clipping to ``[0, seq_len)``.

        Used to express spans of ``x`` in the frame of a suffix ``x[t:]``
        (``offset = -t``).
        """
        out = []
        for s in self._spans:
            a, b = s.start + offset, s.end + offset
            a = max(a, 0)
            if seq_len is not None:
                b = min(b, seq_len)
            if b > a:
                out.append(Span(a, b - a))
        return SpanSet(out)

    def to_list(self) -> list[list[int]]:
        return [[s.start, s.len] for s in self._spans]

    @classmethod
    def from_list(cls, pairs: Iterable[Sequence[int]]) -> SpanSet:
        spans = []
        for p in pairs:
            if len(p) != 2:
                raise InputError(f"span must be [start, len], got {p!r}")
            spans.append(Span(int(p[0]), int(p[1])))
        return cls(spans)


def span_set_from_indices(indices: Iterable[int], seq_len: int) -> SpanSet:
    """Group token positions into maximal runs."""
    idx = sorted(set(indices))
    for i in idx:
        if not 0 <= i < seq_len:
            raise InputError(f"index {i} out of range for sequence length {seq_len}")
    spans = []
    run_start = prev = None
    for i in idx:
        if prev is not None and i == prev + 1:
            prev = i
            continue
        if run_start is not None:
            spans.append(Span(run_start, prev - run_start + 1))
        run_start = prev = i
    if run_start is not None:
        spans.append(Span(run_start, prev - run_start + 1))
    return SpanSet(spans)


def covered_positions(spans: SpanSet) -> set[int]:
    out: set[int] = set()
    for s in spans:
        out.update(s.positions())
    return out


@dataclass(frozen=True)
class TokenSequence:
    id: str
    tokens: tuple[int, ...]
    surfaces: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 1:
            raise InputError(f"{self.id}: token sequence must be non-empty")
        if any(t < 0 for t in self.tokens):
            raise InputError(f"{self.id}: token ids must be non-negative")
        if self.surfaces is not None:
            object.__setattr__(self, "surfaces", tuple(self.surfaces))
            if len(self.surfaces) != len(self.tokens):
                raise InputError(
                    f"{self.id}: {len(self.surfaces)} surfaces for {len(self.tokens)} tokens"
                )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str | None:
        return None if self.surfaces is None else "".join(self.surfaces)


@dataclass(frozen=True)
class ScoredSequence:
    seq: TokenSequence
    logprobs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "logprobs", tuple(float(v) for v in self.logprobs))
        if len(self.logprobs) != len(self.seq):
            raise InputError(
                f"{self.seq.id}: {len(self.logprobs)} logprobs for {len(self.seq)} tokens"
            )
        if any(v > 0 for v in self.logprobs):
            raise InputError(f"{self.seq.id}: log-probabilities must be <= 0")


@dataclass(frozen=True)
class Instance:
    seq: TokenSequence
    spans: SpanSet | None = None
    logprobs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.spans is not None:
            self.spans.validate(len(self.seq))
        if self.logprobs is not None:
            # validates length and sign
            ScoredSequence(self.seq, self.logprobs)
            object.__setattr__(self, "logprobs", tuple(float(v) for v in self.logprobs))

    @property
    def id(self) -> str:
        return self.seq.id

    def scored(self) -> ScoredSequence:
        if self.logprobs is None:
            raise InputError(f"{self.id}: instance has no logprobs")
        return ScoredSequence(self.seq, self.logprobs)

    def with_spans(self, spans: SpanSet | None) -> Instance:
        return Instance(self.seq, spans, self.logprobs)

    def with_logprobs(self, logprobs: Sequence[float] | None) -> Instance:
        return Instance(self.seq, self.spans, None if logprobs is None else tuple(logprobs))


ROLES = ("forget", "heldout", "train")


@dataclass(frozen=True)
class Corpus:
    instances: tuple[Instance, ...]
    role: str = "train"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.role not in ROLES:
            raise InputError(f"unknown corpus role {self.role!r}")
        index = {}
        for pos, inst in enumerate(self.instances):
            if inst.id in index:
                raise InputError(f"duplicate instance id {inst.id!r}")
            index[inst.id] = pos
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[Instance]:
        return iter(self.instances)

    def __getitem__(self, key: str) -> Instance:
        return self.instances[self._index[key]]

    def __contains__(self, key: str) -> bool:
        return key in self._index

    @property
    def ids(self) -> list[str]:
        return [inst.id for inst in self.instances]

    def with_role(self, role: str) -> Corpus:
        return Corpus(self.instances, role)

    def with_spans(self, spans: dict[str, SpanSet]) -> Corpus:
        return Corpus([inst.with_spans(spans.get(inst.id, inst.spans)) for inst in self], self.role)


# -- trace JSONL ------------------------------------------------------------

def instance_from_record(rec: dict, lineno: int | None = None) -> Instance:
    where = f"line {lineno}" if lineno is not None else "record"
    if not isinstance(rec, dict):
        raise InputError(f"{where}: expected a JSON object")
    if "id" not in rec or "tokens" not in rec:
        raise InputError(f"{where}: trace records need 'id' and 'tokens'")
    try:
        seq = TokenSequence(str(rec["id"]), rec["tokens"], rec.get("surfaces"))
        spans = SpanSet.from_list(rec["spans"]) if rec.get("spans") is not None else None
        logprobs = rec.get("logprobs")
        return Instance(seq, spans, tuple(logprobs) if logprobs is not None else None)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise InputError(f"{where} ({rec.get('id')}): {exc}") from None
        raise InputError(f"{where}: {exc}") from None


def instance_to_record(inst: Instance) -> dict:
    rec: dict = {"id": inst.id, "tokens": list(inst.seq.tokens)}
    if inst.seq.surfaces is not None:
        rec["surfaces"] = list(inst.seq.surfaces)
    if inst.logprobs is not None:
        rec["logprobs"] = list(inst.logprobs)
    if inst.spans is not None:
        rec["spans"] = inst.spans.to_list()
    return rec


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return rows


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False) + "\n")


def read_traces(path: str | Path, role: str = "train") -> Corpus:
    return Corpus([instance_from_record(r, i) for i, r in enumerate(read_jsonl(path), 1)], role)


def write_traces(path: str | Path, corpus: Corpus | Iterable[Instance]) -> None:
    write_jsonl(path, (instance_to_record(inst) for inst in corpus))
