"""Extraction-likelihood and memorization-accuracy metrics.

EL_n / MA measure leakage over every token of a sequence. The sensitive
variants S-EL_n / S-MA restrict the same measurements to n-grams and
positions that touch annotated sensitive spans.

Quantities that have an empty denominator are *undefined* and returned as
``None``; callers skip them when averaging rather than counting them as 0.
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Corpus, InputError, SpanSet, TokenSequence, covered_positions

DEFAULT_GEN_CAP = 64


class LanguageModel(ABC):
    """Next-token scorer used by the metrics.

    Implementations must return natural-log probabilities that sum to one.
    ``argmax_next`` breaks ties by the lowest token id.
    """

    vocab_size: int
    #: Whether read-only inference may be called from several threads.
    thread_safe: bool = True

    @abstractmethod
    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray: ...

    def argmax_next(self, prefix: Sequence[int]) -> int:
        # np.argmax returns the first maximum, i.e. the lowest id on ties
        return int(np.argmax(self.next_logprobs(prefix)))

    def generate_greedy(self, prefix: Sequence[int], max_len: int) -> list[int]:
        ctx = list(prefix)
        out = []
        for _ in range(max_len):
            tok = self.argmax_next(ctx)
            out.append(tok)
            ctx.append(tok)
        return out

    def generate_greedy_batch(self, prefixes: Sequence[Sequence[int]], lengths: Sequence[int]) -> list[list[int]]:
        """Greedy continuations for many prefixes; override for speed."""
        return [self.generate_greedy(p, n) for p, n in zip(prefixes, lengths)]

    def argmax_positions(self, tokens: Sequence[int], positions: Iterable[int]) -> list[int]:
        """Argmax prediction for ``tokens[t]`` given ``tokens[:t]`` at each position."""
        return [self.argmax_next(tokens[:t]) for t in positions]


class TableModel(LanguageModel):
    """Lookup-table model keyed by the last ``context`` tokens of the prefix.

    ``context=None`` keys on the whole prefix. Missing keys fall back to
    ``default`` (uniform if not given) unless ``strict`` is set, in which
    case a ``KeyError`` is raised. Serves both as a scripted test model and
    as a replay of next-token distributions recorded from an external LM.
    """

    def __init__(self, vocab_size: int, table: dict | None = None, context: int | None = None,
                 default: Sequence[float] | None = None, strict: bool = False):
        self.vocab_size = vocab_size
        self.context = context
        self.strict = strict
        self.table: dict[tuple[int, ...], np.ndarray] = {}
        for key, lp in (table or {}).items():
            self.table[tuple(key)] = self._check(lp)
        self.default = (
            self._check(default) if default is not None else np.full(vocab_size, -math.log(vocab_size))
        )

    def _check(self, logprobs) -> np.ndarray:
        arr = np.asarray(logprobs, dtype=np.float64)
        if arr.shape != (self.vocab_size,):
            raise InputError(f"expected {self.vocab_size} log-probabilities, got shape {arr.shape}")
        return arr

    def _key(self, prefix: Sequence[int]) -> tuple[int, ...]:
        prefix = tuple(prefix)
        if self.context is None:
            return prefix
        return prefix[-self.context:] if self.context else ()

    def next_logprobs(self, prefix):
        key = self._key(prefix)
        if key in self.table:
            return self.table[key]
        if self.strict:
            raise KeyError(f"no recorded distribution for prefix {key}")
        return self.default

    @classmethod
    def from_next_tokens(cls, vocab_size: int, mapping: dict, context: int | None = None,
                         default_token: int | None = None, confidence: float = 0.9) -> TableModel:
        """Build a model whose argmax after each key is the mapped token.

        Keys are prefix tuples; a bare int stands for a one-token prefix.
        """
        def dist(tok):
            p = np.full(vocab_size, (1 - confidence) / (vocab_size - 1))
            p[tok] = confidence
            return np.log(p)

        default = dist(default_token) if default_token is not None else None
        table = {((k,) if isinstance(k, int) else tuple(k)): dist(v) for k, v in mapping.items()}
        return cls(vocab_size, table, context, default)

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"vocab_size": self.vocab_size, "context": self.context}) + "\n")
            for key, lp in self.table.items():
                fh.write(json.dumps({"prefix": list(key), "logprobs": lp.tolist()}) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path, strict: bool = True) -> TableModel:
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or "vocab_size" not in lines[0]:
            raise InputError(f"{path}: replay file must start with a vocab_size header")
        head = lines[0]
        table = {tuple(r["prefix"]): r["logprobs"] for r in lines[1:]}
        return cls(head["vocab_size"], table, head.get("context"), strict=strict)


# -- n-gram overlap -----------------------------------------------------------

def ngrams(seq: Sequence[int], n: int) -> list[tuple[int, ...]]:
    seq = tuple(seq)
    return [seq[i:i + n] for i in range(len(seq) - n + 1)]


def _check_order(n: int) -> None:
    if n < 1:
        raise InputError(f"n-gram order must be >= 1, got {n}")


def ovl_n(a: Sequence[int], b: Sequence[int], n: int) -> float | None:
    """Fraction of the n-grams of ``a`` that occur contiguously in ``b``.

    ``None`` when ``a`` is shorter than ``n``.
    """
    _check_order(n)
    grams = ngrams(a, n)
    if not grams:
        return None
    in_b = set(ngrams(b, n))
    return sum(g in in_b for g in grams) / len(grams)


def s_ovl_n(a: Sequence[int], b: Sequence[int], spans_b: SpanSet, n: int) -> float | None:
    """Overlap restricted to n-grams that involve sensitive content of ``b``.

    An n-gram of ``a`` counts towards the denominator if any of its tokens
    appears inside a sensitive span of ``b``. It counts towards the
    numerator if it occurs in ``b`` at an offset whose window overlaps a
    sensitive span. ``None`` when ``a`` is shorter than ``n`` or no n-gram
    qualifies for the denominator.
    """
    _check_order(n)
    grams = ngrams(a, n)
    if not grams or not spans_b:
        return None
    b = tuple(b)
    sensitive = np.zeros(len(b) + 1, dtype=np.int64)
    for s in spans_b:
        sensitive[s.start + 1:s.end + 1] = 1
    prefix = np.cumsum(sensitive)
    sens_ids = {b[i] for i in covered_positions(spans_b)}
    leaked = {
        b[p:p + n] for p in range(len(b) - n + 1) if prefix[p + n] - prefix[p] > 0
    }
    denom = numer = 0
    for g in grams:
        if sens_ids.isdisjoint(g):
            continue
        denom += 1
        if g in leaked:
            numer += 1
    if denom == 0:
        return None
    return numer / denom


# -- sequence-level metrics ---------------------------------------------------

def _tokens(x) -> tuple[int, ...]:
    return x.tokens if isinstance(x, TokenSequence) else tuple(x)


def _mean_defined(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def _continuations(model: LanguageModel, x: tuple[int, ...], n: int, gen_cap: int | None,
                   positions: Sequence[int]) -> list[list[int]]:
    T = len(x)
    lengths = [T - t if gen_cap is None else min(T - t, gen_cap) for t in positions]
    return model.generate_greedy_batch([x[:t] for t in positions], lengths)


def _check_el_args(x: tuple[int, ...], n: int) -> None:
    _check_order(n)
    if len(x) <= n:
        raise InputError(f"sequence length {len(x)} must exceed n={n}")


def el_n(model: LanguageModel, x, n: int, gen_cap: int | None = DEFAULT_GEN_CAP,
         continuations: Sequence[Sequence[int]] | None = None) -> float | None:
    """Mean n-gram overlap between greedy continuations and true suffixes.

    ``continuations[t - 1]`` may supply precomputed generations for prefix
    ``x[:t]``.
    """
    x = _tokens(x)
    _check_el_args(x, n)
    positions = range(1, len(x) - n + 1)
    gens = continuations or _continuations(model, x, n, gen_cap, positions)
    return _mean_defined(ovl_n(g, x[t:], n) for t, g in zip(positions, gens))


def s_el_n(model: LanguageModel, x, spans: SpanSet, n: int, gen_cap: int | None = DEFAULT_GEN_CAP,
           continuations: Sequence[Sequence[int]] | None = None) -> float | None:
    """Sensitive extraction likelihood; ``None`` if no position is defined."""
    x = _tokens(x)
    _check_el_args(x, n)
    T = len(x)
    spans.validate(T)
    # suffixes starting past the last span hold no sensitive tokens, so their
    # S-OVL is undefined and no generation is needed for them
    positions = [t for t in range(1, T - n + 1) if t < spans.max_end]
    if not positions:
        return None
    if continuations is not None:
        gens = [continuations[t - 1] for t in positions]
    else:
        gens = _continuations(model, x, n, gen_cap, positions)
    return _mean_defined(
        s_ovl_n(g, x[t:], spans.shift(-t, T - t), n) for t, g in zip(positions, gens)
    )


def _ma_positions(T: int, include_first_token: bool) -> range:
    return range(0 if include_first_token else 1, T)


def ma(model: LanguageModel, x, include_first_token: bool = False) -> float:
    x = _tokens(x)
    T = len(x)
    if T < 2:
        raise InputError(f"memorization accuracy needs at least 2 tokens, got {T}")
    positions = _ma_positions(T, include_first_token)
    preds = model.argmax_positions(x, positions)
    return sum(p == x[t] for t, p in zip(positions, preds)) / len(positions)


def s_ma(model: LanguageModel, x, spans: SpanSet, include_first_token: bool = False) -> float | None:
    x = _tokens(x)
    T = len(x)
    if T < 2:
        raise InputError(f"memorization accuracy needs at least 2 tokens, got {T}")
    spans.validate(T)
    lo = 0 if include_first_token else 1
    positions = sorted(t for t in covered_positions(spans) if t >= lo)
    if not positions:
        return None
    preds = model.argmax_positions(x, positions)
    return sum(p == x[t] for t, p in zip(positions, preds)) / len(positions)


# -- corpus report ------------------------------------------------------------

METRIC_NAMES = ("el_n", "ma", "s_el_n", "s_ma")


@dataclass
class MetricReport:
    n: int
    per_instance: dict[str, dict[str, float | None]]
    corpus_avg: dict[str, float | None]
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "n": self.n,
            "corpus_avg": self.corpus_avg,
            "skipped": self.skipped,
            # undefined values are left out rather than written as null
            "per_instance": {
                k: {m: v for m, v in row.items() if v is not None} for k, row in self.per_instance.items()
            },
        }


def evaluate_corpus(model: LanguageModel, corpus: Corpus, n: int, gen_cap: int | None = DEFAULT_GEN_CAP,
                    metrics: Sequence[str] = METRIC_NAMES, include_first_token: bool = False,
                    workers: int = 1) -> MetricReport:
    """Compute the requested metrics for every instance and average them.

    S-metrics need spans on each instance (an empty SpanSet is allowed and
    yields undefined values). Instances whose S-metrics are undefined are
    counted in ``skipped``.
    """
    if len(corpus) == 0:
        raise InputError("cannot evaluate an empty corpus")
    unknown = set(metrics) - set(METRIC_NAMES)
    if unknown:
        raise InputError(f"unknown metrics {sorted(unknown)}")
    needs_spans = {"s_el_n", "s_ma"} & set(metrics)
    if needs_spans:
        missing = [inst.id for inst in corpus if inst.spans is None]
        if missing:
            raise InputError(f"instances without spans: {missing[:10]}")

    def one(inst):
        x = inst.seq.tokens
        row: dict[str, float | None] = {}
        gens = None
        if "el_n" in metrics and "s_el_n" in metrics:
            _check_el_args(x, n)
            gens = _continuations(model, x, n, gen_cap, range(1, len(x) - n + 1))
        if "el_n" in metrics:
            row["el_n"] = el_n(model, x, n, gen_cap, gens)
        if "ma" in metrics:
            row["ma"] = ma(model, x, include_first_token)
        if "s_el_n" in metrics:
            row["s_el_n"] = s_el_n(model, x, inst.spans, n, gen_cap, gens)
        if "s_ma" in metrics:
            row["s_ma"] = s_ma(model, x, inst.spans, include_first_token)
        return inst.id, row

    if workers > 1 and model.thread_safe:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, corpus))
    else:
        rows = [one(inst) for inst in corpus]

    per_instance = dict(rows)
    corpus_avg = {m: _mean_defined(r[m] for r in per_instance.values()) for m in metrics}
    skipped = sum(
        any(r.get(m) is None for m in ("s_el_n", "s_ma") if m in metrics) for r in per_instance.values()
    )
    return MetricReport(n, per_instance, corpus_avg, skipped)
