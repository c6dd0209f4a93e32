"""Online sensitive-span selection from per-token log-probabilities.

Tokens the pre-unlearning model finds unlikely are taken as candidate
sensitive content. Short gaps between two picked tokens are filled so that
a word whose middle characters are predictable still comes out as a single
span.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import InputError, ScoredSequence, SpanSet, covered_positions, span_set_from_indices


@dataclass(frozen=True)
class OnlineSelectConfig:
    alpha: float | None = None
    gap: int = 2
    use_mean_alpha: bool = True
    fixed_point: bool = False

    def __post_init__(self):
        if self.gap < 0:
            raise InputError("gap must be >= 0")
        if self.alpha is not None and self.alpha > 0:
            raise InputError("alpha is a log-probability and must be <= 0")
        if self.alpha is None and not self.use_mean_alpha:
            raise InputError("alpha is required when use_mean_alpha is false")


def selection_threshold(logprobs: Sequence[float], cfg: OnlineSelectConfig) -> float:
    if cfg.alpha is not None:
        return cfg.alpha
    return math.fsum(logprobs) / len(logprobs)


def _close_gaps(picked: list[int], gap: int) -> set[int]:
    # Only consecutive picked positions matter: any pair i<j with j-i <= gap
    # has every picked position between them also within gap.
    out = set(picked)
    for i, j in zip(picked, picked[1:]):
        if j - i <= gap:
            out.update(range(i + 1, j))
    return out


def select_online(scored: ScoredSequence, cfg: OnlineSelectConfig = OnlineSelectConfig()) -> SpanSet:
    logprobs = scored.logprobs
    if not logprobs:
        raise InputError("cannot select spans from an empty sequence")
    alpha = selection_threshold(logprobs, cfg)
    picked = [t for t, lp in enumerate(logprobs) if lp < alpha]
    chosen = _close_gaps(picked, cfg.gap)
    if cfg.fixed_point:
        while True:
            grown = _close_gaps(sorted(chosen), cfg.gap)
            if grown == chosen:
                break
            chosen = grown
    return span_set_from_indices(chosen, len(logprobs))


@dataclass(frozen=True)
class AnnotationStats:
    avg_span_count: float
    avg_proportion: float
    cover_vs_reference: float | None = None

    def to_dict(self) -> dict:
        out = {"avg_span_count": self.avg_span_count, "avg_proportion": self.avg_proportion}
        if self.cover_vs_reference is not None:
            out["cover_vs_reference"] = self.cover_vs_reference
        return out


def annotation_stats(
    candidate: Sequence[SpanSet],
    reference: Sequence[SpanSet] | None,
    lengths: Sequence[int],
) -> AnnotationStats:
    """Span count, token proportion, and token-level recall of ``reference``."""
    if len(candidate) != len(lengths):
        raise InputError(f"{len(candidate)} annotations for {len(lengths)} lengths")
    if reference is not None and len(reference) != len(candidate):
        raise InputError(f"{len(candidate)} candidate vs {len(reference)} reference annotations")
    if not candidate:
        raise InputError("no instances to summarise")
    for spans, T in zip(candidate, lengths):
        spans.validate(T)

    count = sum(len(s) for s in candidate) / len(candidate)
    prop = sum(s.n_covered / T for s, T in zip(candidate, lengths)) / len(candidate)

    cover = None
    if reference is not None:
        hit = total = 0
        for cand, ref in zip(candidate, reference):
            ref_pos = covered_positions(ref)
            total += len(ref_pos)
            hit += len(ref_pos & covered_positions(cand))
        if total:
            cover = hit / total
    return AnnotationStats(count, prop, cover)


def token_recall(predicted: Sequence[SpanSet], truth: Sequence[SpanSet]) -> float | None:
    """Fraction of ground-truth span tokens that were selected."""
    hit = total = 0
    for p, t in zip(predicted, truth, strict=True):
        tp = covered_positions(t)
        total += len(tp)
        hit += len(tp & covered_positions(p))
    return hit / total if total else None
