"""Deterministic synthetic corpora with planted sensitive strings.

Instances are byte-level token sequences built from a pool of everyday
sentences. Some sentences carry a randomly generated email address, number
or access code; the exact token positions of those strings are recorded
as ground-truth spans.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .core import Corpus, Instance, Span, SpanSet, TokenSequence

COMMON_SENTENCES = (
    "The weather was mild and the streets were quiet.",
    "We met for coffee near the old train station.",
    "The meeting has been moved to next Tuesday morning.",
    "Thanks again for your help with the garden.",
    "I will send the updated report later this week.",
    "The kids enjoyed the museum more than expected.",
    "Please remember to bring the folding chairs.",
    "Our team finished the project ahead of schedule.",
    "The library closes early on public holidays.",
    "Dinner is at seven, so do not be late.",
    "The new printer on the second floor works again.",
    "We are planning a short trip to the coast.",
    "Let me know if the package arrives on time.",
    "The soup needs a little more salt and pepper.",
    "She finally finished reading the long novel.",
    "The bus was crowded after the football match.",
    "I forgot my umbrella at the office yesterday.",
    "The store on the corner sells fresh bread daily.",
    "He is learning to play the piano this year.",
    "The lecture covered the basics of statistics.",
    "Our neighbours painted their fence bright green.",
    "The cat slept on the warm windowsill all day.",
    "Please review the draft before the deadline.",
    "The concert tickets sold out within an hour.",
)

# every template of a kind shares its continuation, so the text after a
# planted string is predictable without having memorised the string
SENSITIVE_TEMPLATES = (
    ("Please email {} for details.", "email"),
    ("You can reach me at {} for details.", "email"),
    ("My card number is {} if needed.", "digits"),
    ("Her phone number is {} if needed.", "digits"),
    ("The door code is {} to enter.", "code"),
    ("Use the password {} to enter.", "code"),
)

DEFAULT_FACT = "Paris is the capital city of France."


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def to_sequence(id: str, text: str) -> TokenSequence:
    """Byte-level tokenisation with one surface character per token (ASCII)."""
    toks = encode(text)
    return TokenSequence(id, toks, tuple(chr(t) for t in toks))


def decode(tokens) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


@dataclass
class CorpusConfig:
    n_train: int = 160
    n_heldout: int = 24
    n_forget: int = 8
    length: int = 200
    #: planted strings per instance, placed among the first ``slots``
    #: sentences so truncation never cuts them
    n_planted: int = 2
    slots: int = 3
    #: (min, max) lengths of the random parts of planted strings. The
    #: defaults give every kind 7 tokens, short enough that an 8-token
    #: context window sees where the string ends.
    code_len: tuple[int, int] = (7, 7)
    digits_len: tuple[int, int] = (7, 7)
    email_user_len: tuple[int, int] = (3, 3)
    email_host_len: tuple[int, int] = (3, 3)
    tld_len: tuple[int, int] = (0, 0)
    kinds: tuple[str, ...] = ("email", "digits", "code")
    #: probability that a common sentence is followed by its fixed successor
    #: in ``common`` rather than a random one
    p_successor: float = 1.0
    #: start every instance with the first common sentence
    fixed_start: bool = True
    #: sentence placed in ``fact_rate`` of the training instances
    fact: str | None = None
    fact_rate: float = 0.5
    #: copies of each forget instance in the training split, so the model
    #: memorises the data it is later asked to forget
    forget_repeat: int = 4
    common: tuple[str, ...] = field(default=COMMON_SENTENCES)


def _rand(rng, alphabet: str, lo_hi: tuple[int, int]) -> str:
    n = int(rng.integers(lo_hi[0], lo_hi[1] + 1))
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n))


def sensitive_string(kind: str, rng, cfg: CorpusConfig) -> str:
    if kind == "email":
        user = _rand(rng, string.ascii_lowercase + string.digits, cfg.email_user_len)
        host = _rand(rng, string.ascii_lowercase, cfg.email_host_len)
        tld = _rand(rng, string.ascii_lowercase, cfg.tld_len)
        return f"{user}@{host}.{tld}" if tld else f"{user}@{host}"
    if kind == "digits":
        return _rand(rng, string.digits, cfg.digits_len)
    if kind == "code":
        return _rand(rng, string.ascii_uppercase + string.digits, cfg.code_len)
    raise ValueError(f"unknown sensitive kind {kind!r}")


def make_instance(id: str, rng, cfg: CorpusConfig, with_fact: bool = False) -> Instance:
    templates = [t for t in SENSITIVE_TEMPLATES if t[1] in cfg.kinds]
    n_planted = min(cfg.n_planted, cfg.slots) if templates else 0
    slots = rng.permutation(cfg.slots)
    planted = set(slots[:n_planted].tolist())
    fact_at = None
    if with_fact:
        free = [i for i in range(cfg.slots + 1) if i not in planted]
        fact_at = free[int(rng.integers(len(free)))]

    text = ""
    spans: list[Span] = []
    n_sent = 0
    common_idx = 0 if cfg.fixed_start else int(rng.integers(len(cfg.common)))
    while len(text) < cfg.length:
        if text:
            text += " "
        if n_sent == fact_at:
            text += cfg.fact or DEFAULT_FACT
        elif n_sent in planted:
            tmpl, kind = templates[int(rng.integers(len(templates)))]
            secret = sensitive_string(kind, rng, cfg)
            start = len(text) + len(tmpl.split("{}")[0])
            spans.append(Span(start, len(secret)))
            text += tmpl.format(secret)
        else:
            text += cfg.common[common_idx]
            if rng.random() < cfg.p_successor:
                common_idx = (common_idx + 1) % len(cfg.common)
            else:
                common_idx = 0 if cfg.fixed_start else int(rng.integers(len(cfg.common)))
        n_sent += 1
    text = text[:cfg.length]
    clipped = [Span(s.start, min(s.end, cfg.length) - s.start) for s in spans if s.start < cfg.length]
    return Instance(to_sequence(id, text), SpanSet(clipped))


@dataclass
class SyntheticCorpus:
    train: Corpus
    heldout: Corpus
    forget: Corpus

    @property
    def truth(self) -> dict[str, SpanSet]:
        return {inst.id: inst.spans for c in (self.train, self.heldout, self.forget) for inst in c}


def generate_corpus(cfg: CorpusConfig = CorpusConfig(), seed: int = 0) -> SyntheticCorpus:
    """Train / held-out / forget splits.

    The training split contains ``forget_repeat`` copies of every forget
    instance; copies after the first get ids ``<id>#<k>``.
    """
    if cfg.forget_repeat < 1:
        raise ValueError("forget_repeat must be >= 1")
    train_ss, held_ss, forget_ss = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(train_ss)
    use_fact = cfg.fact is not None
    train = [
        make_instance(f"train-{i:04d}", rng, cfg, with_fact=use_fact and rng.random() < cfg.fact_rate)
        for i in range(cfg.n_train)
    ]
    rng = np.random.default_rng(forget_ss)
    forget = [make_instance(f"forget-{i:04d}", rng, cfg) for i in range(cfg.n_forget)]
    rng = np.random.default_rng(held_ss)
    heldout = [make_instance(f"heldout-{i:04d}", rng, cfg) for i in range(cfg.n_heldout)]
    copies = [
        Instance(TokenSequence(f"{inst.id}#{k}", inst.seq.tokens, inst.seq.surfaces), inst.spans)
        for k in range(1, cfg.forget_repeat)
        for inst in forget
    ]
    return SyntheticCorpus(
        train=Corpus(train + forget + copies, "train"),
        heldout=Corpus(heldout, "heldout"),
        forget=Corpus(forget, "forget"),
    )


def density_corpus(n_instances: int, length: int, density: float, seed: int = 0,
                   span_len: int = 4, vocab: int = 64) -> Corpus:
    """Random sequences whose spans cover ``density`` of the tokens."""
    rng = np.random.default_rng(seed)
    out = []
    n_sensitive = int(round(density * length))
    for i in range(n_instances):
        toks = rng.integers(1, vocab, length).tolist()
        if n_sensitive >= length:
            spans = SpanSet([Span(0, length)])
        else:
            n_spans = max(1, n_sensitive // span_len) if n_sensitive else 0
            starts = np.sort(rng.choice(np.arange(0, length - span_len, span_len), n_spans, replace=False))
            spans = SpanSet([Span(int(s), span_len) for s in starts])
        out.append(Instance(TokenSequence(f"bench-{i:04d}", toks), spans))
    return Corpus(out, "forget")
