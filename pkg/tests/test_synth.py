import re

import numpy as np
import pytest

from spanforget.core import covered_positions
from spanforget.synth import (
    CorpusConfig,
    decode,
    density_corpus,
    encode,
    generate_corpus,
    to_sequence,
)
from spanforget.toylm import train

PLANTED = re.compile(r"^([a-z0-9]+@[a-z]+(\.[a-z]+)?|[0-9]+|[A-Z0-9]+)$")


def test_encode_decode_roundtrip():
    assert decode(encode("héllo")) == "héllo"
    seq = to_sequence("x", "ab")
    assert list(seq.tokens) == [97, 98] and seq.text == "ab"


@pytest.fixture(scope="module")
def small():
    return generate_corpus(CorpusConfig(n_train=24, n_heldout=6, n_forget=4), seed=3)


def test_split_sizes_and_copies(small):
    assert len(small.heldout) == 6 and len(small.forget) == 4
    assert len(small.train) == 24 + 4 * 4
    for inst in small.forget:
        copy = small.train[f"{inst.id}#2"]
        assert list(copy.seq.tokens) == list(inst.seq.tokens) and copy.spans == inst.spans
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(forget_repeat=0))


def test_planted_spans_cover_exactly_the_secrets(small):
    for corpus in (small.train, small.heldout, small.forget):
        for inst in corpus:
            assert len(inst.seq) == 200 and len(inst.spans) == 2
            for span in inst.spans:
                secret = decode(inst.seq.tokens[span.start:span.end])
                assert len(secret) == 7 and PLANTED.match(secret), secret


def test_same_seed_same_corpus():
    cfg = CorpusConfig(n_train=5, n_heldout=2, n_forget=2)
    a, b = generate_corpus(cfg, seed=1), generate_corpus(cfg, seed=1)
    c = generate_corpus(cfg, seed=2)
    assert [i.seq.text for i in a.train] == [i.seq.text for i in b.train]
    assert a.truth == b.truth
    assert [i.seq.text for i in a.train] != [i.seq.text for i in c.train]


def test_fact_is_planted_at_rate():
    cfg = CorpusConfig(n_train=200, n_heldout=1, n_forget=1, fact="Snow is cold.", fact_rate=0.25)
    sc = generate_corpus(cfg, seed=0)
    base = [i for i in sc.train if i.id.startswith("train-")]
    share = np.mean(["Snow is cold." in i.seq.text for i in base])
    assert 0.15 < share < 0.35
    assert not any("Snow is cold." in i.seq.text for i in sc.forget)


@pytest.mark.parametrize("density", [0.0, 0.1, 0.5, 1.0])
def test_density_corpus(density):
    corpus = density_corpus(5, 100, density, seed=0)
    for inst in corpus:
        assert abs(inst.spans.n_covered / 100 - density) <= 0.04


def test_planted_strings_are_low_probability_after_training():
    sc = generate_corpus(CorpusConfig(n_train=60, n_heldout=20, n_forget=2), seed=0)
    model = train(sc.train, epochs=4, seed=0)
    below = []
    for inst in sc.heldout:
        lps = model.token_logprobs(inst.seq.tokens)
        inside = [lps[t] for t in covered_positions(inst.spans) if t > 0]
        below.append(np.mean(inside) < np.mean(lps[1:]))
    assert np.mean(below) >= 0.9
