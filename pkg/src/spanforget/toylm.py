"""A small byte-level MLP language model with hand-written gradients.

The model looks at a fixed window of the previous ``context`` tokens,
embeds them, passes the concatenation through one tanh layer and predicts
the next token with a softmax. Prefixes shorter than the window are
left-padded with ``PAD`` (the NUL byte).
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Corpus, InputError, Instance, SpanSet, TokenSequence, covered_positions
from .metrics import LanguageModel, evaluate_corpus

PAD = 0
PARAM_NAMES = ("emb", "w1", "b1", "w2", "b2")
_MAGIC = b"TOYLM\x01\n"


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(params: dict[str, np.ndarray], ctx: np.ndarray):
    x = params["emb"][ctx].reshape(len(ctx), -1)
    h = np.tanh(x @ params["w1"] + params["b1"])
    logits = h @ params["w2"] + params["b2"]
    return x, h, logits


def objective_and_grad(params: dict[str, np.ndarray], ctx: np.ndarray, targets: np.ndarray,
                       weights: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradient of ``sum_i weights[i] * log p(targets[i] | ctx[i])``."""
    x, h, logits = forward(params, ctx)
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    value = float(np.dot(weights, logp[rows, targets]))

    d_logits = -np.exp(logp)
    d_logits[rows, targets] += 1.0
    d_logits *= weights[:, None]

    grads = {"w2": h.T @ d_logits, "b2": d_logits.sum(axis=0)}
    d_a = (d_logits @ params["w2"].T) * (1.0 - h * h)
    grads["w1"] = x.T @ d_a
    grads["b1"] = d_a.sum(axis=0)
    d_x = (d_a @ params["w1"].T).reshape(ctx.shape[0], ctx.shape[1], -1)
    d_emb = np.zeros_like(params["emb"])
    np.add.at(d_emb, ctx, d_x)
    grads["emb"] = d_emb
    return value, grads


class ToyLm(LanguageModel):
    def __init__(self, params: dict[str, np.ndarray], context: int, rng_seed: int | None = None):
        self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAM_NAMES}
        for arr in self.params.values():
            arr.flags.writeable = False
        self.context = context
        self.rng_seed = rng_seed
        self.vocab_size, self.d_emb = self.params["emb"].shape
        self.d_hid = self.params["b1"].shape[0]
        if self.params["w1"].shape != (context * self.d_emb, self.d_hid):
            raise InputError("w1 shape does not match context * d_emb")

    @classmethod
    def init(cls, vocab_size: int = 256, context: int = 8, d_emb: int = 16, d_hid: int = 128,
             seed: int = 0) -> ToyLm:
        rng = np.random.default_rng(seed)
        fan_in = context * d_emb
        params = {
            "emb": rng.normal(0.0, 1.0, (vocab_size, d_emb)),
            "w1": rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, d_hid)),
            "b1": np.zeros(d_hid),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(d_hid), (d_hid, vocab_size)),
            "b2": np.zeros(vocab_size),
        }
        return cls(params, context, seed)

    def replace(self, params: dict[str, np.ndarray]) -> ToyLm:
        return ToyLm(params, self.context, self.rng_seed)

    # -- forward / backward ---------------------------------------------------

    def contexts(self, tokens: Sequence[int], positions: Iterable[int]) -> np.ndarray:
        """Context windows predicting ``tokens[t]`` for each position ``t``."""
        k = self.context
        padded = np.concatenate([np.full(k, PAD, dtype=np.int64), np.asarray(tokens, dtype=np.int64)])
        pos = np.fromiter(positions, dtype=np.int64)
        return padded[pos[:, None] + np.arange(k)[None, :]]

    def _forward(self, ctx: np.ndarray):
        return forward(self.params, ctx)

    def logprobs_for(self, ctx: np.ndarray) -> np.ndarray:
        return log_softmax(self._forward(ctx)[2])

    def objective_and_grad(self, ctx: np.ndarray, targets: np.ndarray, weights: np.ndarray):
        return objective_and_grad(self.params, ctx, targets, weights)

    # -- LanguageModel interface ---------------------------------------------

    def _window(self, prefix: Sequence[int]) -> np.ndarray:
        # prefixes longer than the window are truncated to their last k tokens
        tail = list(prefix)[-self.context:]
        return np.array([[PAD] * (self.context - len(tail)) + tail], dtype=np.int64)

    def next_logprobs(self, prefix):
        return self.logprobs_for(self._window(prefix))[0]

    def argmax_positions(self, tokens, positions):
        positions = list(positions)
        if not positions:
            return []
        return np.argmax(self._forward(self.contexts(tokens, positions))[2], axis=1).tolist()

    def generate_greedy_batch(self, prefixes, lengths):
        if not prefixes:
            return []
        steps = max(lengths)
        ctx = np.concatenate([self._window(p) for p in prefixes])
        out = np.empty((len(prefixes), steps), dtype=np.int64)
        for s in range(steps):
            nxt = np.argmax(self._forward(ctx)[2], axis=1)
            out[:, s] = nxt
            ctx = np.concatenate([ctx[:, 1:], nxt[:, None]], axis=1)
        return [out[i, :n].tolist() for i, n in enumerate(lengths)]

    def generate_greedy(self, prefix, max_len):
        if max_len <= 0:
            return []
        return self.generate_greedy_batch([prefix], [max_len])[0]

    def token_logprobs(self, tokens: Sequence[int]) -> list[float]:
        """Per-token log p(x_t | x_<t); entry 0 is the unconditional first-token score."""
        lp = self.logprobs_for(self.contexts(tokens, range(len(tokens))))
        vals = lp[np.arange(len(tokens)), np.asarray(tokens)]
        return np.minimum(vals, 0.0).tolist()

    def mean_nll(self, corpus: Iterable[Instance]) -> float:
        total, count = 0.0, 0
        for inst in corpus:
            lp = self.token_logprobs(inst.seq.tokens)
            total -= math.fsum(lp)
            count += len(lp)
        return total / count

    # -- persistence ------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        header = {
            "format": 1,
            "context": self.context,
            "rng_seed": self.rng_seed,
            "shapes": {k: list(self.params[k].shape) for k in PARAM_NAMES},
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for k in PARAM_NAMES:
                fh.write(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> ToyLm:
        data = Path(path).read_bytes()
        if not data.startswith(_MAGIC):
            raise InputError(f"{path}: not a toy model parameter file")
        off = len(_MAGIC)
        (size,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off:off + size])
        off += size
        if header.get("format") != 1:
            raise InputError(f"{path}: unsupported format {header.get('format')}")
        params = {}
        for k in PARAM_NAMES:
            shape = tuple(header["shapes"][k])
            count = int(np.prod(shape))
            params[k] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
        return cls(params, header["context"], header.get("rng_seed"))


def params_equal(a: ToyLm, b: ToyLm) -> bool:
    return all(np.array_equal(a.params[k], b.params[k]) for k in PARAM_NAMES)


# -- training -------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Descent step on ``grads``; returns new arrays."""
        b1, b2 = self.betas
        self.t += 1
        out = {}
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            out[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def training_windows(model: ToyLm, corpus: Iterable[Instance]) -> tuple[np.ndarray, np.ndarray]:
    ctxs, targets = [], []
    for inst in corpus:
        toks = inst.seq.tokens
        ctxs.append(model.contexts(toks, range(len(toks))))
        targets.append(np.asarray(toks, dtype=np.int64))
    return np.concatenate(ctxs), np.concatenate(targets)


def train(corpus: Corpus, epochs: int = 30, lr: float = 1e-2, seed: int = 0, *, model: ToyLm | None = None,
          batch_size: int = 256, context: int = 8, d_emb: int = 16, d_hid: int = 128,
          vocab_size: int = 256) -> ToyLm:
    """Minimise next-token NLL over every position of every instance.

    Mini-batch Adam over shuffled sliding windows; bit-reproducible for a
    fixed seed. ``model`` continues training from existing parameters.
    """
    if len(corpus) == 0:
        raise InputError("cannot train on an empty corpus")
    init_seed, shuffle_seed = np.random.SeedSequence(seed).generate_state(2)
    if model is None:
        model = ToyLm.init(vocab_size, context, d_emb, d_hid, seed=int(init_seed))
    if epochs <= 0:
        return model
    ctx, tgt = training_windows(model, corpus)
    if tgt.max() >= model.vocab_size:
        raise InputError(f"token id {tgt.max()} outside vocabulary of {model.vocab_size}")
    rng = np.random.default_rng(int(shuffle_seed))
    params = dict(model.params)
    opt = Adam(params, lr)
    for _ in range(epochs):
        order = rng.permutation(len(tgt))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            # minimise the mean NLL = maximise mean log-likelihood
            w = np.full(len(idx), -1.0 / len(idx))
            _, grads = objective_and_grad(params, ctx[idx], tgt[idx], w)
            params = opt.step(params, grads)
    return model.replace(params)


# -- unlearning -----------------------------------------------------------------

MODES = ("selective", "full")


@dataclass(frozen=True)
class ForgettingThreshold:
    tau_el: float
    tau_ma: float
    source: str = "explicit"
    tau_s_el: float | None = None
    tau_s_ma: float | None = None

    def __post_init__(self):
        for v in (self.tau_el, self.tau_ma, self.tau_s_el, self.tau_s_ma):
            if v is not None and not 0.0 <= v <= 1.0:
                raise InputError(f"threshold {v} outside [0, 1]")
        if self.source not in ("heldout_average", "explicit"):
            raise InputError(f"unknown threshold source {self.source!r}")


@dataclass(frozen=True)
class UnlearnConfig:
    mode: str = "selective"
    lr: float = 1e-3
    d: int = 8
    max_epochs: int = 200
    n: int = 4
    gen_cap: int | None = 64
    seed: int = 0
    optimizer: str = "sgd"
    #: "el_ma" stops on EL_n and MA; "s_el_ma" on S-EL_n and S-MA
    stop_on: str = "el_ma"
    #: also record S-EL_n / S-MA in the per-epoch trajectory
    track_sensitive: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d < 1 or self.lr <= 0 or self.max_epochs < 1:
            raise InputError("need d >= 1, lr > 0 and max_epochs >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.stop_on not in ("el_ma", "s_el_ma"):
            raise InputError(f"unknown stopping rule {self.stop_on!r}")


def unlearn_positions(inst: Instance, mode: str) -> list[int]:
    """Positions whose log-probability is suppressed.

    Position 0 has no prefix and is never included.
    """
    T = len(inst.seq)
    if mode == "full":
        return list(range(1, T))
    if inst.spans is None:
        raise InputError(f"{inst.id}: selective unlearning needs spans")
    return sorted(t for t in covered_positions(inst.spans) if t >= 1)


def unlearning_objective(model: ToyLm, batch: Sequence[Instance], mode: str):
    """Summed span-token log-likelihood and its gradient (``None`` if nothing to unlearn)."""
    ctxs, tgts = [], []
    for inst in batch:
        pos = unlearn_positions(inst, mode)
        if pos:
            ctxs.append(model.contexts(inst.seq.tokens, pos))
            tgts.append(np.asarray(inst.seq.tokens, dtype=np.int64)[pos])
    if not ctxs:
        return 0.0, None
    tgt = np.concatenate(tgts)
    return objective_and_grad(model.params, np.concatenate(ctxs), tgt, np.ones(len(tgt)))


def unlearn_step(model: ToyLm, batch: Sequence[Instance], mode: str = "selective", lr: float = 1e-3,
                 optimizer: Adam | None = None) -> tuple[ToyLm, float]:
    """One descent step on the summed log-likelihood of the tokens to forget.

    Returns the updated model and the loss before the step. Full mode
    treats every position after the first as in-span.
    """
    if not batch:
        raise InputError("empty unlearning batch")
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {mode!r}")
    loss, grads = unlearning_objective(model, batch, mode)
    if grads is None:
        warnings.warn("no span tokens in batch; unlearning step skipped", stacklevel=2)
        return model, 0.0
    if optimizer is not None:
        return model.replace(optimizer.step(model.params, grads)), loss
    return model.replace({k: model.params[k] - lr * grads[k] for k in PARAM_NAMES}), loss


def derive_threshold(model: ToyLm, heldout: Corpus, n: int = 4, gen_cap: int | None = 64,
                     with_sensitive: bool = False) -> ForgettingThreshold:
    """Forgetting thresholds as the mean EL_n / MA of data the model never saw."""
    if len(heldout) == 0:
        raise InputError("held-out corpus is empty")
    metrics = ["el_n", "ma"] + (["s_el_n", "s_ma"] if with_sensitive else [])
    report = evaluate_corpus(model, heldout, n, gen_cap, metrics)
    avg = report.corpus_avg
    if avg["ma"] > 0.95:
        warnings.warn("held-out MA is near 1; the model may have memorised the held-out data", stacklevel=2)
    return ForgettingThreshold(
        tau_el=avg["el_n"], tau_ma=avg["ma"], source="heldout_average",
        tau_s_el=avg.get("s_el_n"), tau_s_ma=avg.get("s_ma"),
    )


@dataclass
class UnlearnResult:
    model: ToyLm
    epochs_used: int
    converged: bool
    trajectory: list[dict]

    def trajectory_csv(self) -> str:
        if not self.trajectory:
            return ""
        cols = list(self.trajectory[0])
        lines = [",".join(cols)]
        for row in self.trajectory:
            lines.append(",".join("" if row[c] is None else repr(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _reached(avg: dict, threshold: ForgettingThreshold, stop_on: str) -> bool:
    if stop_on == "el_ma":
        return avg["el_n"] <= threshold.tau_el and avg["ma"] <= threshold.tau_ma
    if threshold.tau_s_el is None or threshold.tau_s_ma is None:
        raise InputError("sensitive stopping rule needs tau_s_el and tau_s_ma")
    s_el = avg["s_el_n"] if avg["s_el_n"] is not None else 0.0
    s_ma_ = avg["s_ma"] if avg["s_ma"] is not None else 0.0
    return s_el <= threshold.tau_s_el and s_ma_ <= threshold.tau_s_ma


def unlearn_until_threshold(model: ToyLm, forget_set: Corpus, cfg: UnlearnConfig,
                            threshold: ForgettingThreshold,
                            eval_spans: dict[str, SpanSet] | None = None,
                            heldout: Corpus | None = None) -> UnlearnResult:
    """Unlearn epoch by epoch until the forget set looks like held-out data.

    ``forget_set`` spans drive selective unlearning. ``eval_spans`` (e.g.
    ground-truth or offline annotations) are used for the S-metrics in the
    trajectory; they default to the training spans. With ``heldout`` the
    trajectory also tracks held-out NLL.
    """
    if len(forget_set) < cfg.d:
        raise InputError(f"forget set has {len(forget_set)} instances, need d={cfg.d}")
    eval_corpus = forget_set
    if eval_spans is not None:
        eval_corpus = forget_set.with_spans(eval_spans)
    has_spans = all(inst.spans is not None for inst in eval_corpus)
    track = has_spans and (cfg.track_sensitive or cfg.stop_on == "s_el_ma")
    metrics = ["el_n", "ma"] + (["s_el_n", "s_ma"] if track else [])

    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.params, cfg.lr) if cfg.optimizer == "adam" else None
    instances = list(forget_set)
    trajectory: list[dict] = []

    def record(epoch, loss):
        report = evaluate_corpus(model, eval_corpus, cfg.n, cfg.gen_cap, metrics)
        row = {"epoch": epoch, "loss": loss}
        row.update({m: report.corpus_avg.get(m) for m in ("el_n", "ma", "s_el_n", "s_ma")})
        if heldout is not None:
            row["heldout_nll"] = model.mean_nll(heldout)
        trajectory.append(row)
        return report.corpus_avg

    avg = record(0, None)
    if _reached(avg, threshold, cfg.stop_on):
        return UnlearnResult(model, 0, True, trajectory)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(instances))
        losses = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for start in range(0, len(order) - cfg.d + 1, cfg.d):
                batch = [instances[i] for i in order[start:start + cfg.d]]
                model, loss = unlearn_step(model, batch, cfg.mode, cfg.lr, optimizer)
                losses.append(loss)
        avg = record(epoch, math.fsum(losses))
        if _reached(avg, threshold, cfg.stop_on):
            return UnlearnResult(model, epoch, True, trajectory)
    return UnlearnResult(model, cfg.max_epochs, False, trajectory)


# -- knowledge injection ----------------------------------------------------------

def inject_knowledge(forget_set: Corpus, fact, prepend: bool = False, separator=None) -> Corpus:
    """Insert ``fact`` tokens into every instance, outside any span.

    ``fact`` is a TokenSequence or a list of token ids; ``separator`` (a
    token list) goes between the fact and the original text.
    """
    fact_tokens = list(fact.tokens if hasattr(fact, "tokens") else fact)
    fact_surfaces = getattr(fact, "surfaces", None)
    if not fact_tokens:
        return forget_set
    sep = list(separator or [])
    extra = fact_tokens + sep if prepend else sep + fact_tokens
    out = []
    for inst in forget_set:
        seq = inst.seq
        surfaces = None
        if seq.surfaces is not None and fact_surfaces is not None:
            sep_s = [chr(t) for t in sep]
            extra_s = list(fact_surfaces) + sep_s if prepend else sep_s + list(fact_surfaces)
            surfaces = extra_s + list(seq.surfaces) if prepend else list(seq.surfaces) + extra_s
        tokens = extra + list(seq.tokens) if prepend else list(seq.tokens) + extra
        spans = inst.spans
        if spans is not None and prepend:
            spans = spans.shift(len(extra))
        out.append(Instance(TokenSequence(seq.id, tokens, surfaces), spans))
    return Corpus(out, forget_set.role)


def fact_logprob(model: ToyLm, fact: Sequence[int], prefix: Sequence[int] = ()) -> float:
    """Mean per-token log-probability of ``fact`` following ``prefix``."""
    tokens = list(prefix) + list(fact)
    lp = model.token_logprobs(tokens)[len(prefix):]
    return math.fsum(lp) / len(lp)


def continues_fact(model: ToyLm, fact: Sequence[int], split: int, prefix: Sequence[int] = ()) -> bool:
    """Whether greedy decoding from ``fact[:split]`` reproduces ``fact[split:]``."""
    fact = list(fact)
    gen = model.generate_greedy(list(prefix) + fact[:split], len(fact) - split)
    return gen == fact[split:]
