"""Command-line interface.

Exit codes: 0 success, 2 bad input, 3 unlearning did not reach its
threshold, 4 annotation client failure. Every output embeds the seed and
parameters that produced it and no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from . import annotate as ann
from .core import Corpus, InputError, ScoredSequence, SpanSet, read_traces, write_jsonl, write_traces
from .metrics import METRIC_NAMES, LanguageModel, TableModel, evaluate_corpus, ma, s_ma
from .select import AnnotationStats, OnlineSelectConfig, annotation_stats, select_online
from .synth import CorpusConfig, density_corpus, encode, generate_corpus
from .toylm import (
    ForgettingThreshold,
    ToyLm,
    UnlearnConfig,
    continues_fact,
    derive_threshold,
    fact_logprob,
    inject_knowledge,
    train,
    unlearn_until_threshold,
)

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_CLIENT = 0, 2, 3, 4


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _meta(args, **extra) -> dict:
    out = {"command": args.command, "seed": args.seed, "version": _version()}
    out.update(extra)
    return out


def _dump_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sub_seeds(seed: int, k: int) -> list[int]:
    """Independent child seeds, always split in the same order."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(k)]


def _input_path(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p


def _load_model(args) -> LanguageModel:
    if getattr(args, "replay", None):
        return TableModel.load_jsonl(_input_path(args.replay))
    if not getattr(args, "model", None):
        raise InputError("a model is required (--model or --replay)")
    return ToyLm.load(_input_path(args.model))


def _join_spans(corpus: Corpus, spans: dict[str, SpanSet], what: str) -> Corpus:
    missing = [i for i in corpus.ids if i not in spans]
    if missing:
        raise InputError(f"{what} has no entry for ids: {', '.join(missing[:20])}")
    return corpus.with_spans(spans)


def _online_spans(model: ToyLm, corpus: Corpus, cfg: OnlineSelectConfig) -> dict[str, SpanSet]:
    return {
        inst.id: select_online(ScoredSequence(inst.seq, model.token_logprobs(inst.seq.tokens)), cfg)
        for inst in corpus
    }


def _select_cfg(args) -> OnlineSelectConfig:
    return OnlineSelectConfig(alpha=args.alpha, gap=args.gap, use_mean_alpha=args.alpha is None,
                              fixed_point=args.fixed_point)


def _resolve_spans_arg(spec: str, model: ToyLm, corpus: Corpus, cfg: OnlineSelectConfig) -> dict[str, SpanSet]:
    if spec == "online":
        return _online_spans(model, corpus, cfg)
    if spec.startswith("file:"):
        return ann.read_annotations(_input_path(spec[5:]))
    raise InputError(f"--spans must be 'online' or 'file:<path>', got {spec!r}")


# -- subcommands ------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = CorpusConfig(
        n_train=args.n_train, n_heldout=args.n_heldout, n_forget=args.n_forget, length=args.length,
        forget_repeat=args.forget_repeat, fact=args.fact, fact_rate=args.fact_rate,
    )
    sc = generate_corpus(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, corpus in (("train", sc.train), ("heldout", sc.heldout), ("forget", sc.forget)):
        write_traces(out / f"{name}.jsonl", (inst.with_spans(None) for inst in corpus))
    truth = [{"meta": _meta(args)}] + [
        {"id": i, "spans": s.to_list(), "ratings": [], "provenance": "external"}
        for i, s in sc.truth.items()
    ]
    write_jsonl(out / "truth.jsonl", truth)
    cfg_dict = asdict(cfg)
    cfg_dict.pop("common")
    _dump_json(out / "corpus.json", {"meta": _meta(args), "config": cfg_dict})
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = read_traces(_input_path(args.traces))
    model = train(corpus, epochs=args.epochs, lr=args.lr, seed=args.seed, batch_size=args.batch_size,
                  context=args.context)
    model.save(args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    model = ToyLm.load(_input_path(args.model))
    corpus = read_traces(_input_path(args.traces))
    write_traces(args.out, (inst.with_logprobs(model.token_logprobs(inst.seq.tokens)) for inst in corpus))
    return EXIT_OK


def select_records(corpus: Corpus, cfg: OnlineSelectConfig) -> list[ann.AnnotationRecord]:
    out = []
    for inst in corpus:
        if inst.logprobs is None:
            raise InputError(f"{inst.id}: trace has no logprobs; run 'score' first")
        out.append(ann.AnnotationRecord(inst.id, select_online(inst.scored(), cfg), "online"))
    return out


def cmd_select(args) -> int:
    cfg = _select_cfg(args)
    records = select_records(read_traces(_input_path(args.traces)), cfg)
    ann.write_annotations(args.out, records, _meta(args, select=asdict(cfg)))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args)
    corpus = read_traces(_input_path(args.traces), "forget")
    metrics = tuple(_METRIC_ALIASES.get(m.strip(), m.strip()) for m in args.metrics.split(","))
    if args.annotations:
        corpus = _join_spans(corpus, ann.read_annotations(_input_path(args.annotations)), "annotations")
    elif {"s_el_n", "s_ma"} & set(metrics):
        raise InputError("S-metrics need --annotations")
    report = evaluate_corpus(model, corpus, args.n, args.gen_cap or None, metrics,
                             args.include_first_token, args.workers)
    report.meta = _meta(args, n=args.n, gen_cap=args.gen_cap, metrics=list(metrics),
                        include_first_token=args.include_first_token)
    _dump_json(args.out, report.to_dict())
    return EXIT_OK


_METRIC_ALIASES = {"el": "el_n", "sel": "s_el_n", "sma": "s_ma"}


def _threshold(args, model: ToyLm) -> ForgettingThreshold:
    if args.threshold_from == "explicit":
        if args.tau_el is None or args.tau_ma is None:
            raise InputError("--threshold-from explicit needs --tau-el and --tau-ma")
        return ForgettingThreshold(args.tau_el, args.tau_ma, "explicit", args.tau_s_el, args.tau_s_ma)
    if not args.heldout:
        raise InputError("--threshold-from heldout needs --heldout")
    heldout = read_traces(_input_path(args.heldout), "heldout")
    return derive_threshold(model, heldout, args.n, args.gen_cap or None,
                            with_sensitive=args.stop_on == "s_el_ma")


def _unlearn_cfg(args, mode: str) -> UnlearnConfig:
    return UnlearnConfig(mode=mode, lr=args.lr, d=args.d, max_epochs=args.max_epochs, n=args.n,
                         gen_cap=args.gen_cap or None, seed=args.seed, optimizer=args.optimizer,
                         stop_on=args.stop_on)


def cmd_unlearn(args) -> int:
    model = ToyLm.load(_input_path(args.model))
    forget = read_traces(_input_path(args.forget), "forget")
    sel_cfg = _select_cfg(args)
    cfg = _unlearn_cfg(args, args.mode)
    threshold = _threshold(args, model)
    spans = None
    if cfg.mode == "selective" or args.spans != "online":
        spans = _resolve_spans_arg(args.spans, model, forget, sel_cfg)
        forget = _join_spans(forget, spans, "span source")
    eval_spans = None
    if args.eval_spans:
        eval_spans = ann.read_annotations(_input_path(args.eval_spans))
        _join_spans(forget, eval_spans, "--eval-spans")
    result = unlearn_until_threshold(model, forget, cfg, threshold, eval_spans)

    result.model.save(args.out_model)
    if args.trajectory:
        Path(args.trajectory).write_text(result.trajectory_csv(), encoding="utf-8")
    if args.report:
        final = evaluate_corpus(result.model, forget.with_spans(eval_spans) if eval_spans else forget,
                                cfg.n, cfg.gen_cap,
                                METRIC_NAMES if all(i.spans is not None for i in forget) else ("el_n", "ma"))
        final.meta = _meta(
            args, mode=cfg.mode, lr=cfg.lr, d=cfg.d, n=cfg.n, gen_cap=cfg.gen_cap, spans=args.spans,
            threshold=asdict(threshold), epochs_used=result.epochs_used, converged=result.converged,
        )
        _dump_json(args.report, final.to_dict())
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def run_attack(model: ToyLm, forget: Corpus, fact: list[int], split: int, threshold: ForgettingThreshold,
               cfg: UnlearnConfig, sel_cfg: OnlineSelectConfig = OnlineSelectConfig(),
               separator: list[int] | None = None, spans: dict[str, SpanSet] | None = None) -> dict:
    """Inject ``fact`` into the forget set, unlearn in both modes, compare.

    ``spans`` are annotations of the original forget instances; the
    injected text lies outside them. Without ``spans`` they are selected
    online from the attacked instances.
    """
    if spans is not None:
        forget = _join_spans(forget, spans, "span source")
    attacked = inject_knowledge(forget, fact, separator=separator)
    if spans is None:
        attacked = attacked.with_spans(_online_spans(model, attacked, sel_cfg))
    prefix, suffix = fact[:split], fact[split:]
    out = {
        "before": {
            "fact_logprob": fact_logprob(model, fact),
            "suffix_logprob": fact_logprob(model, suffix, prefix),
            "continues": continues_fact(model, fact, split),
        }
    }
    for mode in ("selective", "full"):
        res = unlearn_until_threshold(model, attacked, UnlearnConfig(**{**asdict(cfg), "mode": mode}), threshold)
        m = res.model
        out[mode] = {
            "epochs_used": res.epochs_used,
            "converged": res.converged,
            "fact_logprob": fact_logprob(m, fact),
            "suffix_logprob": fact_logprob(m, suffix, prefix),
            "continues": continues_fact(m, fact, split),
            "continuation": m.generate_greedy(prefix, len(suffix)),
        }
        out[mode]["fact_drop"] = out["before"]["fact_logprob"] - out[mode]["fact_logprob"]
        out[mode]["suffix_drop"] = out["before"]["suffix_logprob"] - out[mode]["suffix_logprob"]
    return out


def cmd_attack(args) -> int:
    model = ToyLm.load(_input_path(args.model))
    forget = read_traces(_input_path(args.forget), "forget")
    fact = encode(args.fact)
    split = args.split if args.split is not None else len(fact) // 2
    if not 0 < split < len(fact):
        raise InputError(f"--split must lie inside the fact (1..{len(fact) - 1})")
    threshold = _threshold(args, model)
    spans = None
    if args.spans != "online":
        spans = _resolve_spans_arg(args.spans, model, forget, _select_cfg(args))
    out = run_attack(model, forget, fact, split, threshold, _unlearn_cfg(args, "selective"),
                     _select_cfg(args), encode(args.separator), spans)
    for mode in ("selective", "full"):
        out[mode]["continuation"] = bytes(out[mode]["continuation"]).decode("utf-8", "replace")
    out["meta"] = _meta(args, fact=args.fact, split=split, lr=args.lr, spans=args.spans,
                        threshold=asdict(threshold))
    _dump_json(args.out, out)
    converged = out["selective"]["converged"] and out["full"]["converged"]
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_annotate(args) -> int:
    corpus = read_traces(_input_path(args.traces))
    fewshot = ann.load_fewshot(_input_path(args.fewshot)) if args.fewshot else ()
    cfg = ann.AnnotationPromptConfig(fewshot_examples=fewshot, model_name=args.model_name,
                                     temperature=args.temperature)
    try:
        if args.client == "live":
            client: ann.ChatClient = ann.LiveChatClient(args.endpoint, min_interval=args.min_interval)
        elif args.client.startswith("replay:"):
            client = ann.ReplayChatClient(_input_path(args.client[7:]))
        else:
            raise InputError(f"--client must be 'live' or 'replay:<fixture>', got {args.client!r}")
    except ann.ClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CLIENT
    recorder = ann.RecordingChatClient(client) if args.record else None
    records = ann.annotate_corpus(corpus, cfg, recorder or client, args.workers)
    ann.write_annotations(args.out, records, _meta(args, model_name=cfg.model_name,
                                                   temperature=cfg.temperature, n_fewshot=len(fewshot)))
    if recorder is not None:
        recorder.save(args.record)
    failed = [r.instance_id for r in records if r.error]
    if failed:
        print(f"error: annotation failed for {len(failed)} instance(s): {', '.join(failed[:10])}",
              file=sys.stderr)
        return EXIT_CLIENT
    return EXIT_OK


def cmd_stats(args) -> int:
    corpus = read_traces(_input_path(args.traces))
    cand = _join_spans(corpus, ann.read_annotations(_input_path(args.annotations)), "annotations")
    ref = None
    if args.reference:
        ref = [s.spans for s in _join_spans(corpus, ann.read_annotations(_input_path(args.reference)), "reference")]
    stats: AnnotationStats = annotation_stats([i.spans for i in cand], ref, [len(i.seq) for i in cand])
    _dump_json(args.out, {"meta": _meta(args), "stats": stats.to_dict(), "n_instances": len(cand)})
    return EXIT_OK


def replay_table(model: ToyLm, corpus: Corpus) -> TableModel:
    """Record ``model``'s next-token distributions for every prefix window in ``corpus``."""
    table = {}
    for inst in corpus:
        toks = inst.seq.tokens
        lps = model.logprobs_for(model.contexts(toks, range(len(toks))))
        for t in range(len(toks)):
            table[tuple(toks[max(0, t - model.context):t])] = lps[t]
    return TableModel(model.vocab_size, table, context=model.context)


def bench_density(densities, n_instances: int = 20, length: int = 200, seed: int = 0,
                  repeats: int = 5) -> list[dict]:
    """Time MA against S-MA scoring over the same replayed traces.

    Each cell is the best of ``repeats`` runs of the scoring loop over
    all instances.
    """
    init_seed, *corpus_seeds = _sub_seeds(seed, 1 + len(densities))
    model = ToyLm.init(seed=init_seed)
    rows = []
    for density, cseed in zip(densities, corpus_seeds):
        corpus = density_corpus(n_instances, length, density, seed=cseed)
        replay = replay_table(model, corpus)

        def timed(fn):
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                for inst in corpus:
                    fn(inst)
                best = min(best, time.perf_counter() - t0)
            return best

        t_full = timed(lambda inst: ma(replay, inst.seq.tokens))
        t_sens = timed(lambda inst: s_ma(replay, inst.seq.tokens, inst.spans))
        rows.append({"density": density, "t_full": t_full, "t_sensitive": t_sens, "ratio": t_full / t_sens})
    return rows


def cmd_bench(args) -> int:
    densities = [float(d) for d in args.densities.split(",")]
    for d in densities:
        if not 0 < d <= 1:
            raise InputError(f"density must be in (0, 1], got {d}")
    rows = bench_density(densities, args.n_instances, args.length, args.seed, args.repeats)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, ["density", "t_full", "t_sensitive", "ratio"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def _add_select_flags(p):
    p.add_argument("--alpha", type=float, default=None,
                   help="fixed log-prob threshold (default: the sequence mean)")
    p.add_argument("--gap", type=int, default=2, help="close gaps of at most this many positions")
    p.add_argument("--fixed-point", action="store_true", help="repeat gap closure until stable")


def _add_metric_flags(p, default_n: int = 4):
    p.add_argument("--n", type=int, default=default_n, help="n-gram order")
    p.add_argument("--gen-cap", type=int, default=64, help="max generated tokens per position (0: no cap)")


def _add_unlearn_flags(p):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--d", type=int, default=8, help="instances per unlearning batch")
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--stop-on", choices=("el_ma", "s_el_ma"), default="el_ma")
    p.add_argument("--threshold-from", choices=("heldout", "explicit"), default="heldout")
    p.add_argument("--heldout", help="held-out traces for threshold derivation")
    p.add_argument("--tau-el", type=float)
    p.add_argument("--tau-ma", type=float)
    p.add_argument("--tau-s-el", type=float)
    p.add_argument("--tau-s-ma", type=float)
    _add_metric_flags(p)
    _add_select_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spanforget", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="root seed for every random choice")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus with planted sensitive strings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=160)
    p.add_argument("--n-heldout", type=int, default=24)
    p.add_argument("--n-forget", type=int, default=8)
    p.add_argument("--length", type=int, default=200, help="tokens per instance")
    p.add_argument("--forget-repeat", type=int, default=4, help="copies of each forget instance in train")
    p.add_argument("--fact", default=None, help="sentence mixed into training instances")
    p.add_argument("--fact-rate", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the toy language model")
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True, help="parameter file to write")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--context", type=int, default=8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="attach per-token log-probabilities to traces")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="online span selection from scored traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    _add_select_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="EL/MA and S-EL/S-MA report")
    p.add_argument("--traces", required=True)
    p.add_argument("--annotations")
    p.add_argument("--model", help="toy model parameter file")
    p.add_argument("--replay", help="recorded next-token distributions (JSONL)")
    p.add_argument("--metrics", default="el,ma,sel,sma", help="comma list of el, ma, sel, sma")
    p.add_argument("--include-first-token", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_metric_flags(p, default_n=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("unlearn", help="unlearn a forget set until the threshold is met")
    p.add_argument("--model", required=True)
    p.add_argument("--forget", required=True)
    p.add_argument("--mode", choices=("selective", "full"), default="selective")
    p.add_argument("--spans", default="online", help="'online' or 'file:<annotations.jsonl>'")
    p.add_argument("--eval-spans", help="annotations used for S-metrics in the outputs")
    p.add_argument("--out-model", required=True)
    p.add_argument("--trajectory", help="per-epoch CSV")
    p.add_argument("--report", help="final MetricReport JSON")
    _add_unlearn_flags(p)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("attack", help="knowledge-injection attack, both unlearning modes")
    p.add_argument("--model", required=True)
    p.add_argument("--forget", required=True)
    p.add_argument("--fact", required=True)
    p.add_argument("--split", type=int, help="prefix length in tokens for the continuation check")
    p.add_argument("--separator", default=" ")
    p.add_argument("--spans", default="online",
                   help="'online' (selected after injection) or 'file:<annotations.jsonl>' for the original text")
    p.add_argument("--out", required=True)
    _add_unlearn_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("annotate", help="offline LLM annotation (forward + backward)")
    p.add_argument("--traces", required=True)
    p.add_argument("--client", required=True, help="'live' or 'replay:<fixture.jsonl>'")
    p.add_argument("--endpoint", help=f"chat API base URL (default ${ann.ENDPOINT_ENV} or OpenAI)")
    p.add_argument("--fewshot", help="JSONL of {text, spans} few-shot examples")
    p.add_argument("--model-name", default="gpt-3.5-turbo")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=1, help="instances annotated concurrently")
    p.add_argument("--min-interval", type=float, default=0.0, help="seconds between live requests")
    p.add_argument("--record", help="also save every exchange as a replay fixture")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("stats", help="span count, proportion and cover of annotations")
    p.add_argument("--traces", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--reference")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench", help="time S-MA against MA scoring across span densities")
    p.add_argument("--densities", default="0.1,0.5,1.0")
    p.add_argument("--n-instances", type=int, default=20)
    p.add_argument("--length", type=int, default=200)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
