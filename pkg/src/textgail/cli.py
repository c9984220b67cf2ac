"""Command-line entry point (``textgail``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import discriminator as disc
from . import generator as gen
from . import metrics
from . import orchestrator as orch
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import BOS, SEP, read_jsonl, tokenize
from .errors import ConfigError, NumericsError, TextGailError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICS = 0, 1, 2, 3


def _emit(records, out: str | None) -> None:
    lines = "".join(json.dumps(r) + "\n" for r in records)
    if out:
        Path(out).write_text(lines, encoding="utf-8")
    else:
        sys.stdout.write(lines)


def _prompts(args, vocab, conditional: bool, n: int) -> list[tuple[tuple[int, ...], str]]:
    if args.sources:
        recs = read_jsonl(args.sources)
        return [((BOS, *vocab.encode(r["source"]), SEP), r["source"]) for r in recs]
    if conditional:
        raise ConfigError("conditional checkpoints need --sources")
    return [((BOS,), "")] * n


def _conditional(cfg: ExperimentConfig | None) -> bool:
    return bool(cfg and cfg.conditional)


def cmd_train(args, baseline: bool) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.stop_at_ppl is not None:
        cfg.stop_at_perplexity = args.stop_at_ppl
    run = orch.run_mle_baseline if baseline else orch.run_textgail
    res = run(cfg, args.out, resume=args.resume)
    print(json.dumps({"step": res.checkpoint.step, "best_val_ppl": res.best_ppl, "stop_reason": res.stop_reason,
                      "csv": str(res.csv_path), "checkpoint": str(res.latest_path)}))
    return EXIT_OK


def cmd_generate(args) -> int:
    store, vocab, cfg = orch.load_model(args.ckpt)
    prompts = _prompts(args, vocab, _conditional(cfg), args.n)
    outs = orch.sample_texts(store, len(prompts), args.temperature, args.top_p, args.seed,
                             args.max_new_tokens, [p for p, _ in prompts], purpose="generate")
    _emit([{"source": text, "hypothesis": vocab.decode(ids), "log_prob": float(sum(lps))}
           for (_, text), (ids, lps) in zip(prompts, outs)], args.out)
    return EXIT_OK


def cmd_beam(args) -> int:
    store, vocab, cfg = orch.load_model(args.ckpt)
    records = []
    for prompt, text in _prompts(args, vocab, _conditional(cfg), 1):
        ids = gen.beam_search(store, prompt, args.beam, args.max_new_tokens)
        records.append({"source": text, "hypothesis": vocab.decode(ids),
                        "log_prob": gen.sequence_log_prob(store, prompt, ids)})
    _emit(records, args.out)
    return EXIT_OK


def _texts(records, *keys) -> list[str]:
    for key in keys:
        if records and key in records[0]:
            return [r[key] for r in records]
    raise ConfigError(f"records need one of the fields {keys}")


def cmd_evaluate(args) -> int:
    hyp_recs, ref_recs = read_jsonl(args.hyp), read_jsonl(args.ref)
    hyps = [tokenize(t) for t in _texts(hyp_recs, "hypothesis", "text")]
    if args.mode == "unconditional":
        refs = [tokenize(t) for t in _texts(ref_recs, "text", "target")]
        score = metrics.corpus_reference_bleu(hyps, refs)
    else:
        by_source: dict[str, list] = {}
        for r in ref_recs:
            by_source.setdefault(r["source"], []).append(tokenize(r["target"]))
        sources = _texts(hyp_recs, "source")
        missing = [s for s in sources if s not in by_source]
        if missing:
            raise ConfigError(f"no reference for source {missing[0]!r}")
        score = metrics.bleu(hyps, [by_source[s] for s in sources])
    summary = {"bleu4": score, "self_bleu4": metrics.self_bleu(hyps), "distinct2": metrics._safe_distinct(hyps, 2)}
    reps = [metrics.seq_rep_n(h, 2) for h in hyps if len(h) >= 2]
    summary["seq_rep2"] = sum(reps) / len(reps) if reps else 0.0
    summary["n"] = len(hyps)
    print(json.dumps(summary))
    return EXIT_OK


def _eval_data(cfg: ExperimentConfig | None, vocab, data_path: str | None):
    if data_path:
        if cfg is None:
            raise ConfigError("checkpoint carries no config; cannot tell the task mode")
        cfg.val_path = data_path
    if cfg is None:
        raise ConfigError("checkpoint carries no config; pass --data")
    return orch.prepare_data(cfg, vocab)


def cmd_sweep(args) -> int:
    store, vocab, cfg = orch.load_model(args.ckpt)
    exp = _eval_data(cfg, vocab, args.data)
    mode = "conditional" if exp.config.conditional else "unconditional"
    points = metrics.temperature_sweep(store, exp.val, metrics.parse_temps(args.temps), args.samples, mode,
                                       exp.train_texts if mode == "unconditional" else None, args.seed,
                                       args.top_p, args.max_new_tokens)
    metrics.write_sweep_csv(points, args.out)
    from .plotting import plot_sweep
    plot_sweep(points, Path(args.out).with_suffix(".png"))
    return EXIT_OK


def cmd_compare(args) -> int:
    _, vocab, cfg = orch.load_model(args.a)
    exp = _eval_data(cfg, vocab, args.data)
    mode = "conditional" if exp.config.conditional else "unconditional"
    rows = orch.compare_runs(args.a, args.b, exp.val, metrics.parse_temps(args.temps), args.out, args.samples,
                             mode, exp.train_texts if mode == "unconditional" else None, args.seed, args.top_p,
                             args.max_new_tokens)
    from .plotting import plot_compare
    plot_compare(rows, Path(args.out).with_suffix(".png"), (Path(args.a).stem, Path(args.b).stem))
    return EXIT_OK


def cmd_classify(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    if ckpt.disc is None:
        raise ConfigError("checkpoint has no discriminator")
    from .data import Vocabulary
    vocab = Vocabulary(ckpt.vocab)
    out = []
    for r in read_jsonl(args.pairs):
        if not all(isinstance(r.get(k), str) for k in ("source", "ending_a", "ending_b")):
            raise ConfigError("pair records need string fields source, ending_a, ending_b")
        choice = disc.classify_pair(ckpt.disc, vocab.encode(r["source"]), vocab.encode(r["ending_a"]),
                                    vocab.encode(r["ending_b"]))
        out.append({"choice": choice})
    _emit(out, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .diagnostics import gradient_checks
    ok = True
    for check in gradient_checks(args.seed, args.samples):
        rep = check.report
        ok &= rep.passed
        print(f"{check.name}: {'PASS' if rep.passed else 'FAIL'} max_rel_error={rep.max_rel_error:.3e} "
              f"rtol={rep.rtol:g} samples={rep.checked}")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textgail", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_ in (("train-gail", "warm-up plus adversarial training"), ("train-mle", "MLE-only baseline")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default="runs")
        sp.add_argument("--resume", action="store_true")
        sp.add_argument("--stop-at-ppl", type=float, default=None,
                        help="stop once validation perplexity reaches this value")

    def decode_opts(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--max-new-tokens", type=int, default=32)
        sp.add_argument("--out", default=None)
        sp.add_argument("--sources", default=None, help="JSONL with a 'source' field per prompt")

    sp = sub.add_parser("generate", help="sample continuations")
    decode_opts(sp)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--top-p", type=float, default=1.0)
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("beam", help="beam-search decoding")
    decode_opts(sp)
    sp.add_argument("--beam", type=int, default=4)

    sp = sub.add_parser("evaluate", help="score a hypothesis file")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--mode", choices=("conditional", "unconditional"), default="unconditional")

    def sweep_opts(sp):
        sp.add_argument("--temps", default="0.1:1.0:0.1")
        sp.add_argument("--samples", type=int, default=200)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--top-p", type=float, default=1.0)
        sp.add_argument("--max-new-tokens", type=int, default=32)
        sp.add_argument("--data", default=None, help="evaluation JSONL (defaults to the run's validation split)")

    sp = sub.add_parser("sweep", help="temperature sweep of one checkpoint (CSV + PNG)")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", default="sweep.csv")
    sweep_opts(sp)

    sp = sub.add_parser("compare", help="paired temperature sweep of two checkpoints (CSV + PNG)")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--out", default="compare.csv")
    sweep_opts(sp)

    sp = sub.add_parser("classify", help="pick the better ending with the discriminator")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--samples", type=int, default=20)
    return p


COMMANDS = {
    "train-gail": lambda a: cmd_train(a, baseline=False),
    "train-mle": lambda a: cmd_train(a, baseline=True),
    "generate": cmd_generate,
    "beam": cmd_beam,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "classify": cmd_classify,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericsError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (TextGailError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
