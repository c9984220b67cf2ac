"""Experiment driver: data preparation, warm-up, adversarial and MLE runs, comparisons."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import discriminator as disc
from . import generator as gen
from . import metrics
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import (BOS, SequenceExample, Vocabulary, build_vocabulary, generate_synthetic_corpus, is_member,
                   make_example, read_jsonl)
from .errors import ConfigError, NumericsError, TrainingAborted
from .gail import ReplayBuffer, TrainState, train_step, warmup_mle
from .nn import OptimizerState, ParameterStore, adam_step
from .rng import stream

log = logging.getLogger(__name__)

GAIL_COLUMNS = ("step", "mean_raw_reward", "mean_ratio", "d_loss", "g_loss", "val_ppl")
MLE_COLUMNS = ("step", "loss", "val_ppl")
COMPARE_COLUMNS = ("temperature", "bleu_a", "div_a", "ppl_a", "bleu_b", "div_b", "ppl_b")
MAX_CONSECUTIVE_FAILURES = 3
HOLDOUT_FRACTION = 0.1


@dataclass
class Experiment:
    config: ExperimentConfig
    vocab: Vocabulary
    train: list[SequenceExample]
    val: list[SequenceExample]
    train_texts: list[list[int]] = field(default_factory=list)


@dataclass
class RunResult:
    checkpoint: Checkpoint
    csv_path: Path
    best_path: Path
    latest_path: Path
    best_ppl: float
    stop_reason: str


def _records(cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    if cfg.synthetic_grammar:
        if cfg.conditional:
            raise ConfigError("synthetic grammars are unconditional")
        records = generate_synthetic_corpus(cfg.data_seed, cfg.synthetic_train + cfg.synthetic_val,
                                            cfg.synthetic_grammar)
        return records[:cfg.synthetic_train], records[cfg.synthetic_train:]
    train = read_jsonl(cfg.train_path)
    if cfg.val_path:
        return train, read_jsonl(cfg.val_path)
    cut = len(train) - max(1, int(len(train) * HOLDOUT_FRACTION))
    if cut < 1:
        raise ConfigError("training file too small to hold out a validation split")
    return train[:cut], train[cut:]


def prepare_data(cfg: ExperimentConfig, vocab: Vocabulary | None = None) -> Experiment:
    """Load or synthesise the corpus and encode it.

    The vocabulary is built from the training split unless one is given
    (e.g. restored from a checkpoint).
    """
    train_rec, val_rec = _records(cfg)
    if vocab is None:
        vocab = build_vocabulary(train_rec, cfg.min_count)
    train = [make_example(r, cfg.conditional, vocab, i + 1) for i, r in enumerate(train_rec)]
    val = [make_example(r, cfg.conditional, vocab, i + 1) for i, r in enumerate(val_rec)]
    longest = max(len(e.source) + len(e.target) for e in train + val)
    if longest > cfg.max_len:
        raise ConfigError(f"longest example has {longest} tokens, more than max_len = {cfg.max_len}")
    exp = Experiment(cfg, vocab, train, val)
    exp.train_texts = [metrics.strip_specials(e.target) for e in train]
    return exp


# --- shared pieces ----------------------------------------------------------

def warm_start(exp: Experiment) -> tuple[ParameterStore, OptimizerState, list[float]]:
    """Initialise the generator and run MLE warm-up; shared by both run types."""
    cfg = exp.config
    store = gen.init_generator(cfg.gen_config(len(exp.vocab)), seed=cfg.seed)
    opt = OptimizerState.for_store(store, cfg.learning_rate, cfg.lr_warmup)
    losses = warmup_mle(store, exp.train, cfg.warmup_steps, opt, cfg.batch_size, cfg.seed, cfg.warmup_fraction)
    return store, opt, losses


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "nan" if math.isnan(x) else f"{x:.6f}"


class _CsvLog:
    """Append-only CSV that can be truncated back to a resumed step."""

    def __init__(self, path: Path, columns: Sequence[str], resume_step: int | None):
        self.path = path
        if resume_step is None or not path.exists():
            path.write_text(",".join(columns) + "\n", encoding="utf-8")
        else:
            lines = path.read_text(encoding="utf-8").splitlines()
            kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= resume_step]
            path.write_text("\n".join(kept) + "\n", encoding="utf-8")

    def write(self, values: Sequence) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(",".join(_fmt(v) for v in values) + "\n")


@dataclass
class _Stopper:
    patience: int
    target: float
    best: float = math.inf
    bad: int = 0

    def update(self, ppl: float) -> tuple[bool, str]:
        improved = ppl < self.best
        if improved:
            self.best, self.bad = ppl, 0
        else:
            self.bad += 1
        if self.target > 0 and ppl <= self.target:
            return improved, "reached target perplexity"
        if self.bad >= self.patience:
            return improved, "perplexity stopped improving"
        return improved, ""


def _prepare_out(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- adversarial run --------------------------------------------------------

def run_textgail(cfg: ExperimentConfig, out_dir: str | Path, resume: bool = False) -> RunResult:
    """MLE warm-up followed by adversarial training with periodic evaluation.

    Validation perplexity is computed every ``eval_every`` steps and at the
    last step; each evaluation writes ``gail_latest.ckpt`` (and
    ``gail_best.ckpt`` on improvement). Training stops early after
    ``patience`` non-improving evaluations or once perplexity falls to
    ``stop_at_perplexity``. A step that raises NumericsError is rolled back
    and skipped; three in a row abort the run.
    """
    out = _prepare_out(out_dir)
    latest, best_path, csv_path = out / "gail_latest.ckpt", out / "gail_best.ckpt", out / "gail_train.csv"
    gcfg = cfg.gail_config()
    stopper = _Stopper(cfg.patience, cfg.stop_at_perplexity)
    start = 0
    if resume and latest.exists():
        ckpt = Checkpoint.load(latest, expect_hash=cfg.hash())
        exp = prepare_data(cfg, Vocabulary(ckpt.vocab))
        state = TrainState(ckpt.gen, ckpt.disc, ckpt.gen_opt, ckpt.disc_opt,
                           ReplayBuffer(gcfg.buffer_size, reward_stats=ckpt.reward_stats))
        start = ckpt.step
        stopper.best, stopper.bad = ckpt.extra["best_ppl"], ckpt.extra["bad_evals"]
        if ckpt.extra.get("stop_reason"):
            return RunResult(ckpt, csv_path, best_path, latest, stopper.best, ckpt.extra["stop_reason"])
        log_csv = _CsvLog(csv_path, GAIL_COLUMNS, start)
    else:
        exp = prepare_data(cfg)
        g_store, g_opt, _ = warm_start(exp)
        g_opt.base_lr = cfg.gail_lr
        d_store = disc.init_discriminator(cfg.disc_config(len(exp.vocab)), seed=cfg.seed + 1)
        d_opt = OptimizerState.for_store(d_store, cfg.disc_lr, cfg.lr_warmup)
        state = TrainState(g_store, d_store, g_opt, d_opt, ReplayBuffer(gcfg.buffer_size))
        log_csv = _CsvLog(csv_path, GAIL_COLUMNS, None)

    failures, reason, ckpt, last = 0, "completed total_steps", None, start
    for t in range(start, cfg.total_steps):
        step = last = t + 1
        try:
            rep = train_step(state, exp.train, t, gcfg)
            failures = 0
        except NumericsError as exc:
            failures += 1
            log.warning("step %d rolled back: %s", step, exc)
            if failures >= MAX_CONSECUTIVE_FAILURES:
                raise TrainingAborted(f"{failures} consecutive numerical failures, last at step {step}: {exc}")
            continue
        ppl, stop, improved = None, "", False
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            ppl = metrics.perplexity(state.gen, exp.val)
            improved, stop = stopper.update(ppl)
            log.info("step %d val_ppl %.4f", step, ppl)
        log_csv.write((step, rep.mean_raw_reward, rep.mean_ratio, rep.d_loss, rep.g_loss, ppl))
        if ppl is not None:
            ckpt = _gail_checkpoint(cfg, exp, state, step, stopper, "")
            ckpt.save(latest)
            if improved:
                ckpt.save(best_path)
        if stop:
            reason = stop
            break
    if ckpt is None or ckpt.step != last:
        ckpt = _gail_checkpoint(cfg, exp, state, last, stopper, "")
    ckpt.extra["stop_reason"] = reason
    ckpt.save(latest)
    if not best_path.exists():
        ckpt.save(best_path)
    return RunResult(ckpt, csv_path, best_path, latest, stopper.best, reason)


def _gail_checkpoint(cfg, exp, state: TrainState, step: int, stopper: _Stopper, stop: str) -> Checkpoint:
    extra = {"kind": "gail", "config": cfg.to_dict(), "best_ppl": stopper.best, "bad_evals": stopper.bad,
             "stop_reason": stop}
    return Checkpoint(state.gen.copy(), step, cfg.hash(), state.disc.copy(), state.gen_opt.copy(),
                      state.disc_opt.copy(), state.buffer.reward_stats, list(exp.vocab.tokens), extra)
# --- MLE baseline -----------------------------------------------------------

def run_mle_baseline(cfg: ExperimentConfig, out_dir: str | Path, resume: bool = False) -> RunResult:
    """Pure maximum-likelihood training from the same warm start.

    Uses the warm-up code path of :func:`run_textgail`, then keeps taking
    MLE steps on the whole training set with the same optimiser, evaluation
    cadence and stopping rules.
    """
    out = _prepare_out(out_dir)
    latest, best_path, csv_path = out / "mle_latest.ckpt", out / "mle_best.ckpt", out / "mle_train.csv"
    stopper = _Stopper(cfg.patience, cfg.stop_at_perplexity)
    start = 0
    if resume and latest.exists():
        ckpt = Checkpoint.load(latest, expect_hash=cfg.hash())
        exp = prepare_data(cfg, Vocabulary(ckpt.vocab))
        store, opt, start = ckpt.gen, ckpt.gen_opt, ckpt.step
        stopper.best, stopper.bad = ckpt.extra["best_ppl"], ckpt.extra["bad_evals"]
        if ckpt.extra.get("stop_reason"):
            return RunResult(ckpt, csv_path, best_path, latest, stopper.best, ckpt.extra["stop_reason"])
        log_csv = _CsvLog(csv_path, MLE_COLUMNS, start)
    else:
        exp = prepare_data(cfg)
        store, opt, _ = warm_start(exp)
        log_csv = _CsvLog(csv_path, MLE_COLUMNS, None)

    def snapshot(step: int, stop: str) -> Checkpoint:
        extra = {"kind": "mle", "config": cfg.to_dict(), "best_ppl": stopper.best, "bad_evals": stopper.bad,
                 "stop_reason": stop}
        return Checkpoint(store.copy(), step, cfg.hash(), gen_opt=opt.copy(), vocab=list(exp.vocab.tokens),
                          extra=extra)

    failures, reason, ckpt, last = 0, "completed total_steps", None, start
    for t in range(start, cfg.total_steps):
        step = last = t + 1
        idx = stream(cfg.seed, "mle", t).integers(len(exp.train), size=cfg.batch_size)
        try:
            loss, grads = gen.mle_grads(store, [exp.train[i] for i in idx])
            adam_step(store, grads, opt)
            failures = 0
        except NumericsError as exc:
            failures += 1
            log.warning("step %d skipped: %s", step, exc)
            if failures >= MAX_CONSECUTIVE_FAILURES:
                raise TrainingAborted(f"{failures} consecutive numerical failures, last at step {step}: {exc}")
            continue
        ppl, stop, improved = None, "", False
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            ppl = metrics.perplexity(store, exp.val)
            improved, stop = stopper.update(ppl)
        log_csv.write((step, loss, ppl))
        if ppl is not None:
            ckpt = snapshot(step, "")
            ckpt.save(latest)
            if improved:
                ckpt.save(best_path)
        if stop:
            reason = stop
            break
    if ckpt is None or ckpt.step != last:
        ckpt = snapshot(last, "")
    ckpt.extra["stop_reason"] = reason
    ckpt.save(latest)
    if not best_path.exists():
        ckpt.save(best_path)
    return RunResult(ckpt, csv_path, best_path, latest, stopper.best, reason)


# --- evaluation helpers -----------------------------------------------------

def load_model(path: str | Path) -> tuple[ParameterStore, Vocabulary, ExperimentConfig | None]:
    """Return the generator, vocabulary and (if recorded) the run config of a checkpoint."""
    ckpt = Checkpoint.load(path)
    cfg = ckpt.extra.get("config")
    return ckpt.gen, Vocabulary(ckpt.vocab), (ExperimentConfig.from_dict(cfg) if cfg else None)


def sample_texts(store: ParameterStore, n: int, temperature: float, top_p: float, seed: int,
                 max_new_tokens: int = 32, prompts: Sequence[Sequence[int]] | None = None,
                 purpose: str = "eval") -> list[tuple[list[int], list[float]]]:
    prompts = list(prompts) if prompts is not None else [(BOS,)] * n
    decode = gen.DecodeParams(temperature, top_p, max_new_tokens)
    return gen.sample_batch(store, prompts, decode, stream(seed, purpose))


@dataclass
class ValidityReport:
    rate: float
    distinct2: float
    samples: list[str]


def validity_rate(store: ParameterStore, vocab: Vocabulary, grammar: str, n: int = 200,
                  temperature: float = 0.8, top_p: float = 0.9, seed: int = 0,
                  max_new_tokens: int = 32) -> ValidityReport:
    """Fraction of ``n`` unconditional samples that belong to ``grammar``."""
    outs = sample_texts(store, n, temperature, top_p, seed, max_new_tokens)
    ids = [metrics.strip_specials(o) for o, _ in outs]
    texts = [vocab.decode(i) for i in ids]
    rate = sum(is_member(t, grammar) for t in texts) / n
    return ValidityReport(rate, metrics._safe_distinct(ids, 2), texts)


def compare_runs(ckpt_a: str | Path, ckpt_b: str | Path, eval_set: Sequence[SequenceExample],
                 temps: Sequence[float], out_csv: str | Path | None = None, samples_per_temp: int = 200,
                 metric_mode: str = "unconditional", reference_corpus=None, seed: int = 0,
                 top_p: float = 1.0, max_new_tokens: int = 32) -> list[list[str]]:
    """Temperature-sweep two checkpoints on the same data and join the curves."""
    store_a, vocab_a, _ = load_model(ckpt_a)
    store_b, vocab_b, _ = load_model(ckpt_b)
    if vocab_a != vocab_b:
        raise ConfigError("checkpoints use different vocabularies")
    kw = dict(samples_per_temp=samples_per_temp, metric_mode=metric_mode, reference_corpus=reference_corpus,
              seed=seed, top_p=top_p, max_new_tokens=max_new_tokens)
    pa = metrics.temperature_sweep(store_a, eval_set, temps, **kw)
    pb = metrics.temperature_sweep(store_b, eval_set, temps, **kw)
    rows = [[f"{a.temperature:.6f}", f"{a.bleu:.6f}", f"{a.distinct:.6f}", f"{a.perplexity:.6f}",
             f"{b.bleu:.6f}", f"{b.distinct:.6f}", f"{b.perplexity:.6f}"] for a, b in zip(pa, pb)]
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARE_COLUMNS)
            w.writerows(rows)
    return rows
