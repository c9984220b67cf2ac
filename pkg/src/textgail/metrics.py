"""Quality and diversity metrics: BLEU, Self-BLEU, Distinct-n, Seq-Rep-n, perplexity."""
from __future__ import annotations

import bisect
import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from . import generator as gen
from . import nn
from .data import BOS, SPECIAL_IDS, SequenceExample
from .errors import ConfigError, EmptyInput, InsufficientData
from .rng import stream

Tokens = Sequence[Hashable]

SWEEP_COLUMNS = ("temperature", "bleu4", "self_bleu4", "distinct2", "perplexity")


@dataclass
class NGramCounts:
    n: int
    counts: Counter
    total: int


def ngrams(seq: Tokens, n: int) -> list[tuple]:
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def ngram_counts(seq: Tokens, n: int) -> NGramCounts:
    grams = ngrams(seq, n)
    return NGramCounts(n, Counter(grams), len(grams))


def strip_specials(ids: Sequence[int]) -> list[int]:
    return [t for t in ids if t not in SPECIAL_IDS]


# --- BLEU -------------------------------------------------------------------

class _References:
    """Max n-gram counts and sorted lengths for one reference set."""

    def __init__(self, refs: Sequence[Tokens], max_n: int):
        self.max_counts = [dict() for _ in range(max_n + 1)]
        for ref in refs:
            for n in range(1, max_n + 1):
                mc = self.max_counts[n]
                for g, c in Counter(ngrams(ref, n)).items():
                    if c > mc.get(g, 0):
                        mc[g] = c
        self.lengths = sorted({len(r) for r in refs})

    def closest_length(self, c: int) -> int:
        return _closest(self.lengths, c)


def _closest(lengths: list[int], c: int) -> int:
    # nearest reference length, the shorter one on a tie
    i = bisect.bisect_left(lengths, c)
    cands = lengths[max(0, i - 1): i + 1]
    return min(cands, key=lambda r: (abs(r - c), r))


def _combine(num: list[int], den: list[int], hyp_len: int, ref_len: int, max_n: int) -> float:
    if hyp_len == 0:
        return 0.0
    logs = 0.0
    for n in range(1, max_n + 1):
        if n >= 2 and num[n] == 0:
            p = (num[n] + 1) / (den[n] + 1)
        else:
            p = num[n] / den[n] if den[n] else 0.0
        if p == 0.0:
            return 0.0
        logs += math.log(p)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(logs / max_n)


def _accumulate(hyp: Tokens, max_counts, num, den, max_n) -> None:
    for n in range(1, max_n + 1):
        for g, c in Counter(ngrams(hyp, n)).items():
            num[n] += min(c, max_counts[n].get(g, 0))
            den[n] += c


def _check_order(max_n: int) -> None:
    if not 1 <= max_n <= 4:
        raise ConfigError("max_n must be in 1..4")


def bleu(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> float:
    """Corpus BLEU with clipped counts and a corpus-level brevity penalty.

    Zero precisions for orders >= 2 are smoothed by adding one to both
    numerator and denominator.
    """
    _check_order(max_n)
    if not hypotheses:
        raise EmptyInput("no hypotheses")
    if len(hypotheses) != len(references):
        raise ConfigError("hypotheses and references differ in length")
    num, den = [0] * (max_n + 1), [0] * (max_n + 1)
    c = r = 0
    cache: dict[int, _References] = {}
    for hyp, refs in zip(hypotheses, references):
        idx = cache.get(id(refs))
        if idx is None:
            idx = cache[id(refs)] = _References(refs, max_n)
        _accumulate(hyp, idx.max_counts, num, den, max_n)
        c += len(hyp)
        r += idx.closest_length(len(hyp))
    return _combine(num, den, c, r, max_n)


def corpus_reference_bleu(hypotheses: Sequence[Tokens], training_corpus: Sequence[Tokens], max_n: int = 4) -> float:
    if not training_corpus:
        raise EmptyInput("reference corpus is empty")
    refs = list(training_corpus)
    return bleu(hypotheses, [refs] * len(hypotheses), max_n)


def self_bleu(samples: Sequence[Tokens], max_n: int = 4) -> float:
    """Mean sentence BLEU of each sample against all the others.

    Leave-one-out maxima come from keeping the two largest per-sample
    counts of every n-gram, so the cost is linear in the corpus.
    """
    _check_order(max_n)
    if len(samples) < 2:
        raise InsufficientData("self-BLEU needs at least two samples")
    top2 = [None] + [defaultdict(lambda: [(0, -1), (0, -1)]) for _ in range(max_n)]
    per_sample = []
    for i, s in enumerate(samples):
        counts = [None] + [Counter(ngrams(s, n)) for n in range(1, max_n + 1)]
        per_sample.append(counts)
        for n in range(1, max_n + 1):
            for g, cnt in counts[n].items():
                best = top2[n][g]
                if cnt > best[0][0]:
                    best[1] = best[0]
                    best[0] = (cnt, i)
                elif cnt > best[1][0]:
                    best[1] = (cnt, i)
    lengths = sorted(len(s) for s in samples)
    scores = []
    for i, s in enumerate(samples):
        num, den = [0] * (max_n + 1), [0] * (max_n + 1)
        for n in range(1, max_n + 1):
            for g, cnt in per_sample[i][n].items():
                (c1, o1), (c2, _) = top2[n][g]
                ref_max = c2 if o1 == i else c1
                num[n] += min(cnt, ref_max)
                den[n] += cnt
        others = list(lengths)
        others.remove(len(s))
        scores.append(_combine(num, den, len(s), _closest(others, len(s)), max_n))
    return float(np.mean(scores))


# --- diversity --------------------------------------------------------------

def distinct_n(corpus: Sequence[Tokens], n: int) -> float:
    grams = [g for seq in corpus for g in ngrams(seq, n)]
    if not grams:
        raise InsufficientData(f"corpus has no {n}-grams")
    return len(set(grams)) / len(grams)


def seq_rep_n(sequence: Tokens, n: int) -> float:
    if len(sequence) < n:
        raise InsufficientData(f"sequence shorter than {n}")
    grams = ngrams(sequence, n)
    return 1.0 - len(set(grams)) / len(grams)


def mean_seq_rep_n(corpus: Sequence[Tokens], n: int) -> float:
    vals = [seq_rep_n(s, n) for s in corpus if len(s) >= n]
    if not vals:
        raise InsufficientData(f"no sequence has {n} tokens")
    return float(np.mean(vals))


# --- model-based ------------------------------------------------------------

def perplexity(gen_store, test_set: Sequence[SequenceExample], temperature: float = 1.0, chunk: int = 64) -> float:
    """exp of the mean per-token NLL, averaged per sequence like the MLE loss.

    Token distributions are softmax(logits / temperature).
    """
    if not temperature > 0:
        raise ConfigError("temperature must be > 0")
    if not test_set:
        raise EmptyInput("empty test set")
    cfg = gen.config_of(gen_store)
    params = nn.leaves(gen_store)
    per_seq = []
    for i in range(0, len(test_set), chunk):
        part = test_set[i:i + chunk]
        tok, mask = gen.token_log_probs(params, cfg, [e.source for e in part], [e.target for e in part], temperature)
        per_seq.extend((-tok.data.sum(axis=1) / mask.sum(axis=1)).tolist())
    return float(math.exp(float(np.mean(per_seq))))


@dataclass
class SweepPoint:
    temperature: float
    bleu: float
    self_bleu: float
    distinct: float
    perplexity: float

    def row(self) -> list[str]:
        return [f"{v:.6f}" for v in (self.temperature, self.bleu, self.self_bleu, self.distinct, self.perplexity)]


def _prompt_references(eval_set: Sequence[SequenceExample]) -> tuple[list[tuple], dict]:
    refs: dict[tuple, list] = {}
    for ex in eval_set:
        refs.setdefault(tuple(ex.source), []).append(strip_specials(ex.target))
    return list(refs), refs


def generate_samples(gen_store, prompts: Sequence[Sequence[int]], temperature: float, top_p: float,
                     max_new_tokens: int, rng) -> list[list[int]]:
    params = gen.DecodeParams(temperature, top_p, max_new_tokens)
    return [out for out, _ in gen.sample_batch(gen_store, prompts, params, rng)]


def temperature_sweep(gen_store, eval_set: Sequence[SequenceExample], temps: Sequence[float],
                      samples_per_temp: int = 200, metric_mode: str = "unconditional",
                      reference_corpus: Sequence[Tokens] | None = None, seed: int = 0,
                      top_p: float = 1.0, max_new_tokens: int = 32) -> list[SweepPoint]:
    """Sample at each temperature and score quality, diversity and perplexity.

    Unconditional mode scores BLEU against the whole reference corpus
    (the eval targets unless ``reference_corpus`` is given); conditional
    mode scores each sample against the gold targets of its prompt.
    """
    if samples_per_temp < 2:
        raise ConfigError("samples_per_temp must be >= 2")
    if metric_mode not in ("conditional", "unconditional"):
        raise ConfigError("metric_mode must be 'conditional' or 'unconditional'")
    if any(not 0 < t <= 1 for t in temps):
        raise ConfigError("temperatures must lie in (0, 1]")
    points = []
    if metric_mode == "unconditional":
        prompts = [(BOS,)] * samples_per_temp
        corpus = list(reference_corpus) if reference_corpus is not None else [strip_specials(e.target) for e in eval_set]
    else:
        keys, ref_map = _prompt_references(eval_set)
        prompts = [keys[i % len(keys)] for i in range(samples_per_temp)]
    for t in temps:
        rng = stream(seed, "sweep", int(round(t * 1000)))
        hyps = [strip_specials(s) for s in generate_samples(gen_store, prompts, t, top_p, max_new_tokens, rng)]
        if metric_mode == "unconditional":
            b = corpus_reference_bleu(hyps, corpus)
        else:
            b = bleu(hyps, [ref_map[p] for p in prompts])
        points.append(SweepPoint(float(t), b, self_bleu(hyps), _safe_distinct(hyps, 2),
                                 perplexity(gen_store, eval_set, t)))
    return points


def _safe_distinct(hyps, n) -> float:
    try:
        return distinct_n(hyps, n)
    except InsufficientData:
        return 0.0


def write_sweep_csv(points: Sequence[SweepPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for p in points:
            w.writerow(p.row())


def parse_temps(spec: str) -> list[float]:
    """Parse ``start:stop:step`` (inclusive) or a comma list into temperatures."""
    if ":" in spec:
        start, stop, step = (float(x) for x in spec.split(":"))
        if step <= 0:
            raise ConfigError("temperature step must be > 0")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(x) for x in spec.split(",") if x.strip()]
