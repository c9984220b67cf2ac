"""Independent brute-force n-gram oracles built from plain lists."""
import math

import numpy as np


def grams_of(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def oracle_bleu(hyps, refsets, max_n=4):
    num, den = [0] * (max_n + 1), [0] * (max_n + 1)
    c = r = 0
    for hyp, refs in zip(hyps, refsets):
        for n in range(1, max_n + 1):
            hg = grams_of(hyp, n)
            for g in set(hg):
                cnt = hg.count(g)
                num[n] += min(cnt, max(grams_of(ref, n).count(g) for ref in refs))
                den[n] += cnt
        c += len(hyp)
        r += min((len(ref) for ref in refs), key=lambda L: (abs(L - len(hyp)), L))
    if c == 0:
        return 0.0
    logs = 0.0
    for n in range(1, max_n + 1):
        p = (num[n] + 1) / (den[n] + 1) if n >= 2 and num[n] == 0 else (num[n] / den[n] if den[n] else 0.0)
        if p == 0:
            return 0.0
        logs += math.log(p)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(logs / max_n)


def oracle_self_bleu(samples):
    return float(np.mean([oracle_bleu([s], [samples[:i] + samples[i + 1:]]) for i, s in enumerate(samples)]))


def random_corpus(rng, n_min=2, n_max=8, vocab=5, len_max=9):
    return [list(rng.integers(0, vocab, size=int(rng.integers(1, len_max)))) for _ in range(int(rng.integers(n_min, n_max)))]
