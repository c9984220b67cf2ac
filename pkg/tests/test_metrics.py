import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_uniform
from oracles import grams_of, oracle_bleu, oracle_self_bleu, random_corpus
from textgail import generator as gen
from textgail import metrics, nn
from textgail.data import BOS, EOS, SequenceExample
from textgail.errors import ConfigError, EmptyInput, InsufficientData
from textgail.transformer import ModelConfig


# --- BLEU -------------------------------------------------------------------

def test_identical_hypothesis_scores_one():
    assert metrics.bleu([["a", "b", "c", "d", "e"]], [[["a", "b", "c", "d", "e"]]]) == pytest.approx(1.0)


def test_clipped_unigram_precision():
    hyp, ref = "the the the the".split(), "the cat sat down".split()
    assert metrics.bleu([hyp], [[ref]], max_n=1) == pytest.approx(0.25)


def test_brevity_penalty():
    # unigram-only BLEU of a perfect-precision short hypothesis is the brevity penalty
    assert metrics.bleu([["a", "b"]], [[["a", "b", "c", "d"]]], max_n=1) == pytest.approx(math.exp(-1))


def test_bleu_argument_checks():
    with pytest.raises(EmptyInput):
        metrics.bleu([], [])
    with pytest.raises(ConfigError):
        metrics.bleu([["a"]], [[["a"]]], max_n=5)


def test_corpus_bleu_verbatim_and_disjoint():
    corpus = [list("abcdef"), list("ghij")]
    assert metrics.corpus_reference_bleu([list("abcdef")], corpus) == pytest.approx(1.0)
    assert metrics.corpus_reference_bleu([list("xyzw")], corpus) == 0.0
    assert metrics.corpus_reference_bleu([list("xyzw")], corpus, max_n=2) == 0.0


def test_corpus_bleu_hand_tally():
    corpus = ["a b c d", "b c d e", "a a b", "c d", "e e e e"]
    hyps = ["a b c e", "c d e", "a a a"]
    refs = [s.split() for s in corpus]
    got = metrics.corpus_reference_bleu([h.split() for h in hyps], refs)
    assert got == pytest.approx(oracle_bleu([h.split() for h in hyps], [refs] * 3), abs=0)


def test_bleu_matches_oracle_on_50_random_corpora():
    rng = np.random.default_rng(0)
    for _ in range(50):
        hyps = random_corpus(rng)
        refsets = [random_corpus(rng, 1, 4) for _ in hyps]
        assert metrics.bleu(hyps, refsets) == oracle_bleu(hyps, refsets)
        for n in (1, 2, 3):
            assert metrics.bleu(hyps, refsets, n) == oracle_bleu(hyps, refsets, n)


def test_self_bleu_matches_oracle_on_50_random_corpora():
    rng = np.random.default_rng(1)
    for _ in range(50):
        samples = random_corpus(rng, 2, 10)
        assert metrics.self_bleu(samples) == pytest.approx(oracle_self_bleu(samples), abs=1e-15)


def test_self_bleu_four_hand_written_samples():
    samples = [s.split() for s in ("a b c d", "a b c e", "x y a b", "a b c d e")]
    assert metrics.self_bleu(samples) == pytest.approx(oracle_self_bleu(samples), abs=1e-15)


def test_self_bleu_extremes():
    same = [list("abcde")] * 4
    assert metrics.self_bleu(same) == pytest.approx(1.0)
    disjoint = [list("abcd"), list("efgh"), list("ijkl")]
    assert metrics.self_bleu(disjoint) == 0.0
    with pytest.raises(InsufficientData):
        metrics.self_bleu([list("ab")])


# --- diversity --------------------------------------------------------------

def test_distinct_examples():
    assert metrics.distinct_n(["a b a b".split()], 2) == pytest.approx(2 / 3)
    assert metrics.distinct_n(["a a a".split()], 1) == pytest.approx(1 / 3)
    assert metrics.distinct_n([list("abcd")], 2) == 1.0


def test_seq_rep_examples():
    assert metrics.seq_rep_n("a b a b a b".split(), 2) == pytest.approx(0.6)
    assert metrics.seq_rep_n(list("abcd"), 2) == 0.0
    assert metrics.mean_seq_rep_n(["a b a b a b".split(), list("abcd")], 2) == pytest.approx(0.3)
    with pytest.raises(InsufficientData):
        metrics.seq_rep_n(["a"], 2)


def test_diversity_matches_oracle_on_50_random_corpora():
    rng = np.random.default_rng(2)
    for _ in range(50):
        corpus = random_corpus(rng, 1, 8, vocab=4)
        for n in (1, 2, 3):
            grams = [g for s in corpus for g in grams_of(s, n)]
            if grams:
                assert metrics.distinct_n(corpus, n) == len(set(grams)) / len(grams)
            for s in corpus:
                if len(s) >= n:
                    sg = grams_of(s, n)
                    assert metrics.seq_rep_n(s, n) == 1 - len(set(sg)) / len(sg)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=6), min_size=2, max_size=6))
def test_bleu_bounds(corpus):
    assert 0.0 <= metrics.self_bleu(corpus) <= 1.0 + 1e-12
    assert 0.0 <= metrics.bleu(corpus, [[c] for c in corpus]) <= 1.0 + 1e-12


# --- model-based ------------------------------------------------------------

def _examples():
    return [SequenceExample((BOS,), (4, 5, EOS)), SequenceExample((BOS,), (6, 7, 8, 9, EOS)),
            SequenceExample((BOS,), (EOS,))]


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
def test_uniform_model_perplexity(t):
    store = make_uniform(gen.init_generator(ModelConfig(32, 8, 1, 2, 16), seed=0))
    assert metrics.perplexity(store, _examples(), t) == pytest.approx(32.0, rel=1e-6)


def test_certain_model_perplexity_is_one():
    store = gen.init_generator(ModelConfig(8, 8, 1, 2, 16), seed=0)
    store["head.w"] = np.zeros_like(store["head.w"])
    b = np.full(8, -1e4)
    b[EOS] = 0.0
    store["head.b"] = b
    assert metrics.perplexity(store, [SequenceExample((BOS,), (EOS,))]) == pytest.approx(1.0)


def test_perplexity_matches_mle_loss(tiny_gen):
    exs = _examples()
    assert metrics.perplexity(tiny_gen, exs) == pytest.approx(math.exp(gen.mle_loss(tiny_gen, exs)), rel=1e-5)


def test_parse_temps():
    assert metrics.parse_temps("0.1:1.0:0.1") == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    assert metrics.parse_temps("0.5,1") == [0.5, 1.0]


def _toy_lm():
    data = [SequenceExample((BOS,), tuple(int(t) for t in np.random.default_rng(i).integers(4, 9, size=4)) + (EOS,))
            for i in range(12)]
    store = gen.init_generator(ModelConfig(9, 16, 1, 2, 16), seed=0)
    opt = nn.OptimizerState.for_store(store, 3e-3, 0)
    for _ in range(60):
        _, grads = gen.mle_grads(store, data)
        nn.adam_step(store, grads, opt)
    return store, data


def test_sweep_csv_and_temperature_trend(tmp_path):
    store, data = _toy_lm()
    temps = metrics.parse_temps("0.1:1.0:0.1")
    points = metrics.temperature_sweep(store, data, temps, samples_per_temp=40, max_new_tokens=8)
    path = tmp_path / "sweep.csv"
    metrics.write_sweep_csv(points, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["temperature", "bleu4", "self_bleu4", "distinct2", "perplexity"]
    assert [r[0] for r in rows[1:]] == [f"{t:.6f}" for t in temps]
    assert all(len(v.split(".")[1]) == 6 for r in rows[1:] for v in r)
    assert points[0].self_bleu >= points[-1].self_bleu
    assert points[-1].perplexity == pytest.approx(math.exp(gen.mle_loss(store, data)), rel=1e-5)


def test_sweep_is_seeded():
    store, data = _toy_lm()
    a = metrics.temperature_sweep(store, data, [0.5, 1.0], samples_per_temp=10, max_new_tokens=6, seed=3)
    b = metrics.temperature_sweep(store, data, [0.5, 1.0], samples_per_temp=10, max_new_tokens=6, seed=3)
    assert a == b


def test_conditional_sweep_uses_prompt_references():
    store = gen.init_generator(ModelConfig(10, 8, 1, 2, 16), seed=0)
    data = [SequenceExample((BOS, 4, 3), (5, EOS)), SequenceExample((BOS, 6, 3), (7, 8, EOS))]
    pts = metrics.temperature_sweep(store, data, [1.0], samples_per_temp=4, metric_mode="conditional",
                                    max_new_tokens=4)
    assert len(pts) == 1 and 0 <= pts[0].bleu <= 1
