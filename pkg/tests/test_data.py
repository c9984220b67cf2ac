import json
import re

import numpy as np
import pytest

from textgail.data import (BOS, EOS, PAD, SEP, SPECIAL_TOKENS, SequenceExample, Vocabulary, build_vocabulary,
                           compute_stats, corrupt, generate_synthetic_corpus, is_member, load_jsonl,
                           make_example, write_jsonl)
from textgail.errors import ConfigError, EmptyCorpus, ParseError, SchemaError


def test_vocabulary_from_tiny_corpus():
    vocab = build_vocabulary(["a b a"], 1)
    assert vocab.tokens == ["<pad>", "<bos>", "<eos>", "<sep>", "a", "b"]
    assert len(vocab) == 6


def test_min_count_filters_rare_tokens():
    assert build_vocabulary(["a b a"], 2).tokens == [*SPECIAL_TOKENS, "a"]


def test_empty_corpus_rejected():
    with pytest.raises(EmptyCorpus):
        build_vocabulary([], 1)


def test_vocabulary_index_inverts_tokens():
    vocab = build_vocabulary(["the cat sat on the mat", "a dog"], 1)
    for i, tok in enumerate(vocab.tokens):
        assert vocab.index[tok] == i
    assert vocab.tokens[:4] == list(SPECIAL_TOKENS)
    assert not set(vocab.tokens[4:]) & set(SPECIAL_TOKENS)


def test_frequency_then_lexicographic_order():
    vocab = build_vocabulary(["c b b a a"], 1)
    assert vocab.tokens[4:] == ["a", "b", "c"]


def test_vocabulary_save_load_roundtrip(tmp_path):
    vocab = build_vocabulary(["x y z z"], 1)
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == vocab
    assert (tmp_path / "v.txt").read_text().splitlines()[:4] == list(SPECIAL_TOKENS)


def test_unconditional_record_mapping():
    vocab = build_vocabulary(["a b"], 1)
    ex = make_example({"text": "a b"}, False, vocab)
    assert ex.source == (BOS,)
    assert ex.target == (vocab.index["a"], vocab.index["b"], EOS)


def test_conditional_record_mapping():
    vocab = build_vocabulary([{"source": "a", "target": "b"}], 1)
    ex = make_example({"source": "a", "target": "b"}, True, vocab)
    assert ex.source == (BOS, vocab.index["a"], SEP)
    assert ex.target == (vocab.index["b"], EOS)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("not json\n")
    with pytest.raises(ParseError) as err:
        load_jsonl(p, False, build_vocabulary(["a"], 1))
    assert err.value.line == 1


def test_schema_error_on_missing_field(tmp_path):
    p = tmp_path / "d.jsonl"
    write_jsonl(p, [{"text": "a"}, {"source": "a"}])
    with pytest.raises(SchemaError) as err:
        load_jsonl(p, False, build_vocabulary(["a"], 1))
    assert err.value.line == 2


def test_example_invariants():
    with pytest.raises(SchemaError):
        SequenceExample((BOS,), (4, 5))
    with pytest.raises(SchemaError):
        SequenceExample((BOS,), (4, PAD, EOS))


def test_stats_average_length():
    exs = [SequenceExample((BOS,), (4, 5, EOS)), SequenceExample((BOS,), (4, 5, 6, 7, EOS))]
    stats = compute_stats(exs, build_vocabulary(["a b c d"], 1))
    assert stats.average_length == 3.0
    assert stats.num_examples == 2
    assert stats.vocabulary_size == 4
    assert compute_stats([], build_vocabulary(["a"], 1)).num_examples == 0


def test_synthetic_abab_single_record():
    (rec,) = generate_synthetic_corpus(1, 1, "ABAB")
    assert re.fullmatch(r"(a b ){1,7}a b", rec["text"])


def test_synthetic_is_deterministic():
    assert generate_synthetic_corpus(7, 50, "ARITH") == generate_synthetic_corpus(7, 50, "ARITH")


def test_synthetic_rejects_bad_args():
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(0, 0, "ABAB")
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(0, 3, "XYZ")


@pytest.mark.parametrize("grammar", ["ABAB", "ARITH"])
def test_generated_strings_are_members_and_corruptions_are_not(grammar):
    rng = np.random.default_rng(0)
    for rec in generate_synthetic_corpus(3, 200, grammar):
        assert is_member(rec["text"], grammar)
        assert not is_member(corrupt(rec["text"], rng, grammar), grammar)


def test_arith_membership_examples():
    assert is_member("( 1 + 2 ) * 3", "ARITH")
    assert not is_member("( 1 + 2 * 3", "ARITH")
    assert not is_member("1 +", "ARITH")
    assert not is_member("( ( ( 1 + 2 ) + 3 ) + 4 ) + 5", "ARITH")


def test_write_jsonl_roundtrip(tmp_path):
    recs = [{"source": "x", "target": "y"}]
    write_jsonl(tmp_path / "r.jsonl", recs)
    assert [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()] == recs
