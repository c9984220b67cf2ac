"""Vocabulary, JSONL ingestion, dataset statistics and synthetic grammars."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, EmptyCorpus, ParseError, SchemaError

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")
SPECIAL_IDS = frozenset((PAD, BOS, EOS, SEP))

GRAMMARS = ("ABAB", "ARITH")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ConfigError("vocabulary must start with the four special tokens")
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")

    @property
    def specials(self) -> dict[str, int]:
        return {"PAD": PAD, "BOS": BOS, "EOS": EOS, "SEP": SEP}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        """Map text to ids, silently dropping out-of-vocabulary tokens."""
        out = []
        for tok in tokenize(text):
            i = self.index.get(tok)
            if i is not None and i not in SPECIAL_IDS:
                out.append(i)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in SPECIAL_IDS)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass(frozen=True)
class SequenceExample:
    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        if not self.target or self.target[-1] != EOS:
            raise SchemaError(0, "target must be non-empty and end in EOS")
        if PAD in self.source or PAD in self.target:
            raise SchemaError(0, "PAD inside a sequence")


@dataclass(frozen=True)
class DatasetStats:
    vocabulary_size: int
    average_length: float
    num_examples: int
    conditional: bool


def _record_text(record) -> str:
    if isinstance(record, str):
        return record
    if "text" in record:
        return record["text"]
    return f"{record.get('source', '')} {record.get('target', '')}"


def build_vocabulary(corpus: Sequence, min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from raw strings or JSONL-style records.

    Tokens are ordered by descending frequency, then lexicographically, so
    that the same corpus always yields the same id assignment.
    """
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    counts = Counter()
    for record in corpus:
        counts.update(tokenize(_record_text(record)))
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


def make_example(record: dict, conditional: bool, vocab: Vocabulary, line: int = 0) -> SequenceExample:
    if conditional:
        if "source" not in record or "target" not in record:
            raise SchemaError(line, "conditional records need 'source' and 'target'")
        src, tgt = record["source"], record["target"]
        if not isinstance(src, str) or not isinstance(tgt, str):
            raise SchemaError(line, "'source' and 'target' must be strings")
        source = (BOS, *vocab.encode(src), SEP)
        target = (*vocab.encode(tgt), EOS)
    else:
        if "text" not in record:
            raise SchemaError(line, "unconditional records need 'text'")
        if not isinstance(record["text"], str):
            raise SchemaError(line, "'text' must be a string")
        source = (BOS,)
        target = (*vocab.encode(record["text"]), EOS)
    return SequenceExample(source, target)


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not isinstance(record, dict):
                raise ParseError(lineno, "record is not a JSON object")
            records.append(record)
    return records


def load_jsonl(path: str | Path, conditional: bool, vocab: Vocabulary) -> list[SequenceExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                raise ParseError(lineno) from None
            if not isinstance(record, dict):
                raise ParseError(lineno, "record is not a JSON object")
            examples.append(make_example(record, conditional, vocab, lineno))
    return examples


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def compute_stats(examples: Sequence[SequenceExample], vocab: Vocabulary) -> DatasetStats:
    n = len(examples)
    avg = float(np.mean([len(ex.target) - 1 for ex in examples])) if n else 0.0
    conditional = any(len(ex.source) > 1 for ex in examples)
    return DatasetStats(len(vocab) - len(SPECIAL_TOKENS), avg, n, conditional)


# --- synthetic grammars -----------------------------------------------------

_ABAB_RE = re.compile(r"^(a b ){1,7}a b$")
_DIGITS = "0123456789"
_OPS = "+-*"


def _arith_term(rng: np.random.Generator, depth: int) -> list[str]:
    if depth == 0 or rng.random() < 0.35:
        return [_DIGITS[rng.integers(10)]]
    left = _arith_term(rng, depth - 1)
    right = _arith_term(rng, depth - 1)
    return ["(", *left, _OPS[rng.integers(3)], *right, ")"]


def _arith_expr(rng: np.random.Generator, max_depth: int = 3) -> list[str]:
    left = _arith_term(rng, max_depth - 1)
    right = _arith_term(rng, max_depth - 1)
    return [*left, _OPS[rng.integers(3)], *right]


def generate_synthetic_corpus(seed: int, n: int, grammar_id: str) -> list[dict]:
    """Return ``n`` unconditional records ``{"text": ...}`` drawn from a toy grammar."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if grammar_id not in GRAMMARS:
        raise ConfigError(f"unknown grammar {grammar_id!r}")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        if grammar_id == "ABAB":
            k = int(rng.integers(2, 9))
            toks = ["a", "b"] * k
        else:
            toks = _arith_expr(rng)
        records.append({"text": " ".join(toks)})
    return records


def _parse_term(toks: list[str], i: int) -> tuple[int, int]:
    """Parse one term starting at ``i``; return (next index, nesting depth)."""
    if i >= len(toks):
        raise ValueError
    if toks[i] in _DIGITS and len(toks[i]) == 1:
        return i + 1, 0
    if toks[i] != "(":
        raise ValueError
    i, dl = _parse_term(toks, i + 1)
    if i >= len(toks) or toks[i] not in _OPS:
        raise ValueError
    i, dr = _parse_term(toks, i + 1)
    if i >= len(toks) or toks[i] != ")":
        raise ValueError
    return i + 1, 1 + max(dl, dr)


def is_member(text: str, grammar_id: str) -> bool:
    """Membership oracle for the synthetic grammars."""
    if grammar_id == "ABAB":
        return bool(_ABAB_RE.match(text.strip()))
    if grammar_id != "ARITH":
        raise ConfigError(f"unknown grammar {grammar_id!r}")
    toks = text.split()
    try:
        i, dl = _parse_term(toks, 0)
        if i >= len(toks) or toks[i] not in _OPS:
            return False
        i, dr = _parse_term(toks, i + 1)
    except ValueError:
        return False
    return i == len(toks) and 1 + max(dl, dr) <= 3


def corrupt(text: str, rng: np.random.Generator, grammar_id: str = "ABAB") -> str:
    """Return a near-miss string that fails the grammar's membership oracle."""
    toks = text.split()
    for _ in range(100):
        out = list(toks)
        kind = rng.integers(3)
        i = int(rng.integers(len(out)))
        if kind == 0 and len(out) > 1:
            j = min(i + 1, len(out) - 1) if i + 1 < len(out) else i - 1
            out[i], out[j] = out[j], out[i]
        elif kind == 1 and len(out) > 1:
            del out[i]
        else:
            out.insert(i, out[i])
        cand = " ".join(out)
        if not is_member(cand, grammar_id):
            return cand
    raise ConfigError("could not corrupt string")
