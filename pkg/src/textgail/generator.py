"""Autoregressive policy: a causal transformer language model and its decoders."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import EOS, PAD, SequenceExample
from .errors import ConfigError, LengthError
from .nn import Graph, ParameterStore, Tensor
from .transformer import ModelConfig, init_stack, pad_batch, run_stack

GeneratorConfig = ModelConfig


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 32
    beam_size: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")


def init_generator(cfg: GeneratorConfig, seed: int = 0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    store = ParameterStore(meta={"kind": "generator", "config": cfg.to_dict()})
    init_stack(store, cfg, rng)
    store.add("head.w", rng.normal(0, 0.02, (cfg.d_model, cfg.vocab_size)))
    store.add("head.b", np.zeros(cfg.vocab_size))
    return store


def config_of(store: ParameterStore) -> GeneratorConfig:
    return ModelConfig(**store.meta["config"])


def logits_fn(params: dict, cfg: GeneratorConfig, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
    h = run_stack(params, cfg, ids, lengths, causal=True)
    return h @ params["head.w"] + params["head.b"]


# --- teacher forcing --------------------------------------------------------

def _teacher_batch(sources: Sequence, targets: Sequence, max_len: int):
    """Right-padded inputs, next-token labels and a mask over target positions."""
    fulls = []
    for s, t in zip(sources, targets):
        if len(s) + len(t) > max_len:
            raise LengthError(f"source+target length {len(s) + len(t)} exceeds max_len {max_len}")
        if len(s) < 1 or len(t) < 1:
            raise LengthError("source and target must be non-empty")
        fulls.append(list(s) + list(t))
    ids, lengths = pad_batch([f[:-1] for f in fulls], PAD)
    labels, _ = pad_batch([f[1:] for f in fulls], PAD)
    pos = np.arange(ids.shape[1])[None, :]
    starts = np.array([len(s) - 1 for s in sources])[:, None]
    mask = (pos >= starts) & (pos < lengths[:, None])
    return ids, lengths, labels, mask


def nucleus_keep(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Boolean mask of the nucleus along the last axis.

    Tokens are ranked by probability (ties: lower id first) and the
    smallest prefix whose cumulative mass reaches ``top_p`` is kept.
    """
    probs = np.asarray(probs, dtype=np.float64)
    flat = probs.reshape(-1, probs.shape[-1])
    keep = np.zeros(flat.shape, dtype=bool)
    ids = np.arange(flat.shape[-1])
    for r, row in enumerate(flat):
        order = np.lexsort((ids, -row))
        csum = np.cumsum(row[order])
        hit = np.nonzero(csum >= top_p)[0]
        k = int(hit[0]) + 1 if hit.size else len(row)
        keep[r, order[:k]] = True
    return keep.reshape(probs.shape)


def nucleus_filter(probs, top_p: float) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if top_p >= 1.0:
        return probs.copy()
    out = np.where(nucleus_keep(probs, top_p), probs, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def temperature_scale(logits, T: float) -> np.ndarray:
    if not T > 0:
        raise ConfigError("temperature must be > 0")
    return np.asarray(logits, dtype=np.float64) / T


def token_log_probs(params: dict, cfg: GeneratorConfig, sources: Sequence, targets: Sequence,
                    temperature: float = 1.0, top_p: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """Per-position gold-token log-probabilities ``(B, L)`` and the target mask.

    With ``temperature != 1`` or ``top_p < 1`` the distribution is the one a
    decoder with those settings would sample from (nucleus renormalised).
    """
    ids, lengths, labels, mask = _teacher_batch(sources, targets, cfg.max_len)
    logits = logits_fn(params, cfg, ids, lengths)
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    keep = None
    if top_p < 1.0:
        z = logits.data - logits.data.max(-1, keepdims=True)
        p = np.exp(z)
        keep = nucleus_keep(p / p.sum(-1, keepdims=True), top_p)
    logp = nn.log_softmax(logits, keep)
    picked = nn.pick(logp, labels)
    return picked * mask, mask


def sequence_log_probs(params: dict, cfg: GeneratorConfig, sources, targets,
                       temperature: float = 1.0, top_p: float = 1.0) -> Tensor:
    tok, _ = token_log_probs(params, cfg, sources, targets, temperature, top_p)
    return tok.sum(axis=1)


def sequence_log_prob(store: ParameterStore, source, target, temperature: float = 1.0) -> float:
    """log G(target | source), summed over every target token including EOS."""
    if not len(target) or target[-1] != EOS:
        raise LengthError("target must end in EOS")
    cfg = config_of(store)
    return float(sequence_log_probs(nn.leaves(store), cfg, [source], [target], temperature).data[0])


def batch_sequence_log_probs(store: ParameterStore, sources, targets, temperature: float = 1.0,
                             top_p: float = 1.0, chunk: int = 64) -> np.ndarray:
    cfg = config_of(store)
    params = nn.leaves(store)
    out = []
    for i in range(0, len(sources), chunk):
        out.append(sequence_log_probs(params, cfg, sources[i:i + chunk], targets[i:i + chunk],
                                      temperature, top_p).data)
    return np.concatenate(out) if out else np.zeros(0)


def mle_loss_fn(params: dict, cfg: GeneratorConfig, batch: Sequence[SequenceExample],
                temperature: float = 1.0) -> Tensor:
    tok, mask = token_log_probs(params, cfg, [e.source for e in batch], [e.target for e in batch], temperature)
    per_seq = tok.sum(axis=1) * (1.0 / mask.sum(axis=1))
    return -per_seq.mean()


def mle_graph(cfg: GeneratorConfig) -> Graph:
    return Graph(lambda params, inputs: {"loss": mle_loss_fn(params, cfg, inputs["batch"])}, "mle_loss")


def mle_loss(store: ParameterStore, batch: Sequence[SequenceExample]) -> float:
    if not batch:
        raise ValueError("batch must be non-empty")
    return float(nn.forward(mle_graph(config_of(store)), store, {"batch": batch})["loss"])


def mle_grads(store: ParameterStore, batch: Sequence[SequenceExample]) -> tuple[float, dict]:
    return nn.backward(mle_graph(config_of(store)), store, {"batch": batch})


def token_nll_sum(store: ParameterStore, examples: Sequence[SequenceExample], temperature: float = 1.0,
                  chunk: int = 64) -> tuple[float, int]:
    """Total target-token NLL and token count, accumulated in float64."""
    cfg = config_of(store)
    params = nn.leaves(store)
    total, count = 0.0, 0
    for i in range(0, len(examples), chunk):
        part = examples[i:i + chunk]
        tok, mask = token_log_probs(params, cfg, [e.source for e in part], [e.target for e in part], temperature)
        total -= float(tok.data.sum())
        count += int(mask.sum())
    return total, count


# --- decoding ---------------------------------------------------------------

def next_token_logits(store: ParameterStore, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """Logits for the token following each prefix, shape (N, V)."""
    cfg = config_of(store)
    ids, lengths = pad_batch(prefixes, PAD)
    logits = logits_fn(nn.leaves(store), cfg, ids, lengths).data
    return logits[np.arange(len(prefixes)), lengths - 1].astype(np.float64)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _budget(cfg: GeneratorConfig, source, max_new_tokens: int) -> int:
    # leave room for a forced EOS inside max_len
    return max(0, min(max_new_tokens, cfg.max_len - len(source) - 1))


def sample_batch(store: ParameterStore, sources: Sequence[Sequence[int]], params: DecodeParams,
                 rng: np.random.Generator) -> list[tuple[list[int], list[float]]]:
    """Sample one continuation per source.

    Each step scales logits by the temperature, applies the nucleus filter
    and draws by inverse CDF from one uniform per row. The recorded
    log-probabilities come from the unmodified temperature-1 distribution.
    Continuations that hit the budget get EOS appended.
    """
    if params.beam_size:
        raise ConfigError("sample requires beam_size = 0")
    cfg = config_of(store)
    n = len(sources)
    outs: list[list[int]] = [[] for _ in range(n)]
    lps: list[list[float]] = [[] for _ in range(n)]
    budgets = [_budget(cfg, s, params.max_new_tokens) for s in sources]
    done = [b == 0 for b in budgets]
    step = 0
    while not all(done):
        active = [i for i in range(n) if not done[i]]
        logits = next_token_logits(store, [list(sources[i]) + outs[i] for i in active])
        u = rng.random(n)  # one draw per row every step keeps streams aligned
        logp1 = _log_softmax(logits)
        z = logits / params.temperature
        probs = np.exp(_log_softmax(z))
        if params.top_p < 1.0:
            probs = nucleus_filter(probs, params.top_p)
        cdf = np.cumsum(probs, axis=-1)
        for row, i in enumerate(active):
            tok = int(np.searchsorted(cdf[row], u[i] * cdf[row, -1], side="right"))
            tok = min(tok, cdf.shape[1] - 1)
            while probs[row, tok] == 0.0 and tok > 0:
                tok -= 1
            outs[i].append(tok)
            lps[i].append(float(logp1[row, tok]))
            if tok == EOS or len(outs[i]) >= budgets[i]:
                done[i] = True
        step += 1
    _force_eos(store, sources, outs, lps)
    return list(zip(outs, lps))


def _force_eos(store, sources, outs, lps) -> None:
    pending = [i for i, o in enumerate(outs) if not o or o[-1] != EOS]
    if not pending:
        return
    logits = next_token_logits(store, [list(sources[i]) + outs[i] for i in pending])
    logp1 = _log_softmax(logits)
    for row, i in enumerate(pending):
        outs[i].append(EOS)
        lps[i].append(float(logp1[row, EOS]))


def sample(store: ParameterStore, source, params: DecodeParams, rng_seed) -> tuple[list[int], list[float]]:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return sample_batch(store, [source], params, rng)[0]


def greedy(store: ParameterStore, source, max_new_tokens: int) -> list[int]:
    cfg = config_of(store)
    out: list[int] = []
    for _ in range(_budget(cfg, source, max_new_tokens)):
        tok = int(np.argmax(next_token_logits(store, [list(source) + out])[0]))
        out.append(tok)
        if tok == EOS:
            return out
    return out + [EOS]


def beam_search_fn(next_logprobs: Callable[[list[tuple]], np.ndarray], beam_size: int,
                   max_new_tokens: int, eos: int = EOS) -> tuple[list[int], float]:
    """Length-unnormalised beam search over a generic next-token scorer.

    Finished hypotheses stay in the pool and compete with extensions; ties
    are broken by the lexicographically smaller token sequence. Hypotheses
    still open after ``max_new_tokens`` steps are closed with EOS.
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    beams: list[tuple[float, tuple]] = [(0.0, ())]
    for _ in range(max_new_tokens):
        open_ = [b for b in beams if not b[1] or b[1][-1] != eos]
        if not open_:
            break
        lp = next_logprobs([b[1] for b in open_])
        pool = [b for b in beams if b[1] and b[1][-1] == eos]
        for (score, seq), row in zip(open_, lp):
            for tok in range(len(row)):
                pool.append((score + float(row[tok]), seq + (tok,)))
        pool.sort(key=lambda b: (-b[0], b[1]))
        beams = pool[:beam_size]
    open_ = [b for b in beams if not b[1] or b[1][-1] != eos]
    if open_:
        lp = next_logprobs([b[1] for b in open_])
        closed = [b for b in beams if b[1] and b[1][-1] == eos]
        for (score, seq), row in zip(open_, lp):
            closed.append((score + float(row[eos]), seq + (eos,)))
        closed.sort(key=lambda b: (-b[0], b[1]))
        beams = closed
    best = beams[0]
    return list(best[1]), best[0]


def beam_search(store: ParameterStore, source, beam_size: int, max_new_tokens: int) -> list[int]:
    cfg = config_of(store)
    budget = _budget(cfg, source, max_new_tokens)

    def scorer(prefixes):
        return _log_softmax(next_token_logits(store, [list(source) + list(p) for p in prefixes]))

    if budget == 0:
        return [EOS]
    return beam_search_fn(scorer, beam_size, budget)[0]
