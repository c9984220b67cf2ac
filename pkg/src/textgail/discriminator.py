"""Contrastive discriminator: scores a real and a generated continuation jointly.

Both sequences go through the same bidirectional encoder, a shared linear
map turns each pooled embedding into one logit, and a two-way softmax over
the logits gives ``(p_real, p_generated)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .data import BOS, EOS, PAD, SEP, SPECIAL_IDS
from .errors import LengthError
from .nn import Graph, ParameterStore, Tensor
from .transformer import ModelConfig, init_stack, pad_batch, run_stack

DiscriminatorConfig = ModelConfig


@dataclass(frozen=True)
class ContrastivePair:
    prompt: tuple[int, ...]
    real: tuple[int, ...]
    generated: tuple[int, ...]

    def __post_init__(self):
        if not self.real or not self.generated:
            raise LengthError("real and generated sequences must be non-empty")


def init_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    store = ParameterStore(meta={"kind": "discriminator", "config": cfg.to_dict()})
    init_stack(store, cfg, rng)
    store.add("proj.w", rng.normal(0, 0.02, (cfg.d_model,)))
    store.add("proj.b", np.zeros(1))
    return store


def config_of(store: ParameterStore) -> DiscriminatorConfig:
    return ModelConfig(**store.meta["config"])


def pack(prompt: Sequence[int], sequence: Sequence[int]) -> list[int]:
    """BOS + prompt + SEP + sequence + EOS, with any specials already present stripped."""
    body_p = [t for t in prompt if t not in SPECIAL_IDS]
    body_s = [t for t in sequence if t not in SPECIAL_IDS]
    return [BOS, *body_p, SEP, *body_s, EOS]


def embed_fn(params: dict, cfg: DiscriminatorConfig, packed: Sequence[Sequence[int]]) -> Tensor:
    for p in packed:
        if len(p) > cfg.max_len:
            raise LengthError(f"packed length {len(p)} exceeds max_len {cfg.max_len}")
    ids, lengths = pad_batch(packed, PAD)
    h = run_stack(params, cfg, ids, lengths, causal=False)
    return h[:, 0, :]


def pair_logits(params: dict, cfg: DiscriminatorConfig, pairs: Sequence[ContrastivePair]) -> tuple[Tensor, Tensor]:
    packed = [pack(p.prompt, p.real) for p in pairs] + [pack(p.prompt, p.generated) for p in pairs]
    emb = embed_fn(params, cfg, packed)
    logits = emb @ params["proj.w"] + params["proj.b"]
    n = len(pairs)
    return logits[:n], logits[n:]


def disc_loss_fn(params: dict, cfg: DiscriminatorConfig, pairs: Sequence[ContrastivePair]) -> Tensor:
    # -log p_r = softplus(l_g - l_r)
    l_r, l_g = pair_logits(params, cfg, pairs)
    return nn.softplus(l_g - l_r).mean()


def loss_graph(cfg: DiscriminatorConfig) -> Graph:
    return Graph(lambda params, inputs: {"loss": disc_loss_fn(params, cfg, inputs["pairs"])}, "discriminator_loss")


def encode(store: ParameterStore, prompt, sequence) -> np.ndarray:
    cfg = config_of(store)
    return embed_fn(nn.leaves(store), cfg, [pack(prompt, sequence)]).data[0].astype(np.float64)


def _probs_from_logits(l_r: np.ndarray, l_g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # written so that swapping the arguments swaps the outputs bit-for-bit
    p_r = 1.0 / (1.0 + np.exp(l_g - l_r))
    p_g = 1.0 / (1.0 + np.exp(l_r - l_g))
    return p_r, p_g


def _logit(store: ParameterStore, prompt, sequence) -> float:
    h = encode(store, prompt, sequence)
    return float(h @ store["proj.w"].astype(np.float64) + float(store["proj.b"][0]))


def contrast(store: ParameterStore, pair: ContrastivePair) -> tuple[float, float]:
    # each side encoded on its own so the result cannot depend on batch position
    l_r = _logit(store, pair.prompt, pair.real)
    l_g = _logit(store, pair.prompt, pair.generated)
    p_r, p_g = _probs_from_logits(np.float64(l_r), np.float64(l_g))
    return float(p_r), float(p_g)


def discriminator_loss(store: ParameterStore, pairs: Sequence[ContrastivePair]) -> float:
    if not pairs:
        raise ValueError("pairs must be non-empty")
    return float(nn.forward(loss_graph(config_of(store)), store, {"pairs": list(pairs)})["loss"])


def discriminator_grads(store: ParameterStore, pairs: Sequence[ContrastivePair]) -> tuple[float, dict]:
    return nn.backward(loss_graph(config_of(store)), store, {"pairs": list(pairs)})


def reward(store: ParameterStore, pair: ContrastivePair) -> float:
    """p_g for the generated member; a plain float, so nothing flows back to the generator."""
    return contrast(store, pair)[1]


def batch_rewards(store: ParameterStore, pairs: Sequence[ContrastivePair], chunk: int = 64) -> np.ndarray:
    cfg = config_of(store)
    params = nn.leaves(store)
    out = []
    for i in range(0, len(pairs), chunk):
        l_r, l_g = pair_logits(params, cfg, pairs[i:i + chunk])
        out.append(_probs_from_logits(l_r.data.astype(np.float64), l_g.data.astype(np.float64))[1])
    return np.concatenate(out) if out else np.zeros(0)


def classify_pair(store: ParameterStore, prompt, candidate_a, candidate_b) -> str:
    p_r, _ = contrast(store, ContrastivePair(tuple(prompt), tuple(candidate_a), tuple(candidate_b)))
    return "B" if p_r < 0.5 else "A"
