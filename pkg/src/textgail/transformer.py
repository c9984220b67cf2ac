"""Pre-LayerNorm transformer stack shared by the generator and discriminator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import ConfigError, LengthError
from .nn import ParameterStore, Tensor

NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_len) < 1:
            raise ConfigError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def init_stack(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> None:
    d = cfg.d_model
    store.add("tok_emb", rng.normal(0, std, (cfg.vocab_size, d)))
    store.add("pos_emb", rng.normal(0, std, (cfg.max_len, d)))
    proj_std = std / math.sqrt(2 * cfg.n_layers)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        store.add(p + "ln1.g", np.ones(d))
        store.add(p + "ln1.b", np.zeros(d))
        store.add(p + "attn.w_qkv", rng.normal(0, std, (d, 3 * d)))
        store.add(p + "attn.b_qkv", np.zeros(3 * d))
        store.add(p + "attn.w_o", rng.normal(0, proj_std, (d, d)))
        store.add(p + "attn.b_o", np.zeros(d))
        store.add(p + "ln2.g", np.ones(d))
        store.add(p + "ln2.b", np.zeros(d))
        store.add(p + "mlp.w_in", rng.normal(0, std, (d, 4 * d)))
        store.add(p + "mlp.b_in", np.zeros(4 * d))
        store.add(p + "mlp.w_out", rng.normal(0, proj_std, (4 * d, d)))
        store.add(p + "mlp.b_out", np.zeros(d))
    store.add("ln_f.g", np.ones(d))
    store.add("ln_f.b", np.zeros(d))


def attention_mask(lengths: np.ndarray, width: int, causal: bool) -> np.ndarray:
    """Additive mask of shape (B, 1, L, L) blocking padding keys and, optionally, the future."""
    keys = np.arange(width)[None, :] < np.asarray(lengths)[:, None]
    mask = np.where(keys[:, None, None, :], 0.0, NEG_INF)
    if causal:
        future = np.triu(np.ones((width, width), dtype=bool), k=1)
        mask = np.where(future[None, None], NEG_INF, mask)
    return mask


def attention(params: dict, prefix: str, x: Tensor, mask: np.ndarray, n_heads: int) -> Tensor:
    B, L, d = x.shape
    hd = d // n_heads
    qkv = x @ params[prefix + "w_qkv"] + params[prefix + "b_qkv"]
    qkv = qkv.reshape(B, L, 3, n_heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    att = nn.softmax(scores, mask)
    y = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return y @ params[prefix + "w_o"] + params[prefix + "b_o"]


def run_stack(params: dict, cfg: ModelConfig, ids: np.ndarray, lengths: np.ndarray, causal: bool) -> Tensor:
    """Embed a right-padded (B, L) id batch and run every block; returns (B, L, d)."""
    ids = np.asarray(ids)
    B, L = ids.shape
    if L > cfg.max_len:
        raise LengthError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    x = nn.embedding(params["tok_emb"], ids) + params["pos_emb"][:L]
    mask = attention_mask(lengths, L, causal)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        h = nn.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = x + attention(params, p + "attn.", h, mask, cfg.n_heads)
        h = nn.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = nn.gelu(h @ params[p + "mlp.w_in"] + params[p + "mlp.b_in"])
        x = x + (h @ params[p + "mlp.w_out"] + params[p + "mlp.b_out"])
    return nn.layer_norm(x, params["ln_f.g"], params["ln_f.b"])


def pad_batch(seqs, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths
