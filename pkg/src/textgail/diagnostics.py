"""Finite-difference checks of the three training losses on small random models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import discriminator as disc
from . import generator as gen
from .data import BOS, EOS, SEP, SequenceExample
from .gail import Episode, ppo_graph
from .nn import GradCheckReport, finite_diff_check
from .transformer import ModelConfig


@dataclass
class NamedCheck:
    name: str
    report: GradCheckReport


def _random_target(rng, vocab_size: int, max_len: int) -> tuple[int, ...]:
    n = int(rng.integers(1, max_len + 1))
    return (*(int(t) for t in rng.integers(4, vocab_size, size=n)), EOS)


def gradient_checks(seed: int = 0, samples: int = 20, h: float = 1e-4, rtol: float = 1e-3) -> list[NamedCheck]:
    """Check mle_loss, discriminator_loss and ppo_loss on tiny random graphs."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=12, d_model=16, n_layers=2, n_heads=2, max_len=16)
    g = gen.init_generator(cfg, seed=seed)
    # widen the initial weights so gradients are not vanishingly small
    for name, arr in g.items():
        if arr.ndim > 1:
            g[name] = arr * 5
    batch = [SequenceExample((BOS,), _random_target(rng, 12, 5)) for _ in range(3)]
    batch.append(SequenceExample((BOS, 5, 6, SEP), _random_target(rng, 12, 4)))
    checks = [NamedCheck("mle_loss", finite_diff_check(gen.mle_graph(cfg), g, {"batch": batch},
                                                       samples, h, rtol, seed=seed))]

    d = disc.init_discriminator(cfg, seed=seed + 1)
    for name, arr in d.items():
        if arr.ndim >= 1 and name != "proj.b":
            d[name] = arr * 5
    pairs = [disc.ContrastivePair((BOS,), batch[i].target, _random_target(rng, 12, 5)) for i in range(4)]
    checks.append(NamedCheck("discriminator_loss", finite_diff_check(disc.loss_graph(cfg), d, {"pairs": pairs},
                                                                     samples, h, rtol, seed=seed)))

    lps = gen.batch_sequence_log_probs(g, [e.source for e in batch], [e.target for e in batch])
    # ratios of exp(+-0.05) stay inside the clip range, away from the kinks
    shifts = rng.choice([-0.05, 0.05], size=len(batch))
    advs = rng.normal(size=len(batch))
    episodes = [Episode(e.source, e.target, float(lp - s), False, 0.0, float(a))
                for e, lp, s, a in zip(batch, lps, shifts, advs)]
    checks.append(NamedCheck("ppo_loss", finite_diff_check(ppo_graph(cfg, 0.2), g, {"episodes": episodes},
                                                           samples, h, rtol, seed=seed)))
    return checks
