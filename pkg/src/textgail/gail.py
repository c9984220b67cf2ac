"""Adversarial imitation training: replay buffer, reward normalisation and PPO."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import discriminator as disc
from . import generator as gen
from . import nn
from .data import SequenceExample
from .errors import ConfigError, InsufficientData, NumericsError
from .nn import Graph, OptimizerState, ParameterStore
from .rng import stream

RATIO_CLAMP = 20.0
STD_EPS = 1e-8


@dataclass
class GailConfig:
    buffer_size: int = 128
    mini_batch: int = 8
    ppo_epochs: int = 1
    epsilon: float = 0.2
    mix_ratio_initial: float = 0.3
    human_reward_constant: float = 2.0
    total_steps: int = 2000
    # step at which the human mix ratio reaches zero; None means total_steps
    mix_decay_steps: int | None = None
    sample_temperature: float = 1.0
    sample_top_p: float = 0.9
    max_new_tokens: int = 32
    # "policy": PPO ratios use raw G_theta; "decoder": temperature/nucleus-modified probabilities
    ratio_mode: str = "policy"
    freeze_discriminator: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.mix_ratio_initial <= 1:
            raise ConfigError("mix_ratio_initial must lie in [0, 1]")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.mini_batch < 1 or self.buffer_size % self.mini_batch:
            raise ConfigError("buffer_size must be divisible by mini_batch")
        if self.ratio_mode not in ("policy", "decoder"):
            raise ConfigError("ratio_mode must be 'policy' or 'decoder'")


@dataclass
class Episode:
    source: tuple[int, ...]
    target: tuple[int, ...]
    old_log_prob: float
    is_human: bool
    raw_reward: float | None = None
    advantage: float | None = None
    # ground-truth partner used to form the discriminator pair
    real: tuple[int, ...] | None = None


@dataclass
class RunningStats:
    """Welford accumulator in float64; ``std`` is the population deviation."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, values) -> None:
        for x in values:
            x = float(x)
            self.count += 1
            delta = x - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass
class ReplayBuffer:
    capacity: int
    episodes: list[Episode] = field(default_factory=list)
    reward_stats: RunningStats = field(default_factory=RunningStats)

    def add(self, episode: Episode) -> None:
        if len(self.episodes) >= self.capacity:
            raise ConfigError("replay buffer is full")
        self.episodes.append(episode)

    def clear(self) -> None:
        self.episodes.clear()

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def generated(self) -> list[Episode]:
        return [e for e in self.episodes if not e.is_human]

    @property
    def human(self) -> list[Episode]:
        return [e for e in self.episodes if e.is_human]


def mix_schedule(step: int, cfg: GailConfig) -> float:
    horizon = cfg.mix_decay_steps if cfg.mix_decay_steps is not None else cfg.total_steps
    if horizon <= 0:
        return 0.0
    p = cfg.mix_ratio_initial * (1.0 - step / horizon)
    return min(max(p, 0.0), cfg.mix_ratio_initial)


def human_count(p: float, buffer_size: int) -> int:
    # round half up; Python's round() would send 0.5 to the even neighbour
    return int(math.floor(p * buffer_size + 0.5))


def _old_log_probs(gen_store: ParameterStore, sources, targets, cfg: GailConfig) -> np.ndarray:
    if cfg.ratio_mode == "decoder":
        return gen.batch_sequence_log_probs(gen_store, sources, targets, cfg.sample_temperature, cfg.sample_top_p)
    return gen.batch_sequence_log_probs(gen_store, sources, targets)


def fill_buffer(gen_store: ParameterStore, disc_store: ParameterStore, dataset: Sequence[SequenceExample],
                step: int, cfg: GailConfig, rng_seed: int | None = None,
                buffer: ReplayBuffer | None = None) -> ReplayBuffer:
    """Fill a buffer with human demonstrations and fresh policy samples.

    Generated episodes are paired with the target of a uniformly drawn
    dataset example; for conditional data the prompt comes from that same
    example, so the partner is the ground truth for the prompt.
    """
    if not dataset:
        raise InsufficientData("dataset is empty")
    seed = cfg.seed if rng_seed is None else rng_seed
    buffer = buffer if buffer is not None else ReplayBuffer(cfg.buffer_size)
    buffer.clear()
    rng = stream(seed, "fill", step)
    n_human = human_count(mix_schedule(step, cfg), cfg.buffer_size)
    n_gen = cfg.buffer_size - n_human
    human_idx = rng.integers(len(dataset), size=n_human)
    gen_idx = rng.integers(len(dataset), size=n_gen)

    sources = [dataset[i].source for i in human_idx]
    targets = [dataset[i].target for i in human_idx]
    if n_gen:
        decode = gen.DecodeParams(cfg.sample_temperature, cfg.sample_top_p, cfg.max_new_tokens)
        prompts = [dataset[i].source for i in gen_idx]
        samples = gen.sample_batch(gen_store, prompts, decode, stream(seed, "sample", step))
        sources += prompts
        targets += [tuple(s[0]) for s in samples]
    old = _old_log_probs(gen_store, sources, targets, cfg) if sources else np.zeros(0)

    pairs = [disc.ContrastivePair(tuple(dataset[i].source), tuple(dataset[i].target), tuple(t))
             for i, t in zip(gen_idx, targets[n_human:])]
    rewards = disc.batch_rewards(disc_store, pairs) if pairs else np.zeros(0)

    for k in range(n_human):
        buffer.add(Episode(tuple(sources[k]), tuple(targets[k]), float(old[k]), True))
    for j, pair in enumerate(pairs):
        k = n_human + j
        buffer.add(Episode(pair.prompt, pair.generated, float(old[k]), False,
                           raw_reward=float(rewards[j]), real=pair.real))
    return buffer


def normalize_rewards(buffer: ReplayBuffer, human_reward_constant: float = 2.0) -> ReplayBuffer:
    generated = buffer.generated
    if len(generated) < 2:
        raise InsufficientData("need at least two generated episodes to normalise rewards")
    stats = buffer.reward_stats
    stats.update(e.raw_reward for e in generated)
    mean, std = stats.mean, stats.std
    for e in generated:
        e.advantage = (e.raw_reward - mean) / (std + STD_EPS)
    for e in buffer.human:
        e.advantage = human_reward_constant
    return buffer


# --- PPO --------------------------------------------------------------------

def clipped_surrogate(ratio, advantage, epsilon: float) -> float:
    """Mean of ``-min(r A, clip(r, 1-eps, 1+eps) A)`` on plain numbers."""
    r = np.asarray(ratio, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    return float(np.mean(-np.minimum(r * a, np.clip(r, 1 - epsilon, 1 + epsilon) * a)))


def _new_log_probs(params, model_cfg, episodes, cfg: GailConfig | None):
    sources = [e.source for e in episodes]
    targets = [e.target for e in episodes]
    if cfg is not None and cfg.ratio_mode == "decoder":
        return gen.sequence_log_probs(params, model_cfg, sources, targets, cfg.sample_temperature, cfg.sample_top_p)
    return gen.sequence_log_probs(params, model_cfg, sources, targets)


def ppo_loss_fn(params: dict, model_cfg, episodes: Sequence[Episode], epsilon: float,
                cfg: GailConfig | None = None):
    new_lp = _new_log_probs(params, model_cfg, episodes, cfg)
    old = np.array([e.old_log_prob for e in episodes])
    adv = np.array([e.advantage for e in episodes], dtype=np.float64)
    ratio = nn.exp(nn.clip(new_lp - old, -RATIO_CLAMP, RATIO_CLAMP))
    unclipped = ratio * adv
    clipped = nn.clip(ratio, 1 - epsilon, 1 + epsilon) * adv
    return -nn.minimum(unclipped, clipped).mean(), ratio


def ppo_graph(model_cfg, epsilon: float, cfg: GailConfig | None = None) -> Graph:
    def fn(params, inputs):
        loss, ratio = ppo_loss_fn(params, model_cfg, inputs["episodes"], epsilon, cfg)
        return {"loss": loss, "ratio": ratio}

    return Graph(fn, "ppo_loss")


def ppo_ratio(gen_store: ParameterStore, episode: Episode, cfg: GailConfig | None = None) -> float:
    params = nn.leaves(gen_store)
    new_lp = float(_new_log_probs(params, gen.config_of(gen_store), [episode], cfg).data[0])
    return math.exp(min(max(new_lp - episode.old_log_prob, -RATIO_CLAMP), RATIO_CLAMP))


def ppo_loss(gen_store: ParameterStore, batch: Sequence[Episode], epsilon: float,
             cfg: GailConfig | None = None) -> float:
    out = nn.forward(ppo_graph(gen.config_of(gen_store), epsilon, cfg), gen_store, {"episodes": list(batch)})
    return float(out["loss"])


# --- training loop ----------------------------------------------------------

@dataclass
class TrainState:
    gen: ParameterStore
    disc: ParameterStore
    gen_opt: OptimizerState
    disc_opt: OptimizerState
    buffer: ReplayBuffer

    def snapshot(self) -> TrainState:
        buf = ReplayBuffer(self.buffer.capacity, list(self.buffer.episodes),
                           RunningStats(self.buffer.reward_stats.count, self.buffer.reward_stats.mean,
                                        self.buffer.reward_stats.m2))
        return TrainState(self.gen.copy(), self.disc.copy(), self.gen_opt.copy(), self.disc_opt.copy(), buf)

    def restore(self, snap: TrainState) -> None:
        for name in ("gen", "disc", "gen_opt", "disc_opt", "buffer"):
            src, dst = getattr(snap, name), getattr(self, name)
            dst.__dict__.update(src.__dict__)


@dataclass
class StepReport:
    step: int
    mean_raw_reward: float
    mean_ratio: float
    d_loss: float
    g_loss: float
    n_human: int
    n_generated: int
    gen_updates: int
    disc_updates: int


def _minibatches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def update_discriminator(state: TrainState, step: int, cfg: GailConfig) -> tuple[float, int]:
    """One pass over the buffer's (real, generated) pairs; returns mean pre-update loss."""
    generated = state.buffer.generated
    pairs = [disc.ContrastivePair(e.source, e.real, e.target) for e in generated]
    if cfg.freeze_discriminator or not pairs:
        return (disc.discriminator_loss(state.disc, pairs) if pairs else float("nan")), 0
    graph = disc.loss_graph(disc.config_of(state.disc))
    losses = []
    for idx in _minibatches(len(pairs), cfg.mini_batch, stream(cfg.seed, "disc", step)):
        loss, grads = nn.backward(graph, state.disc, {"pairs": [pairs[i] for i in idx]})
        nn.adam_step(state.disc, grads, state.disc_opt)
        losses.append(loss)
    return float(np.mean(losses)), len(losses)


def update_generator(state: TrainState, step: int, cfg: GailConfig) -> tuple[float, float, int]:
    episodes = state.buffer.episodes
    graph = ppo_graph(gen.config_of(state.gen), cfg.epsilon, cfg)
    losses, ratios, updates = [], [], 0
    for epoch in range(cfg.ppo_epochs):
        for idx in _minibatches(len(episodes), cfg.mini_batch, stream(cfg.seed, "ppo", step, epoch)):
            batch = [episodes[i] for i in idx]
            leaves, out = graph.build(state.gen, {"episodes": batch}, grad=True)
            out["loss"].backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
            nn.adam_step(state.gen, grads, state.gen_opt)
            losses.append(float(out["loss"].data))
            ratios.extend(out["ratio"].data.tolist())
            updates += 1
    return float(np.mean(losses)), float(np.mean(ratios)), updates


def train_step(state: TrainState, dataset: Sequence[SequenceExample], step: int, cfg: GailConfig) -> StepReport:
    """One adversarial iteration; on NumericsError every store is rolled back."""
    snap = state.snapshot()
    try:
        fill_buffer(state.gen, state.disc, dataset, step, cfg, buffer=state.buffer)
        normalize_rewards(state.buffer, cfg.human_reward_constant)
        gen_eps = state.buffer.generated
        mean_reward = float(np.mean([e.raw_reward for e in gen_eps])) if gen_eps else float("nan")
        n_human, n_gen = len(state.buffer.human), len(gen_eps)
        d_loss, d_updates = update_discriminator(state, step, cfg)
        g_loss, mean_ratio, g_updates = update_generator(state, step, cfg)
    except NumericsError:
        state.restore(snap)
        raise
    state.buffer.clear()
    return StepReport(step, mean_reward, mean_ratio, d_loss, g_loss, n_human, n_gen, g_updates, d_updates)


def warmup_mle(gen_store: ParameterStore, dataset: Sequence[SequenceExample], steps: int, opt: OptimizerState,
               batch_size: int = 32, seed: int = 0, fraction: float = 0.5) -> list[float]:
    """MLE warm-up on the leading ``fraction`` of the dataset; returns per-step losses."""
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    subset = list(dataset[: max(1, math.ceil(len(dataset) * fraction))])
    losses = []
    for t in range(steps):
        idx = stream(seed, "warmup", t).integers(len(subset), size=batch_size)
        loss, grads = gen.mle_grads(gen_store, [subset[i] for i in idx])
        nn.adam_step(gen_store, grads, opt)
        losses.append(loss)
    return losses
