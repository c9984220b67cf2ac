"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .gail import GailConfig
from .transformer import ModelConfig


@dataclass
class ExperimentConfig:
    # core training hyper-parameters
    batch_size: int = 32
    sample_batch_size: int = 32
    ppo_buffer_size: int = 128
    ppo_mini_batch_size: int = 8
    ppo_epoch: int = 1
    ppo_epsilon: float = 0.2
    mix_human_ratio: float = 0.3
    human_reward_constant: float = 2.0
    learning_rate: float = 1e-5
    warmup_steps: int = 100
    total_steps: int = 2000
    seed: int = 0

    # data
    task_mode: str = "unconditional"
    train_path: str = ""
    val_path: str = ""
    synthetic_grammar: str = ""
    synthetic_train: int = 1000
    synthetic_val: int = 200
    data_seed: int = 1234
    min_count: int = 1
    warmup_fraction: float = 0.5

    # models
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 64
    disc_d_model: int = 0
    disc_n_layers: int = 0

    # optimisation details not fixed by the table
    lr_warmup_steps: int = -1
    disc_learning_rate: float = -1.0
    # generator learning rate once adversarial training starts
    gail_learning_rate: float = -1.0
    sample_temperature: float = 1.0
    sample_top_p: float = 0.9
    max_new_tokens: int = 32
    ratio_mode: str = "policy"
    mix_decay_steps: int = -1

    # evaluation / stopping
    eval_every: int = 100
    patience: int = 5
    stop_at_perplexity: float = 0.0

    def __post_init__(self):
        if self.task_mode not in ("conditional", "unconditional"):
            raise ConfigError("task_mode must be 'conditional' or 'unconditional'")
        if not (self.train_path or self.synthetic_grammar):
            raise ConfigError("set train_path or synthetic_grammar")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.eval_every < 1 or self.patience < 1:
            raise ConfigError("eval_every and patience must be >= 1")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ConfigError("step counts must be >= 0")
        self.gail_config()

    @property
    def conditional(self) -> bool:
        return self.task_mode == "conditional"

    def gen_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_len)

    def disc_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.disc_d_model or self.d_model, self.disc_n_layers or self.n_layers,
                           self.n_heads, self.max_len)

    def gail_config(self) -> GailConfig:
        return GailConfig(
            buffer_size=self.ppo_buffer_size,
            mini_batch=self.ppo_mini_batch_size,
            ppo_epochs=self.ppo_epoch,
            epsilon=self.ppo_epsilon,
            mix_ratio_initial=self.mix_human_ratio,
            human_reward_constant=self.human_reward_constant,
            total_steps=self.total_steps,
            mix_decay_steps=None if self.mix_decay_steps < 0 else self.mix_decay_steps,
            sample_temperature=self.sample_temperature,
            sample_top_p=self.sample_top_p,
            max_new_tokens=self.max_new_tokens,
            ratio_mode=self.ratio_mode,
            seed=self.seed,
        )

    @property
    def lr_warmup(self) -> int:
        return self.warmup_steps if self.lr_warmup_steps < 0 else self.lr_warmup_steps

    @property
    def disc_lr(self) -> float:
        return self.learning_rate if self.disc_learning_rate <= 0 else self.disc_learning_rate

    @property
    def gail_lr(self) -> float:
        return self.learning_rate if self.gail_learning_rate <= 0 else self.gail_learning_rate

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> ExperimentConfig:
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, known[key].type)
        return cls(**kwargs)

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
        return cls.from_dict(values)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cls.loads(text)
        base = Path(path).resolve().parent
        for attr in ("train_path", "val_path"):
            val = getattr(cfg, attr)
            if val and not Path(val).is_absolute():
                setattr(cfg, attr, str(base / val))
        for attr in ("train_path", "val_path"):
            val = getattr(cfg, attr)
            if val and not Path(val).exists():
                raise ConfigError(f"{attr} does not exist: {val}")
        return cfg


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("int", int):
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw
