"""Binary checkpoint format.

Layout::

    TGAIL01\\n
    @meta <json>\\n            (optional, one line)
    <name> <d1>x<d2>...\\n     (one line per array)
    \\n
    <float32 little-endian values, arrays in header order>
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .gail import RunningStats
from .nn import OptimizerState, ParameterStore

MAGIC = b"TGAIL01\n"


class CheckpointError(ConfigError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    lines = []
    if meta is not None:
        lines.append("@meta " + json.dumps(meta, sort_keys=True, separators=(",", ":")))
    for name, arr in arrays.items():
        if " " in name or not name:
            raise CheckpointError(f"invalid array name {name!r}")
        if arr.ndim == 0:
            raise CheckpointError(f"array {name!r} must have at least one dimension")
        lines.append(f"{name} {'x'.join(str(d) for d in arr.shape)}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    return MAGIC + header + body


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic")
    end = blob.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise CheckpointError("unterminated header")
    header = blob[len(MAGIC):end].decode("utf-8")
    body = blob[end + 2:]
    meta, shapes = None, []
    for line in header.split("\n") if header else []:
        if line.startswith("@meta "):
            meta = json.loads(line[6:])
            continue
        name, _, dims = line.partition(" ")
        try:
            shape = tuple(int(d) for d in dims.split("x"))
        except ValueError:
            raise CheckpointError(f"bad shape in header line {line!r}") from None
        shapes.append((name, shape))
    expected = sum(int(np.prod(s)) for _, s in shapes) * 4
    if len(body) != expected:
        raise CheckpointError(f"payload is {len(body)} bytes, header describes {expected}")
    arrays, offset = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(body, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape)
        offset += 4 * n
    return arrays, meta


def _opt_meta(opt: OptimizerState) -> dict:
    return {"base_lr": opt.base_lr, "warmup_steps": opt.warmup_steps, "beta1": opt.beta1,
            "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}


@dataclass
class Checkpoint:
    gen: ParameterStore
    step: int
    config_hash: str
    disc: ParameterStore | None = None
    gen_opt: OptimizerState | None = None
    disc_opt: OptimizerState | None = None
    reward_stats: RunningStats = field(default_factory=RunningStats)
    vocab: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        arrays: dict[str, np.ndarray] = {}
        meta = {"step": self.step, "config_hash": self.config_hash, "vocab": self.vocab, "extra": self.extra,
                "reward_stats": [self.reward_stats.count, self.reward_stats.mean, self.reward_stats.m2]}
        for prefix, store in (("gen", self.gen), ("disc", self.disc)):
            if store is None:
                continue
            meta[prefix] = {"meta": store.meta, "step_count": store.step_count}
            arrays.update({f"{prefix}.{k}": v for k, v in store.items()})
        for prefix, opt in (("gen_opt", self.gen_opt), ("disc_opt", self.disc_opt)):
            if opt is None:
                continue
            meta[prefix] = _opt_meta(opt)
            arrays.update({f"{prefix}.m.{k}": v for k, v in opt.m.items()})
            arrays.update({f"{prefix}.v.{k}": v for k, v in opt.v.items()})
        return dumps(arrays, meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> Checkpoint:
        arrays, meta = loads(blob)
        if meta is None:
            raise CheckpointError("checkpoint has no metadata line")

        def store(prefix):
            if prefix not in meta:
                return None
            entries = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
            return ParameterStore(entries, meta[prefix]["step_count"], meta[prefix]["meta"])

        def opt(prefix):
            if prefix not in meta:
                return None
            st = OptimizerState(**meta[prefix])
            for k, v in arrays.items():
                if k.startswith(prefix + ".m."):
                    st.m[k[len(prefix) + 3:]] = v
                elif k.startswith(prefix + ".v."):
                    st.v[k[len(prefix) + 3:]] = v
            return st

        count, mean, m2 = meta["reward_stats"]
        return cls(store("gen"), meta["step"], meta["config_hash"], store("disc"), opt("gen_opt"),
                   opt("disc_opt"), RunningStats(count, mean, m2), meta["vocab"], meta["extra"])

    @classmethod
    def load(cls, path: str | Path, expect_hash: str | None = None) -> Checkpoint:
        ckpt = cls.from_bytes(Path(path).read_bytes())
        if expect_hash is not None and ckpt.config_hash != expect_hash:
            raise CheckpointError("checkpoint was written under a different configuration")
        return ckpt
