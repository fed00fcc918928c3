"""Flat ``key = value`` experiment configuration and its hash.

Every key is either a synthetic-task field or a bench field below. Lines
starting with ``#`` are comments. Example::

    # two domains, short schedule
    n_domains = 2
    epochs = 10
    kernel = laplacian
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from kster.evalbench.synth import SynthTaskConfig
from kster.kernels import KernelKind


@dataclass(frozen=True)
class BenchConfig:
    task: SynthTaskConfig = field(default_factory=SynthTaskConfig)
    # toy base model
    embed_dim: int = 32
    alpha: float = 0.01
    gamma: float = 0.7
    context_scale: float = 0.5
    # retrieval and adapter training
    k: int = 16
    kernel: str = "gaussian"
    epochs: int = 30
    batch_tokens: int = 256
    lr: float = 0.005
    hidden: int = 0          # 0 means hidden size = datastore dim
    # evaluation
    noise_p: float = 0.1
    bootstrap_resamples: int = 1000
    beam: int = 1

    def validate(self):
        self.task.validate()
        KernelKind(self.kernel)
        for name in ("embed_dim", "k", "epochs", "batch_tokens", "beam", "bootstrap_resamples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.noise_p <= 1.0:
            raise ValueError("noise_p must lie in [0, 1]")
        return self

    @property
    def hidden_size(self):
        return self.hidden or None

    def with_seed(self, seed):
        return replace(self, task=replace(self.task, seed=int(seed)))

    def to_flat(self):
        flat = asdict(self.task)
        flat.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "task"})
        return flat

    @classmethod
    def from_flat(cls, values):
        task_names = {f.name: f for f in fields(SynthTaskConfig)}
        bench_names = {f.name: f for f in fields(cls) if f.name != "task"}
        defaults = cls()
        task_kw, bench_kw = {}, {}
        for key, raw in values.items():
            if key in task_names:
                task_kw[key] = _coerce(getattr(defaults.task, key), raw, key)
            elif key in bench_names:
                bench_kw[key] = _coerce(getattr(defaults, key), raw, key)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(task=replace(defaults.task, **task_kw), **bench_kw).validate()


def _coerce(default, raw, key):
    if not isinstance(raw, str):
        return type(default)(raw)
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        return type(default)(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from None


def parse_config(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = value
    return BenchConfig.from_flat(values)


def load_config(path=None):
    if path is None:
        return BenchConfig().validate()
    return parse_config(Path(path).read_text())


def dump_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in sorted(cfg.to_flat().items()))


def config_hash(cfg):
    """First 16 hex digits of SHA-256 over the canonical flat config."""
    blob = json.dumps(cfg.to_flat(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
