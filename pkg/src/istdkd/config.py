"""Run configuration: a flat TOML file whose keys map one-to-one onto ``RunConfig``."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError

ALIASES = {"vfm.provider": "provider"}

# keys that may change between a run and its resume
RUNTIME_KEYS = ("epochs", "data_dir", "out_dir", "token_cache", "threads")


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 0
    epochs: int = 300
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lambda_in: float = 0.1
    lambda_out: float = 1.0
    lambda_gate: float = 5e-3
    tau: float = 4.0
    n_blocks: int = 12
    patch: int = 16
    dim: int = 384
    hidden: int = 64
    gate_init: float = 0.1
    channels: list = field(default_factory=lambda: [8, 16, 32])
    bilevel_period: int = 5
    gn_steps: int = 4
    val_ratio: float = 0.1
    k_c: int = 8
    eta: float | None = None
    eps: float = 1e-8
    provider: str = "stub"
    provider_fallback: bool = False
    provider_seed: int = 0
    token_cache: str = ""
    use_vfm: bool = True
    use_val: bool = True
    use_reweight: bool = True
    inner_kd: bool = True
    outer_kd: bool = True
    evolve_window: int = 33
    evolve_blend: float = 0.5
    evolve_cap: float = 0.01
    evolve_from: int = 1
    threads: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def inner_lr(self):
        return self.lr if self.eta is None else self.eta

    def validate(self):
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("epochs must be >= 0 and batch >= 1")
        if self.lr <= 0 or self.inner_lr <= 0 or self.eps <= 0:
            raise ConfigError("lr, eta and eps must be positive")
        if min(self.lambda_in, self.lambda_out, self.lambda_gate) < 0 or self.tau <= 0:
            raise ConfigError("loss weights must be >= 0 and tau > 0")
        if self.bilevel_period < 1 or self.gn_steps < 0:
            raise ConfigError("bilevel_period must be >= 1 and gn_steps >= 0")
        if not 0 < self.val_ratio < 1:
            raise ConfigError(f"val_ratio must lie in (0, 1), got {self.val_ratio}")
        if self.k_c < 1 or self.n_blocks < 1:
            raise ConfigError("k_c and n_blocks must be >= 1")
        if self.provider not in ("stub", "dinov3"):
            raise ConfigError(f"vfm.provider must be 'stub' or 'dinov3', got {self.provider!r}")
        if len(self.channels) != 3:
            raise ConfigError("channels must list three encoder widths")
        if self.evolve_window < 1 or self.evolve_window % 2 == 0:
            raise ConfigError("evolve_window must be a positive odd integer")

    @classmethod
    def from_dict(cls, raw):
        flat = _flatten(raw)
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in flat.items():
            name = ALIASES.get(key, key)
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        lines = []
        for key, value in self.to_dict().items():
            if value is None:
                continue
            lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    def hash(self):
        d = {k: v for k, v in self.to_dict().items() if k not in RUNTIME_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _flatten(raw, prefix=""):
    out = {}
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out
