"""Model and run configuration.

Defaults follow the reference hyper-parameter setting (d=256, N=10, H=4,
T=5, dropout 0.3, lr 0.005, L=2, lambda=1, mu=(0.9, 0.1)); the ``desk``
preset shrinks the model for fast local runs and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingConfig:
    """Auxiliary output scaling by graph centrality and textual entropy."""

    enabled: bool = True
    mu1: float = 0.9
    mu2: float = 0.1
    delta: float = 1e-4

    def __post_init__(self):
        if self.enabled:
            if not (0.0 < self.mu1 < 1.0 and 0.0 < self.mu2 < 1.0):
                raise ConfigError("mu1 and mu2 must lie in (0, 1)")
        if self.delta <= 0.0:
            raise ConfigError("delta must be positive")


@dataclass(frozen=True)
class DjeConfig:
    """Shape and regularization hyper-parameters of one estimator."""

    d: int = 256
    N: int = 10
    H: int = 4
    L: int = 2
    dropout: float = 0.3
    share_decoder_qkv: bool = True

    def __post_init__(self):
        if self.d % self.H != 0:
            raise ConfigError(f"d={self.d} must be divisible by H={self.H}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.L < 0 or self.N < 1 or self.H < 1:
            raise ConfigError("L >= 0, N >= 1, H >= 1 required")

    @property
    def d_head(self) -> int:
        return self.d // self.H

    @property
    def d_ff(self) -> int:
        return 2 * self.d

    @property
    def d_edge(self) -> int:
        return self.d


@dataclass(frozen=True)
class RankingConfig:
    enabled: bool = False
    n: int = 5
    weight: float = 0.1

    def __post_init__(self):
        if self.enabled and self.n < 2:
            raise ConfigError("ranking sample size n must be >= 2")


@dataclass(frozen=True)
class RunConfig:
    """Full training/evaluation configuration for the CLI and trainer."""

    d: int = 256
    N: int = 10
    H: int = 4
    T: int = 5
    L: int = 2
    dropout: float = 0.3
    lr: float = 0.005
    lam: float = 1.0
    mu1: float = 0.9
    mu2: float = 0.1
    delta: float = 1e-4
    epochs: int = 200
    seed: int = 0
    k: int = 100
    scaling_enabled: bool = True
    log1p_labels: bool = False
    heteroscedastic: bool = True
    ranking_enabled: bool = False
    ranking_n: int = 5
    ranking_weight: float = 0.1
    patience: Optional[int] = None
    val_every: int = 1
    split_ratios: Tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    combine: str = "mean"  # or "model1"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")
        if self.combine not in ("mean", "model1"):
            raise ConfigError("combine must be 'mean' or 'model1'")
        self.model_config()  # validates d/H/L/dropout
        self.scaling_config()

    def model_config(self) -> DjeConfig:
        return DjeConfig(d=self.d, N=self.N, H=self.H, L=self.L,
                         dropout=self.dropout)

    def scaling_config(self) -> ScalingConfig:
        return ScalingConfig(enabled=self.scaling_enabled, mu1=self.mu1,
                             mu2=self.mu2, delta=self.delta)

    def ranking_config(self) -> RankingConfig:
        return RankingConfig(enabled=self.ranking_enabled, n=self.ranking_n,
                             weight=self.ranking_weight)


# shrunken model for fast acceptance runs and local iteration
DESK_PRESET = {"d": 32, "N": 5, "H": 2, "L": 1}

_KEY_ALIASES = {"lambda": "lam"}
_BOOL_FIELDS = {"scaling_enabled", "log1p_labels", "heteroscedastic",
                "ranking_enabled"}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if name in _BOOL_FIELDS:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {name!r}: expected a boolean, got {raw!r}")
    if name == "patience":
        return None if raw.lower() in ("none", "") else int(raw)
    if name == "combine":
        return raw
    if name == "split_ratios":
        parts = [float(p) for p in raw.split("/")]
        if len(parts) != 3:
            raise ConfigError("split_ratios must be three values a/b/c")
        return tuple(parts)
    field_types = {f.name: f.type for f in fields(RunConfig)}
    if field_types.get(name) == "int":
        return int(raw)
    return float(raw)


def parse_config_file(path) -> dict:
    """Read a flat `key = value` file into a RunConfig override dict."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (p.strip() for p in line.split("=", 1))
            key = _KEY_ALIASES.get(key, key)
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _parse_value(key, raw)
    return out


def make_run_config(file_overrides: dict | None = None,
                    flag_overrides: dict | None = None,
                    preset: str | None = None) -> RunConfig:
    """Layer config sources: defaults < preset < config file < CLI flags."""
    values: dict = {}
    if preset == "desk":
        values.update(DESK_PRESET)
    elif preset not in (None, "full"):
        raise ConfigError(f"unknown preset {preset!r}")
    values.update(file_overrides or {})
    values.update({k: v for k, v in (flag_overrides or {}).items()
                   if v is not None})
    return RunConfig(**values)
