"""Experiment configuration: one flat dataclass, readable from a key=value
text file, with every protocol hyperparameter defaulted to its standard
setting.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def default_dims() -> dict[int, float]:
    return {8: 0.2, 16: 0.2, 32: 0.2, 64: 0.2, 128: 0.2}


@dataclass
class ExperimentConfig:
    # data
    checkins: str = ""
    friends: str = ""
    min_interactions: int = 10
    max_seq_len: int = 200
    reference_fraction: float = 0.10
    k_regions: int = 5
    n_candidates: int = 200
    # model
    dims: dict[int, float] = field(default_factory=default_dims)
    dropout: float = 0.2
    lr: float = 0.002
    batch_size: int = 16
    # collaboration
    gamma: float = 0.5
    mu: float = 0.7
    h: int = 50
    alpha: int = 5
    beta: int = 10
    tau_pct: float = 1.0
    sampling: str = "performance"  # performance | similarity | none
    # reference data
    refgen: str = "transformative"  # original | transformative | probabilistic
    v_r: int = 20
    z: int = 50
    gen_seq_len: int = 20
    max_hop_km: float = 5.0
    # schedule
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def validate(self) -> None:
        if not self.dims:
            raise ConfigError("dims must not be empty")
        total = sum(self.dims.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"dimension fractions must sum to 1 (got {total})")
        if any(d < 1 for d in self.dims):
            raise ConfigError("latent dimensions must be positive")
        if not (0.0 <= self.mu <= 1.0):
            raise ConfigError("mu must be in [0, 1]")
        if self.gamma < 0.0:
            raise ConfigError("gamma must be >= 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.sampling not in ("performance", "similarity", "none"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.refgen not in ("original", "transformative", "probabilistic"):
            raise ConfigError(f"unknown refgen mode {self.refgen!r}")
        for name in ("min_interactions", "max_seq_len", "k_regions", "n_candidates",
                     "batch_size", "h", "alpha", "beta", "v_r", "z", "max_epochs",
                     "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.gen_seq_len < 2:
            raise ConfigError("gen_seq_len must be >= 2")
        if not (0.0 < self.reference_fraction < 1.0):
            raise ConfigError("reference_fraction must be in (0, 1)")

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {str(k): val for k, val in v.items()} if isinstance(v, dict) else v
        return out


def _parse_dims(text: str) -> dict[int, float]:
    out: dict[int, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            dim, frac = part.split(":")
            out[int(dim)] = float(frac)
        except ValueError:
            raise ConfigError(f"bad dims entry {part!r}; expected dim:fraction") from None
    return out


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a flat key = value file (# comments allowed) into an
    ExperimentConfig, then apply overrides and validate."""
    cfg = ExperimentConfig()
    known = {f.name: f for f in fields(ExperimentConfig)}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(known[key], value, f"{path}: line {lineno}"))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def _coerce(f, value: str, where: str):
    try:
        if f.name == "dims":
            return _parse_dims(value)
        if f.type in ("int", int):
            return int(value)
        if f.type in ("float", float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
