"""Run configuration: defaults, key-value config files, and config hashing.

The config file format is plain text, one ``key = value`` pair per line,
``#`` starts a comment. Every key has a default; unknown keys are errors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .errors import ConfigError

NORM_CHOICES = ("both", "bn", "sain")


@dataclass
class RunConfig:
    # training
    epochs: int = 50
    batch: int = 512
    hidden: int = 100
    lr_base: float = 0.01
    lr_decay: float = 0.3
    lr_step: int = 3
    seed: int = 0
    # objective
    lambda_dist: float = 0.1
    d0: float = 1e-12
    eps_reg_rel: float = 1e-3
    eps_reg_abs: float = 1e-6
    # fine-grained model
    clusters: str = "auto"  # "auto" or an integer literal
    tail_fraction: float = 0.1
    min_tail_count: int = 20
    target_frr: float = 0.01
    kmeans_restarts: int = 4
    kmeans_max_iter: int = 100
    # windowing
    window: int = 20
    stride: int = 1
    std_floor: float = 1e-8
    # architecture ablations
    use_tam: bool = True
    bidirectional: bool = True
    norm: str = "both"
    # baseline hyperparameters
    coverage: float = 0.99
    gen_gamma: float = 0.1
    gen_topk: int = 10
    openmax_tail: int = 20
    openmax_revise: int = 10
    vim_dim_divisor: int = 4

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2")
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if self.lr_base <= 0 or not (0 < self.lr_decay <= 1) or self.lr_step < 1:
            raise ConfigError("invalid learning-rate schedule")
        if self.lambda_dist < 0:
            raise ConfigError("lambda_dist must be >= 0")
        if self.d0 < 0:
            raise ConfigError("d0 must be >= 0")
        if self.eps_reg_rel <= 0 or self.eps_reg_abs <= 0:
            raise ConfigError("covariance regularizer must be positive")
        if not (0 < self.tail_fraction <= 1):
            raise ConfigError("tail_fraction must be in (0, 1]")
        if not (0 <= self.target_frr < 1):
            raise ConfigError("target_frr must be in [0, 1)")
        if not (0 < self.coverage <= 1):
            raise ConfigError("coverage must be in (0, 1]")
        if self.window < 1 or self.stride < 1:
            raise ConfigError("window and stride must be >= 1")
        if self.norm not in NORM_CHOICES:
            raise ConfigError(f"norm must be one of {NORM_CHOICES}")
        if self.clusters != "auto":
            try:
                m = int(self.clusters)
            except ValueError:
                raise ConfigError("clusters must be 'auto' or a positive integer") from None
            if m < 1:
                raise ConfigError("clusters must be >= 1")
            self.clusters = str(m)

    @property
    def cluster_count(self) -> int | None:
        """Configured cluster count, or None when set to 'auto'."""
        return None if self.clusters == "auto" else int(self.clusters)

    def learning_rate(self, epoch: int) -> float:
        return self.lr_base * self.lr_decay ** (epoch // self.lr_step)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def _parse_value(raw: str, ftype: type):
    raw = raw.strip()
    if ftype is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    return raw


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines, ignoring blanks and ``#`` comments."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_run_config(path: str | None = None, text: str | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a config file and/or explicit overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw = parse_key_values(fh.read())
    elif text is not None:
        raw = parse_key_values(text)

    ftypes = {f.name: f.type for f in fields(RunConfig)}
    defaults = RunConfig()
    kwargs = {}
    for key, value in raw.items():
        if key not in ftypes:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = type(getattr(defaults, key))
        try:
            kwargs[key] = _parse_value(value, ftype)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    if overrides:
        for key, value in overrides.items():
            if key not in ftypes:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = value
    return RunConfig(**kwargs)
