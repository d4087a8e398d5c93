"""Training configuration and its ``key = value`` file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

LEVELS = ("L0", "L1", "L2", "L2.5", "L3")
ESTIMATORS = ("stale", "ema")
LOSSES = ("ce", "mse")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: str = "cnn"
    dataset: str = "synthetic:n=1000,d=64,k=10,seed=0"
    level: str = "L3"
    bits: float = 2.0
    group_size: int = 256
    lr: float = 0.05
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    estimator: str = "ema"
    ema_decay: float = 0.9
    warm_start: bool = True
    loss: str = "ce"
    input_shape: str = ""  # e.g. "1,8,8"; inferred when empty
    eval_fraction: float = 0.2
    variance_every: int = 0  # steps between gradient-variance snapshots; 0 disables
    variance_trials: int = 20
    normalize_greedy: bool = True
    bn_dual_copy: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.level not in LEVELS:
            raise ConfigError(f"level must be one of {', '.join(LEVELS)}, got {self.level!r}")
        if not self.bits >= 1:
            raise ConfigError(f"bits must be >= 1, got {self.bits}")
        if self.bits > 8:
            raise ConfigError(f"bits must be <= 8, got {self.bits}")
        if self.level in ("L0", "L1", "L2") and float(self.bits) != int(self.bits):
            raise ConfigError(f"non-integer bits {self.bits} need level L2.5 or L3")
        if self.group_size < 1:
            raise ConfigError("group_size must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be stale or ema, got {self.estimator!r}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be ce or mse, got {self.loss!r}")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in [0, 1)")
        if self.variance_every < 0 or self.variance_trials < 2:
            raise ConfigError("variance_every must be >= 0 and variance_trials >= 2")

    def with_overrides(self, **kw) -> "TrainConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return (base or TrainConfig()).with_overrides(**values)


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
