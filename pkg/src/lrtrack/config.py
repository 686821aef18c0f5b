"""Run configuration: flat ``key = value`` text, ``#`` comments, UTF-8.

Every key has a default; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .ibdtc import BASELINES, FUSION_MODES, ConfigError
from .scene import EXTENDED_RANGE


@dataclass
class Config:
    # data
    cls: str = "car"
    frames: int = 20
    train_sequences: int = 200
    test_sequences: int = 50
    train_seed: int = 0
    test_seed: int = 100_000
    clutter_density: float = 0.5
    surface_bias: float = 1.0
    # model
    grid: tuple[int, int, int] = (128, 128, 32)
    tau: float = 0.99
    gamma: float = 0.1
    n_max: int = 512
    pool_size: int = 128
    fusion_mode: str = "addition"
    svd_row_scaling: str = "unit"
    use_sfp: bool = True
    use_ibdtc: bool = True
    proxy_mixer: bool = True
    learnable_pe: bool = False  # sinusoidal table becomes a trained parameter
    baseline: str = "none"
    # loss
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    theta1: float = 1.0
    theta2: float = 1.0
    # optimisation
    lr: float = 1e-4
    lr_decay_every: int = 20
    lr_decay_factor: float = 5.0
    weight_decay: float = 0.01
    batch: int = 16
    epochs: int = 30
    augment: bool = True
    jitter_xy: float = 0.0  # std of the reference-box shift during training, metres
    jitter_yaw: float = 0.0  # radians
    seed: int = 0
    # paths
    data_dir: str = ""
    out_dir: str = ""
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def H(self) -> int:
        return self.grid[0]

    @property
    def W(self) -> int:
        return self.grid[1]

    @property
    def C(self) -> int:
        return self.grid[2]

    def validate(self) -> "Config":
        if self.cls not in EXTENDED_RANGE:
            raise ConfigError(f"class must be one of {sorted(EXTENDED_RANGE)}, got {self.cls!r}")
        H, W, C = self.grid
        if min(H, W, C) < 1:
            raise ConfigError("grid dimensions must be positive")
        if C % 4:
            raise ConfigError(f"channel count must be a multiple of 4 (grouped convs, sin/cos pairs), got {C}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.n_max < 1 or self.pool_size < 1:
            raise ConfigError("n_max and pool_size must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.svd_row_scaling not in ("unit", "sigma"):
            raise ConfigError("svd_row_scaling must be 'unit' or 'sigma'")
        if self.baseline != "none" and self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be 'none' or one of {BASELINES}, got {self.baseline!r}")
        weights = (self.lambda1, self.lambda2, self.lambda3, self.theta1, self.theta2)
        if min(weights) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.theta1 <= 0 and self.theta2 <= 0:
            raise ConfigError("at least one of theta1, theta2 must be positive")
        tr = (self.train_seed, self.train_seed + self.train_sequences)
        te = (self.test_seed, self.test_seed + self.test_sequences)
        if self.train_sequences > 0 and self.test_sequences > 0 and tr[0] < te[1] and te[0] < tr[1]:
            raise ConfigError(f"seed conflict: train seeds {tr[0]}..{tr[1] - 1} overlap test seeds {te[0]}..{te[1] - 1}")
        if self.train_sequences < 0 or self.test_sequences < 0:
            raise ConfigError("sequence counts must be nonnegative")
        if self.frames < 2:
            raise ConfigError("frames must be >= 2")
        if self.batch < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("batch must be >= 1, epochs and lr nonnegative")
        if self.jitter_xy < 0 or self.jitter_yaw < 0:
            raise ConfigError("jitter_xy and jitter_yaw must be nonnegative")
        if self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_every must be >= 1 and lr_decay_factor positive")
        return self

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "extra":
                continue
            key = "class" if f.name == "cls" else f.name
            lines.append(f"{key} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = raw.replace("x", ",").split(",")
            vals = tuple(int(p) for p in parts if p.strip())
            if len(vals) != 3:
                raise ValueError(raw)
            return vals
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from None


_KEYS = {("class" if f.name == "cls" else f.name): f for f in fields(Config) if f.name != "extra"}
_KEYS["L"] = _KEYS["pool_size"]


def parse_config(text: str, base: Config | None = None) -> Config:
    cfg = dataclasses.replace(base) if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        apply_override(cfg, key, raw)
    return cfg.validate()


def apply_override(cfg: Config, key: str, raw: str) -> None:
    if key not in _KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    f = _KEYS[key]
    setattr(cfg, f.name, _parse_value(key, raw, getattr(Config(), f.name)))


def load_config(path=None, overrides=(), base: Config | None = None) -> Config:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    cfg = parse_config(text, base)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        apply_override(cfg, k, v)
    return cfg.validate()
