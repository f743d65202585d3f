"""Flat key=value run configuration.

Every tunable default lives on :class:`RunConfig`. Files are plain text,
one ``key = value`` per line, ``#`` starts a comment. Unknown keys are
rejected so typos in ablation configs fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

MODES = ("supervised", "baseline", "larvseg", "single-image-ca")


@dataclass
class RunConfig:
    seed: int = 0

    # synthetic data
    C: int = 12
    F: int = 8
    H: int = 16
    W: int = 16
    novel_fraction: float = 0.4167
    sigma: float = 0.15
    mu_scale: float = 1.0
    cooccur: float = 0.9
    n_seg: int = 400
    n_multilabel: int = 400
    n_singlelabel: int = 400
    n_eval: int = 100
    regions_min: int = 2
    regions_max: int = 6

    # model
    radius: int = 1
    hidden_dim: int = 32
    embed_dim: int = 16
    logit_scale: float = 20.0
    init_scale: float = 0.1
    ignore_id: int = 255

    # head
    lambda_cls: float = 0.1
    lambda_aux: float = 0.1
    tau: float = 1.0
    top_k: int = 20
    memory_size: int = 20

    # optimisation
    mode: str = "larvseg"
    total_iters: int = 3000
    batch_size: int = 8
    base_lr: float = 0.001
    min_lr: float = 1e-5
    power: float = 0.9
    momentum: float = 0.9
    ratio: str = "1:1:1"
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if not self.base_lr > self.min_lr >= 0:
            raise ConfigError("need base_lr > min_lr >= 0")
        if self.power <= 0:
            raise ConfigError("power must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.top_k < 1 or self.memory_size < 1:
            raise ConfigError("top_k and memory_size must be positive")
        if self.total_iters < 1 or self.batch_size < 1:
            raise ConfigError("total_iters and batch_size must be positive")
        if self.regions_min < 1 or self.regions_max < self.regions_min:
            raise ConfigError("need 1 <= regions_min <= regions_max")
        self.ratios()

    def ratios(self) -> tuple[int, int, int]:
        parts = self.ratio.split(":")
        try:
            vals = tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"ratio must look like 1:1:1, got {self.ratio!r}") from None
        if len(vals) != 3 or any(v < 0 for v in vals) or sum(vals) == 0:
            raise ConfigError(f"ratio needs three non-negative integers with a positive sum, got {self.ratio!r}")
        return vals  # type: ignore[return-value]

    @property
    def n_novel(self) -> int:
        return int(round(self.novel_fraction * self.C))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read a config file (if given) and apply overrides; overrides win."""
    values = {}
    if path is not None:
        values.update(parse_pairs(Path(path).read_text()))
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    return RunConfig(**values)


def loads_config(text: str) -> RunConfig:
    return RunConfig(**parse_pairs(text))
