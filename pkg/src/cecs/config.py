"""Run configuration and the ``key = value`` config file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import List, Mapping, Optional, Tuple, Union

MODES = ("baseline", "ce", "cecs")
SPLITS = ("half", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    mode: str = "cecs"
    n: int = 7
    q: int = 2
    epochs: int = 60
    batch_size: int = 4
    lr0: float = 0.005
    momentum: float = 0.9
    lr_decay_every: int = 60
    lr_decay_factor: float = 0.1
    flip_prob: float = 0.5
    image_side: int = 56
    seed: int = 0
    eps: float = 1e-8
    cos_weight: float = 1.0
    cos_third_pair: bool = False
    data: str = ""  # dataset folder; empty means the default synthetic set
    split: str = "half"  # "half": per-category 1:1 split; "none": train and test on every sample
    split_seed: int = 0

    @classmethod
    def published(cls, **changes) -> "RunConfig":
        """The published schedule: 180 epochs at 448 px, lr 0.0008 decayed tenfold every 60 epochs."""
        return replace(cls(epochs=180, image_side=448, lr0=0.0008, lr_decay_every=60), **changes)

    def problems(self) -> List[Tuple[Tuple[str, ...], str]]:
        """Invariant violations as (involved keys, message) pairs."""
        out = []
        if self.mode not in MODES:
            out.append((("mode",), f"mode must be one of {MODES}, got {self.mode!r}"))
        if self.n < 1:
            out.append((("n",), f"n must be >= 1, got {self.n}"))
        if not 1 <= self.q <= self.n:
            out.append((("q", "n"), f"q must satisfy 1 <= q <= n ({self.n}), got {self.q}"))
        if self.n >= 1 and self.image_side % self.n:
            out.append((("image_side", "n"), f"image_side {self.image_side} is not divisible by n={self.n}"))
        if self.image_side < 4 or self.image_side % 4:
            out.append((("image_side",), f"image_side {self.image_side} is not a positive multiple of 4"))
        if self.epochs < 0:
            out.append((("epochs",), f"epochs must be >= 0, got {self.epochs}"))
        if self.batch_size < 1:
            out.append((("batch_size",), f"batch_size must be >= 1, got {self.batch_size}"))
        if self.lr_decay_every < 1:
            out.append((("lr_decay_every",), f"lr_decay_every must be >= 1, got {self.lr_decay_every}"))
        if not self.lr0 >= 0:
            out.append((("lr0",), f"lr0 must be non-negative, got {self.lr0}"))
        if not 0 <= self.momentum < 1:
            out.append((("momentum",), f"momentum must lie in [0, 1), got {self.momentum}"))
        if not 0 < self.lr_decay_factor <= 1:
            out.append((("lr_decay_factor",), f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}"))
        if not 0 <= self.flip_prob <= 1:
            out.append((("flip_prob",), f"flip_prob must lie in [0, 1], got {self.flip_prob}"))
        if self.split not in SPLITS:
            out.append((("split",), f"split must be one of {SPLITS}, got {self.split!r}"))
        if not self.eps > 0:
            out.append((("eps",), f"eps must be positive, got {self.eps}"))
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(msg for _, msg in problems))
        return self

    def with_overrides(self, **changes) -> "RunConfig":
        return replace(self, **changes).validate()

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


def lr_at_epoch(config: RunConfig, epoch: int) -> float:
    """lr0 decayed by ``lr_decay_factor`` every ``lr_decay_every`` epochs.

    Divides by the reciprocal factor so decimal schedules stay exact
    (0.0008 / 100 == 8e-6, whereas 0.0008 * 0.1**2 does not).
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    steps = epoch // config.lr_decay_every
    try:
        return config.lr0 / (1.0 / config.lr_decay_factor) ** steps
    except OverflowError:  # decayed below the smallest double
        return 0.0


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    """Parse a string value for field ``key``; raises ConfigError."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown key {key!r}")
    kind = type(getattr(RunConfig(), key))
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__} for {key!r}") from None


def read_config_file(path: Union[str, Path]) -> Tuple[dict, dict]:
    """Return (values, line_numbers) from a ``key = value`` file."""
    values, lines = {}, {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        lines[key] = lineno
    return values, lines


def parse_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, object]] = None,
    base: RunConfig = RunConfig(),
) -> RunConfig:
    """Defaults, then file values, then ``overrides`` (already typed or strings)."""
    values, lines = ({}, {}) if path is None else read_config_file(path)
    merged = dict(values)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        merged[key] = coerce(key, val) if isinstance(val, str) else val
        lines.pop(key, None)
    config = replace(base, **merged)
    problems = config.problems()
    if problems:
        msgs = []
        for keys, msg in problems:
            at = [f"line {lines[k]}" for k in keys if k in lines]
            msgs.append(f"{path}:{', '.join(at)}: {msg}" if at else msg)
        raise ConfigError("invalid configuration: " + "; ".join(msgs))
    return config
