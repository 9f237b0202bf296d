"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Every key is listed in
:data:`KEYS`; anything else is rejected. Training keys left unset take the
value of the selected ``preset`` (``paper`` for the published settings,
``desk`` for the CPU-sized fixture runs).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .objectives import LossWeights
from .trainer import TrainConfig


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _crop(s):
    parts = [int(p) for p in str(s).replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"crop must be N or H,W, got {s!r}")
    return tuple(parts)


def _names(s):
    names = tuple(p.strip() for p in str(s).split(",") if p.strip())
    if not names:
        raise ValueError("empty list")
    return names


def _preset(s):
    s = str(s).strip()
    if s not in ("paper", "desk"):
        raise ValueError(f"preset must be 'paper' or 'desk', got {s!r}")
    return s


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "weights"}
_WEIGHT_FIELDS = {f.name: f for f in dataclasses.fields(LossWeights)}


def _parser_for(f):
    if f.name == "crop":
        return _crop
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    return {"int": int, "float": float, "bool": _bool, "str": str}[t]


# key -> parser
KEYS = {"preset": _preset, "agents": _names, "severity_table": str}
KEYS.update({name: _parser_for(f) for name, f in _TRAIN_FIELDS.items()})
KEYS.update({name: _parser_for(f) for name, f in _WEIGHT_FIELDS.items()})

DEFAULT_AGENTS = ("gmsd", "mdsi", "srsim")


@dataclass
class RunConfig:
    """Explicitly set keys plus the file they came from (for relative paths)."""

    values: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    def set(self, key: str, raw) -> None:
        key = key.strip()
        if key not in KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        try:
            self.values[key] = KEYS[key](raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key!r}: {exc}") from None

    def update(self, pairs) -> "RunConfig":
        for k, v in pairs:
            self.set(k, v)
        return self

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def preset(self) -> str:
        return self.values.get("preset", "paper")

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    @property
    def agents(self) -> tuple:
        return self.values.get("agents", DEFAULT_AGENTS)

    @property
    def severity_table(self):
        p = self.values.get("severity_table")
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def train_config(self) -> TrainConfig:
        train = {k: v for k, v in self.values.items() if k in _TRAIN_FIELDS}
        weights = {k: v for k, v in self.values.items() if k in _WEIGHT_FIELDS}
        factory = TrainConfig.desk if self.preset == "desk" else TrainConfig
        try:
            return factory(weights=LossWeights(**weights), **train)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None


def parse_config_text(text: str, source: str = "<config>") -> list:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional) then apply ``overrides`` (``(key, value)`` pairs); later wins."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        cfg.base_dir = path.resolve().parent
        cfg.update(parse_config_text(text, str(path)))
    return cfg.update(overrides)


def describe_keys() -> str:
    """One line per key with its paper-preset default, for ``--help`` output."""
    base = TrainConfig()
    lines = ["preset = paper", "seed = 0", f"agents = {','.join(DEFAULT_AGENTS)}", "severity_table = (built-in)"]
    for name in _TRAIN_FIELDS:
        if name == "seed":
            continue
        v = getattr(base, name)
        lines.append(f"{name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    for name in _WEIGHT_FIELDS:
        lines.append(f"{name} = {getattr(base.weights, name)}")
    return "\n".join(lines)
