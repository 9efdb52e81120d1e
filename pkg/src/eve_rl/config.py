"""Run configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from eve_rl.agent import AgentConfig
from eve_rl.errors import ConfigError

ENVS = ("deep_sea", "stochastic_deep_sea")


@dataclass
class RunConfig:
    env: str = "deep_sea"
    size: int = 10
    reward_noise_std: float = 1.0
    randomize_actions: bool = True
    episodes: int = 2000
    seed_env: int = 0
    seed_init: int = 0
    seed_run: int = 0
    solve_threshold: float = 0.2
    out: str = ""
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.env not in ENVS:
            raise ConfigError(f"env must be one of {ENVS}, got {self.env!r}")
        if self.size < 2:
            raise ConfigError(f"size must be >= 2, got {self.size}")
        if self.episodes < 0:
            raise ConfigError(f"episodes must be >= 0, got {self.episodes}")
        if not 0.0 <= self.solve_threshold <= 1.0:
            raise ConfigError(f"solve_threshold must lie in [0, 1], got {self.solve_threshold}")
        if self.reward_noise_std < 0:
            raise ConfigError(f"reward_noise_std must be >= 0, got {self.reward_noise_std}")
        self.agent.validate()

    @property
    def noise_std(self) -> float:
        return self.reward_noise_std if self.env == "stochastic_deep_sea" else 0.0

    # flat key/value view

    def items(self) -> list[tuple[str, object]]:
        out = [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self) if f.name != "agent"]
        out += [(f.name, getattr(self.agent, f.name)) for f in dataclasses.fields(self.agent)]
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    def one_line(self) -> str:
        return "; ".join(f"{k}={format_value(v)}" for k, v in self.items())

    def replace(self, **overrides) -> RunConfig:
        """Copy with flat-key overrides; values may be strings to be parsed."""
        run_kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "agent"}
        agent_kw = dataclasses.asdict(self.agent)
        for key, raw in overrides.items():
            if key in run_kw:
                run_kw[key] = coerce(RunConfig, key, raw)
            elif key in agent_kw:
                agent_kw[key] = coerce(AgentConfig, key, raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        agent_kw["hidden"] = tuple(agent_kw["hidden"])
        return RunConfig(**run_kw, agent=AgentConfig(**agent_kw))

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        return cls().replace(**parse_assignments(text.splitlines()))

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def parse_assignments(lines) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


_HINTS: dict[type, dict] = {}


def _hints(cls) -> dict:
    if cls not in _HINTS:
        _HINTS[cls] = typing.get_type_hints(cls)
    return _HINTS[cls]


def coerce(cls, key: str, raw):
    """Parse ``raw`` into the annotated type of ``cls.key``."""
    if not isinstance(raw, str):
        return raw
    hint = _hints(cls)[key]
    text = raw.strip()
    try:
        return _parse(hint, text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def _parse(hint, text: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("none", "null", ""):
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _parse(inner[0], text)
    if origin is typing.Literal:
        if text not in args:
            raise ValueError(f"expected one of {args}")
        return text
    if origin is tuple:
        return tuple(int(x) for x in text.split(",") if x.strip())
    if hint is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text
