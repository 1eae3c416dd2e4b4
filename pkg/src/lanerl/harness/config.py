"""INI experiment configuration mapped onto the module config dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from ..agents.ddac import DdacConfig
from ..agents.dqn import DqnConfig
from ..agents.drqn import DrqnConfig
from ..agents.tabular import QTableConfig
from ..apprentice import ApprenticeConfig
from ..attention import GlimpseTrainConfig
from ..sim_core import ActionSpec, EnvConfig

AGENT_KINDS = ("qtable", "dqn", "ddac", "drqn", "glimpse-dqn", "apprentice")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSection:
    agent: str = "dqn"
    track: str = "gentle-s"
    seeds: tuple[int, ...] = (0,)
    episodes: int = 1500
    total_steps: int = 40_000
    eval_episodes: int = 10
    checkpoint_every: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.agent not in AGENT_KINDS:
            raise ConfigError(f"experiment.agent: unknown agent kind {self.agent!r}; choose from {AGENT_KINDS}")
        if self.episodes < 0 or self.total_steps < 0 or self.eval_episodes < 0:
            raise ConfigError("experiment: budgets must be non-negative")
        if not self.seeds:
            raise ConfigError("experiment.seeds: need at least one seed")


@dataclass(frozen=True)
class ApprenticeSection(ApprenticeConfig):
    handover_episodes: int = 30


SECTIONS = {
    "experiment": ("experiment", ExperimentSection),
    "env": ("env", EnvConfig),
    "actions": ("actions", ActionSpec),
    "dqn": ("dqn", DqnConfig),
    "ddac": ("ddac", DdacConfig),
    "drqn": ("drqn", DrqnConfig),
    "qtable": ("qtable", QTableConfig),
    "glimpse": ("glimpse", GlimpseTrainConfig),
    "apprentice": ("apprentice", ApprenticeSection),
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    env: EnvConfig = field(default_factory=EnvConfig)
    actions: ActionSpec = field(default_factory=ActionSpec)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    ddac: DdacConfig = field(default_factory=DdacConfig)
    drqn: DrqnConfig = field(default_factory=DrqnConfig)
    qtable: QTableConfig = field(default_factory=QTableConfig)
    glimpse: GlimpseTrainConfig = field(default_factory=GlimpseTrainConfig)
    apprentice: ApprenticeSection = field(default_factory=ApprenticeSection)

    @property
    def schedule_steps(self) -> int:
        """Step count the exploration schedules are stretched over."""
        e = self.experiment
        return e.total_steps if e.total_steps > 0 else e.episodes * self.env.max_steps

    def replace(self, section: str, **values) -> "ExperimentConfig":
        attr, _ = SECTIONS[section]
        return dataclasses.replace(self, **{attr: dataclasses.replace(getattr(self, attr), **values)})


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _build(values: dict[str, dict[str, str]]) -> ExperimentConfig:
    kwargs = {}
    for section, entries in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        attr, cls = SECTIONS[section]
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        parsed = {}
        for key, raw in entries.items():
            if key not in defaults:
                raise ConfigError(f"unknown key {section}.{key}")
            parsed[key] = _parse_value(raw, defaults[key], f"{section}.{key}")
        try:
            kwargs[attr] = cls(**parsed)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return ExperimentConfig(**kwargs)


def _read_ini(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def parse_overrides(overrides) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        out.setdefault(section, {})[key] = value
    return out


def load_config(text: str = "", overrides=()) -> ExperimentConfig:
    values = _read_ini(text)
    for section, entries in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(entries)
    return _build(values)


def load_config_file(path, overrides=()) -> ExperimentConfig:
    with open(path) as fh:
        return load_config(fh.read(), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully resolved INI text; ``load_config(dump_config(c)) == c``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, (attr, _) in SECTIONS.items():
        obj = getattr(cfg, attr)
        parser[section] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
