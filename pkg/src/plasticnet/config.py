"""Experiment configuration: sectioned key-value files with typed defaults.

A config file has up to three sections::

    [experiment]
    task = cue-reward-fixed4
    variant = simple-mod
    seeds = 0-8

    [train]
    lr = 1e-3

    [lm]
    corpus = data/text.txt

Precedence is command-line override > file > default.  Unknown sections
or keys and values that do not parse as the field's type are rejected with
the file name and line number.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field

from .a2c import TrainConfig
from .cells import canonical_variant
from .lm import LMConfig

TASKS = ("cue-reward", "cue-reward-fixed4", "maze", "lm")
OUT_ENV_VAR = "PLASTICNET_OUT"

# fields owned by [experiment] and therefore not settable inside the sub-sections
_TRAIN_EXCLUDED = ("seed",)
_LM_EXCLUDED = ("variant", "hidden_size", "seed")


class ConfigError(ValueError):
    pass


def default_out_root() -> str:
    return os.environ.get(OUT_ENV_VAR, "runs")


@dataclass
class ExperimentConfig:
    task: str = "cue-reward-fixed4"
    variant: str = "simple-mod"
    hidden_size: int = 64
    alpha: str = "per-connection"
    eta: str = "global"
    seeds: tuple = (0,)
    out: str = field(default_factory=default_out_root)
    trace: bool = False
    eval_episodes: int = 100
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    lm: LMConfig = field(default_factory=LMConfig)

    def validate(self) -> "ExperimentConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {self.task!r}")
        try:
            canonical_variant(self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.hidden_size < 1 or self.workers < 1 or self.eval_episodes < 1:
            raise ConfigError("hidden_size, workers and eval_episodes must be >= 1")
        return self

    def train_for(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)

    def lm_for(self, seed: int) -> LMConfig:
        return dataclasses.replace(self.lm, variant=self.variant, hidden_size=self.hidden_size, seed=seed)


def _section_fields(section: str) -> dict:
    if section == "experiment":
        return {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name not in ("train", "lm")}
    if section == "train":
        return {f.name: f for f in dataclasses.fields(TrainConfig) if f.name not in _TRAIN_EXCLUDED}
    if section == "lm":
        return {f.name: f for f in dataclasses.fields(LMConfig) if f.name not in _LM_EXCLUDED}
    raise KeyError(section)


SECTIONS = ("experiment", "train", "lm")


def parse_seeds(text: str) -> tuple:
    """``"3"``, ``"0,2,5"`` or ``"0-8"`` (inclusive) to a tuple of ints."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return tuple(seeds)


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _coerce(f: dataclasses.Field, text: str):
    default = _default_of(f)
    text = text.strip()
    if f.name == "seeds":
        return parse_seeds(text)
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key_lines(text: str) -> dict:
    """``(section, key) -> line number`` for every assignment in ``text``."""
    where, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), lineno)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", stripped)
        if m and section is not None and not line[:1].isspace():
            where.setdefault((section, m.group(1).strip().lower()), lineno)
    return where


def _read_file(path: str) -> dict:
    """``{section: {key: (value, location)}}`` from a config file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: expected a [section] header before {exc.line.strip()!r}") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{path}:{lineno}: cannot parse line {line.strip()!r}") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.message.split(': ', 1)[-1]}") from None
    lines = _key_lines(text)
    out = {}
    for section in parser.sections():
        loc = f"{path}:{lines.get((section, None), '?')}"
        if section not in SECTIONS:
            raise ConfigError(f"{loc}: unknown section [{section}] (expected one of {', '.join(SECTIONS)})")
        out[section] = {key: (value, f"{path}:{lines.get((section, key), '?')}")
                        for key, value in parser.items(section)}
    return out


def _apply(values: dict, section: str, key: str, text: str, location: str) -> None:
    fields = _section_fields(section)
    if key not in fields:
        raise ConfigError(f"{location}: unknown key {key!r} in [{section}] "
                          f"(known: {', '.join(sorted(fields))})")
    try:
        values[section][key] = _coerce(fields[key], text)
    except ValueError as exc:
        raise ConfigError(f"{location}: bad value for {section}.{key}: {exc}") from None


def parse_override(item: str) -> tuple:
    """``"section.key=value"`` (section defaults to experiment) to a triple."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    name, value = item.split("=", 1)
    section, _, key = name.strip().rpartition(".")
    return section or "experiment", key.strip().lower().replace("-", "_"), value


def load_config(path: str | None = None, overrides=()) -> ExperimentConfig:
    """Resolve a configuration from defaults, an optional file and overrides.

    ``overrides`` is a sequence of ``(section, key, value_text)``; a
    ``location`` for error messages can be given as a fourth element.
    """
    values = {s: {} for s in SECTIONS}
    if path is not None:
        for section, items in _read_file(path).items():
            for key, (text, location) in items.items():
                _apply(values, section, key, text, location)
    for item in overrides:
        section, key, text = item[:3]
        location = item[3] if len(item) > 3 else "command line"
        if section not in SECTIONS:
            raise ConfigError(f"{location}: unknown section {section!r}")
        _apply(values, section, key, str(text), location)
    try:
        train = TrainConfig(**values["train"])
        lm = LMConfig(**values["lm"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(**values["experiment"], train=train, lm=lm).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    """The fully resolved configuration in the file format ``load_config`` reads."""
    lines = []
    for section in SECTIONS:
        obj = cfg if section == "experiment" else getattr(cfg, section)
        lines.append(f"[{section}]")
        for name in _section_fields(section):
            lines.append(f"{name} = {_format(getattr(obj, name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: ExperimentConfig, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
