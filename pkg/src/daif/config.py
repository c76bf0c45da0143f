"""Run configuration: a flat ``key = value`` text file with a schema version.

Keys are grouped by prefix::

    schema_version = 1
    seed = 0
    out = runs/smoke
    sim.lambda_arrival = 0.05
    train.H = 300
    arch.d_s = 16

Any key may be overridden from the environment as ``DAIF_<GROUP>_<FIELD>``
(``DAIF_TRAIN_H=100``) or ``DAIF_SEED`` / ``DAIF_OUT`` for the top-level keys.
Field names are matched case-insensitively. Command-line flags win over both.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .agent import TrainConfig
from .model import Architecture
from .sim import ConfigError, SimConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "DAIF_"
# architecture fields that are taken from the training section instead
_DERIVED_ARCH = {"horizon", "dropout", "K", "c"}
_GROUPS = {"sim": SimConfig, "train": TrainConfig, "arch": Architecture}


def _fields(cls) -> dict[str, dataclasses.Field]:
    out = {f.name: f for f in dataclasses.fields(cls) if f.init}
    if cls is Architecture:
        out = {k: v for k, v in out.items() if k not in _DERIVED_ARCH}
    return out


def _convert(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        if default is None or isinstance(default, float):
            return None if text.lower() in ("", "none") else float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r}") from None
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: Architecture = field(default_factory=Architecture)
    out: str = "runs/default"
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.sync()

    def sync(self) -> "RunConfig":
        """Push the root seed and shared fields into the component configs."""
        self.train = dataclasses.replace(self.train, seed=self.seed)
        self.arch = dataclasses.replace(
            self.arch, horizon=self.train.H, dropout=self.train.dropout, K=self.sim.K, c=self.sim.c
        )
        return self

    def with_overrides(self, **changes) -> "RunConfig":
        """Apply flag-style overrides (``seed``, ``out``, ``H``)."""
        new = dataclasses.replace(self)
        if changes.get("seed") is not None:
            new.seed = int(changes["seed"])
        if changes.get("out") is not None:
            new.out = str(changes["out"])
        if changes.get("H") is not None:
            new.train = dataclasses.replace(new.train, H=int(changes["H"]))
        return new.sync()

    def to_text(self) -> str:
        lines = [f"schema_version = {self.schema_version}", f"seed = {self.seed}", f"out = {self.out}"]
        for group, obj in (("sim", self.sim), ("train", self.train), ("arch", self.arch)):
            for name in _fields(type(obj)):
                if group == "train" and name == "seed":
                    continue
                lines.append(f"{group}.{name} = {_format(getattr(obj, name))}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def parse_config(text: str, environ: dict[str, str] | None = None, source: str = "<string>") -> RunConfig:
    """Parse config text; ``environ`` entries with the ``DAIF_`` prefix override file values."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str  # keep case: H, N, K are distinct from h, n, k
    try:
        parser.read_string("[run]\n" + text, source=source)
    except configparser.Error as e:
        raise ConfigError("<file>", f"{source}: {e}") from None
    values = dict(parser["run"])
    values.update(_env_values(environ if environ is not None else os.environ))

    version = _convert("schema_version", values.pop("schema_version", str(SCHEMA_VERSION)), 0)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"got {version}, this build reads {SCHEMA_VERSION}")
    seed = _convert("seed", values.pop("seed", "0"), 0)
    out = values.pop("out", "runs/default")

    kwargs: dict[str, dict] = {g: {} for g in _GROUPS}
    for key, text_value in values.items():
        group, _, name = key.partition(".")
        if group not in _GROUPS or not name:
            raise ConfigError(key, "unknown key")
        fields = _fields(_GROUPS[group])
        if name not in fields:
            raise ConfigError(key, "unknown key")
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[group][name] = _convert(key, text_value, default)

    built = {}
    for group, cls in _GROUPS.items():
        try:
            built[group] = cls(**kwargs[group])
        except ConfigError as e:
            raise ConfigError(f"{group}.{e.field}", str(e).split(": ", 1)[-1]) from None
    sim, train, arch = built["sim"], built["train"], built["arch"]
    return RunConfig(sim, train, arch, out, seed, version)


def _env_values(environ) -> dict[str, str]:
    lookup = {"SEED": "seed", "OUT": "out", "SCHEMA_VERSION": "schema_version"}
    for group, cls in _GROUPS.items():
        for name in _fields(cls):
            lookup[f"{group}_{name}".upper()] = f"{group}.{name}"
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            target = lookup.get(key[len(ENV_PREFIX):].upper())
            if target is None:
                raise ConfigError(key, "unknown environment override")
            out[target] = value
    return out


def load_config(path: str | Path | None, environ: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (``None`` means defaults plus environment overrides)."""
    if path is None:
        return parse_config("", environ)
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"config file not found: {p}")
    return parse_config(p.read_text(), environ, source=str(p))
