"""Run configuration: defaults, config-file parsing, flag overrides.

A run is configured in three layers with increasing precedence:
dataclass defaults, then a config file, then command-line flags. The
config file is flat ``key = value`` text under section headers, read by
the standard-library parser:

    [run]
    seed = 0
    protocol = all_way
    k = 5
    episodes = 5

    [dims]
    dx = 256
    nc = 16

    [train]
    epochs = 60
    lr_cls = 0.01

    [synth]
    n_base_classes = 20

Sections map onto RunConfig fields: [run] onto RunConfig itself, [dims]
onto ModelDims, [train] onto TrainConfig, [synth] onto SynthConfig.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .data import SynthConfig
from .model import ModelDims
from .train import TrainConfig

PROTOCOLS = {"all_way": "all_way", "all-way": "all_way",
             "n_way": "n_way", "5-way": "n_way", "5way": "n_way"}


class ConfigError(ValueError):
    """Malformed config file or flag value."""


@dataclass
class RunConfig:
    """Union of everything a command needs; commands read their slice."""

    seed: int = 0
    out_dir: str = "runs"
    base_features: str = ""
    novel_features: str = ""
    checkpoint: str = ""
    protocol: str = "all_way"
    k: int = 5
    n_way: int = 5
    episodes: int = 5
    dump_latents: bool = False
    base_split: str = ""  # e.g. "0.6,0.2,0.2" to carve the base set
    dims: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def resolve(self) -> None:
        """Couple the shared fields after all layers are merged."""
        if self.protocol not in PROTOCOLS:
            raise ConfigError(
                f"unknown protocol {self.protocol!r}; expected one of "
                f"{sorted(set(PROTOCOLS))}"
            )
        self.protocol = PROTOCOLS[self.protocol]
        self.train.dims = self.dims
        self.train.seed = self.seed
        self.synth.seed = self.seed

    def base_split_fractions(self):
        if not self.base_split or self.base_split.lower() == "none":
            return None
        try:
            parts = tuple(float(v) for v in self.base_split.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad base_split {self.base_split!r}") from exc
        if len(parts) != 3 or abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError(
                f"base_split needs 3 comma-separated fractions summing to 1, "
                f"got {self.base_split!r}"
            )
        return parts


_BOOL_STRINGS = {"true": True, "1": True, "yes": True, "on": True,
                 "false": False, "0": False, "no": False, "off": False}


def _coerce(raw: str, typ, key: str):
    if typ is bool:
        try:
            return _BOOL_STRINGS[raw.strip().lower()]
        except KeyError:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}") from None
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def _apply(obj, section: str, values: dict[str, str]) -> None:
    known = {f.name: f.type for f in fields(obj)}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"[{section}] has unknown key {key!r}")
        typ = known[key]
        if isinstance(typ, str):  # postponed annotations
            typ = types.get(typ)
        if typ not in (int, float, str, bool):
            raise ConfigError(f"[{section}] {key} cannot be set from a file")
        setattr(obj, key, _coerce(raw, typ, f"[{section}] {key}"))


_SECTIONS = {"run": lambda c: c, "dims": lambda c: c.dims,
             "train": lambda c: c.train, "synth": lambda c: c.synth}


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, then ``path``, then ``overrides``
    (flat dict of "section.key" strings, as collected from flags)."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # field names are case-sensitive (Dx, Nc, ...)
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            _apply(_SECTIONS[section](cfg), section, dict(parser[section]))
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key or section not in _SECTIONS:
            raise ConfigError(f"bad override key {dotted!r}")
        _apply(_SECTIONS[section](cfg), section, {key: raw})
    cfg.resolve()
    return cfg
