"""Run configuration: one TOML file, strict keys, defaults matching the
standard experiment (past style, projection volumes, nx=ny=3, T=5, one
fold, three bootstrap rounds, HOG+LBP channels)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import tomli

from .errors import ConfigError
from .features import ChannelConfig
from .linear_svm import SvmConfig
from .scanning import DetectorConfig
from .ssl_core import NeighborhoodSpec
from .evaluation import EvalConfig
from .synth import SynthConfig

_SECTIONS = {
    "channels": ChannelConfig,
    "svm": SvmConfig,
    "neighborhood": NeighborhoodSpec,
    "detector": DetectorConfig,
    "eval": EvalConfig,
    "synth": SynthConfig,
    "ssl": None,  # folds + count_reading, handled below
}

# TOML key -> dataclass field aliases
_ALIASES = {"svm": {"lambda": "lambda_"}}
_SSL_KEYS = {"folds", "count_reading"}


@dataclass
class RunConfig:
    channels: ChannelConfig
    svm: SvmConfig
    neighborhood: NeighborhoodSpec
    detector: DetectorConfig
    eval: EvalConfig
    synth: SynthConfig
    folds: int = 1

    @staticmethod
    def default() -> "RunConfig":
        return build_config({})


def _coerce(value, ftype, key):
    if ftype is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if ftype is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if ftype is bool and isinstance(value, bool):
        return value
    if ftype is str and isinstance(value, str):
        return value
    if ftype is tuple:
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise ConfigError(f"{key}: expected an array, got {value!r}")
    return value


def _build_section(cls, data: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    aliases = _ALIASES.get(section, {})
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown config key [{section}] {key}")
        ftype = fields[name].type
        if isinstance(ftype, str):  # from __future__ annotations
            ftype = {"float": float, "int": int, "str": str, "bool": bool, "tuple": tuple}.get(
                ftype, None
            )
        kwargs[name] = _coerce(value, ftype, f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, ConfigError) as e:
        raise ConfigError(f"[{section}]: {e}") from e


def build_config(raw: dict) -> RunConfig:
    """Construct a RunConfig from a parsed TOML mapping, rejecting unknown keys."""
    for section in raw:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"config section [{section}] must be a table")

    ssl_raw = dict(raw.get("ssl", {}))
    for key in ssl_raw:
        if key not in _SSL_KEYS:
            raise ConfigError(f"unknown config key [ssl] {key}")
    folds = int(ssl_raw.get("folds", 1))
    if folds < 1:
        raise ConfigError("[ssl] folds must be >= 1")
    count_reading = ssl_raw.get("count_reading", "per_side")
    if count_reading not in ("per_side", "total"):
        raise ConfigError("[ssl] count_reading must be 'per_side' or 'total'")

    channels = _build_section(ChannelConfig, raw.get("channels", {}), "channels")
    svm = _build_section(SvmConfig, raw.get("svm", {}), "svm")
    detector = _build_section(DetectorConfig, raw.get("detector", {}), "detector")
    eval_cfg = _build_section(EvalConfig, raw.get("eval", {}), "eval")
    synth = _build_section(SynthConfig, raw.get("synth", {}), "synth")

    nb_raw = dict(raw.get("neighborhood", {}))
    nb = _build_section(NeighborhoodSpec, nb_raw, "neighborhood")
    if count_reading == "total":
        # nx/ny/T given as total counts per axis: (3,3,5) -> 3x3x5 grid
        if nb.nx % 2 == 0 or nb.ny % 2 == 0:
            raise ConfigError("total count_reading requires odd nx and ny")
        nb = dataclasses.replace(nb, nx=(nb.nx - 1) // 2, ny=(nb.ny - 1) // 2)
    if nb.step is None:
        stride = channels.cell_size
        nb = dataclasses.replace(nb, step=(stride, stride))
    if "out_of_grid_score" not in nb_raw:
        nb = dataclasses.replace(nb, out_of_grid_score=detector.stage1_threshold)
    nb.grid_steps(channels.cell_size)  # validate step/stride compatibility now

    return RunConfig(channels, svm, nb, detector, eval_cfg, synth, folds)


def load_config(path=None, overrides: list = None) -> RunConfig:
    """Load TOML config (all sections optional) and apply key=value overrides."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from e
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key must be section.key, got {key!r}")
        section, name = parts
        try:
            parsed = tomli.loads(f"v = {value}")["v"]
        except tomli.TOMLDecodeError:
            parsed = value  # bare string
        raw.setdefault(section, {})[name] = parsed
    return build_config(raw)
