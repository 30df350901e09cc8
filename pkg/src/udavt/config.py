"""Experiment configuration files.

The format is INI-style: ``key = value`` lines grouped in sections
``[experiment]``, ``[data]``, ``[model]``, ``[phase1]`` and ``[phase2]``.
Every key has a default; unknown sections or keys are rejected with the line
they appear on. Clip geometry and the class count live in ``[data]`` and are
copied into the model configuration.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synth import SHIFT_PRESETS, ShiftSpec, SynthConfig
from .trainer import Phase1Config, Phase2Config, TrainConfig

FORMAT_VERSION = 1
ARTIFACT_VERSION = "0.1.0"

_SHARED = ("num_classes", "frame_size", "channels")


@dataclass
class ExperimentConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    format_version: int = FORMAT_VERSION

    def sync(self) -> "ExperimentConfig":
        self.model.num_classes = self.data.num_classes
        self.model.frame_size = self.data.frame_size
        self.model.channels = self.data.channels
        self.model.frames_per_video = self.data.frames
        return self

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def default_config(preset: str = "severe") -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.data.shift_level = preset
    cfg.data.shift = replace(SHIFT_PRESETS[preset])
    if preset != "severe":
        cfg.train.phase2.alpha = 0.01
        cfg.train.phase2.queue_capacity = 1024
    return cfg.sync()


def _convert(raw: str, typ, where: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ) if isinstance(typ, str) else typ
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ == "list[int]":
            return [int(x) for x in raw.replace(",", " ").split()]
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _locate(lines: list[str], section: str, key: str | None) -> int:
    current = None
    for i, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and "=" in s:
            if s.split("=", 1)[0].strip() == key:
                return i
    return 0


def _field_types(cls) -> dict[str, object]:
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        out[f.name] = t
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a config file; raise :class:`ConfigError` with line numbers on problems."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def parse_config(text: str, name: str = "<config>") -> ExperimentConfig:
    lines = text.splitlines()
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=name)
    except configparser.Error as exc:
        raise ConfigError(f"{name}: {exc}") from exc

    def where(section, key=None):
        return f"{name}:{_locate(lines, section, key)} [{section}]" + (f" {key}" if key else "")

    sections = {"experiment", "data", "model", "phase1", "phase2"}
    for sec in cp.sections():
        if sec not in sections:
            raise ConfigError(f"{where(sec)}: unknown section")

    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    version = exp.pop("format_version", str(FORMAT_VERSION))
    if _convert(version, int, where("experiment", "format_version")) != FORMAT_VERSION:
        raise ConfigError(f"{where('experiment', 'format_version')}: unsupported format_version {version}")

    data_raw = dict(cp["data"]) if cp.has_section("data") else {}
    preset = data_raw.pop("shift_level", "severe").strip()
    if preset not in SHIFT_PRESETS:
        raise ConfigError(f"{where('data', 'shift_level')}: unknown shift preset {preset!r}")
    cfg = default_config(preset)

    for key, raw in exp.items():
        w = where("experiment", key)
        if key == "seeds":
            cfg.train.seeds = _convert(raw, "list[int]", w)
        elif key == "dtype":
            cfg.train.dtype = raw.strip()
        else:
            raise ConfigError(f"{w}: unknown key")

    data_types = _field_types(SynthConfig)
    shift_types = _field_types(ShiftSpec)
    for key, raw in data_raw.items():
        w = where("data", key)
        if key in shift_types:
            setattr(cfg.data.shift, key, _convert(raw, shift_types[key], w))
        elif key in data_types and key != "shift":
            setattr(cfg.data, key, _convert(raw, data_types[key], w))
        else:
            raise ConfigError(f"{w}: unknown key")

    targets = {"model": (cfg.model, ModelConfig), "phase1": (cfg.train.phase1, Phase1Config),
               "phase2": (cfg.train.phase2, Phase2Config)}
    for sec, (obj, cls) in targets.items():
        if not cp.has_section(sec):
            continue
        types = _field_types(cls)
        for key, raw in cp[sec].items():
            w = where(sec, key)
            if key not in types or (sec == "model" and key in _SHARED + ("frames_per_video",)):
                raise ConfigError(f"{w}: unknown key" + (" (set it in [data])" if key in types else ""))
            setattr(obj, key, _convert(raw, types[key], w))

    cfg.sync()
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` back into the file format (round-trips through :func:`parse_config`)."""
    out = ["[experiment]", f"format_version = {cfg.format_version}",
           f"seeds = {', '.join(str(s) for s in cfg.train.seeds)}", f"dtype = {cfg.train.dtype}", ""]
    out.append("[data]")
    for f in fields(SynthConfig):
        if f.name == "shift":
            for g in fields(ShiftSpec):
                out.append(f"{g.name} = {getattr(cfg.data.shift, g.name)}")
        else:
            out.append(f"{f.name} = {getattr(cfg.data, f.name)}")
    for sec, obj in (("model", cfg.model), ("phase1", cfg.train.phase1), ("phase2", cfg.train.phase2)):
        out += ["", f"[{sec}]"]
        for f in dataclasses.fields(obj):
            if sec == "model" and f.name in _SHARED + ("frames_per_video",):
                continue
            out.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(out) + "\n"
