"""Run configuration: one JSON document covering every module, with dotted overrides and a stable hash."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .datagen import SynthSpec
from .federation import FederationConfig
from .imaging import JitterRanges
from .model import ModelConfig

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

# keys that say where results go, not what is computed; left out of the hash
UNHASHED_KEYS = (("paths", "output_root"), ("paths", "run_id"))


class ConfigError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    normalization: str = "macenko"      # macenko | reinhard | none
    reference_image: str | None = None  # None -> built-in reference profile
    patch_size: int = 640
    stride: int = 640
    min_tissue: float = 0.1
    blur_threshold: float = 15.0
    dedup_hamming: int = 8
    pen_filter: bool = True
    pen_quantile: float = 0.85

    def validate(self) -> None:
        if self.normalization not in ("macenko", "reinhard", "none"):
            raise ValueError("normalization must be macenko, reinhard or none")
        if self.patch_size < 3 or self.stride < 1:
            raise ValueError("patch_size must be >= 3 and stride >= 1")
        if not 0.0 <= self.min_tissue <= 1.0:
            raise ValueError("min_tissue must lie in [0, 1]")
        if self.blur_threshold < 0 or not 0 <= self.dedup_hamming <= 64:
            raise ValueError("blur_threshold must be >= 0 and dedup_hamming in 0..64")
        if not 0.0 < self.pen_quantile < 1.0:
            raise ValueError("pen_quantile must lie in (0, 1)")


@dataclass
class SplitConfig:
    ratios: tuple = (0.70, 0.15, 0.15)

    def validate(self) -> None:
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must be three non-negative numbers summing to 1")


@dataclass
class PathsConfig:
    data_dir: str = "data/synth"
    processed_dir: str = "data/processed"
    output_root: str = "runs"
    run_id: str | None = None


@dataclass
class RunConfig:
    datagen: SynthSpec = field(default_factory=SynthSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    augment: JitterRanges = field(default_factory=JitterRanges)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            check = getattr(section, "validate", None)
            if check is not None:
                try:
                    check()
                except ValueError as exc:
                    raise ConfigError(f"{f.name}: {exc}") from None
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self.augment, name) < 1.0:
                raise ConfigError(f"augment.{name} must lie in [0, 1)")
        if not 0.0 <= self.augment.hue <= 0.5:
            raise ConfigError("augment.hue must lie in [0, 0.5] turns")

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())

    def config_hash(self) -> str:
        d = self.to_dict()
        for section, key in UNHASHED_KEYS:
            d[section].pop(key, None)
        return f"{fnv1a64(canonical_json(d).encode()):016x}"

    def run_id(self) -> str:
        if self.paths.run_id:
            return self.paths.run_id
        mode = "fed" if self.federation.mode == "federated" else "central"
        return f"{mode}-{self.config_hash()[:12]}"

    def with_overrides(self, overrides: dict) -> "RunConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return RunConfig.from_dict(d)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if tp is type(None) or type(None) in args:
            return None
        raise ConfigError(f"{where}: null is not allowed")
    if type(None) in args:  # Optional[X]
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        path = f"{where}.{f.name}" if where else f.name
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, d[f.name], path)
        else:
            kwargs[f.name] = _coerce(tp, d[f.name], path)
    return cls(**kwargs)


def parse_override(text: str) -> tuple[str, object]:
    """``key.sub=value``; the value is read as JSON when possible, else as a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown key {key!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    base = {}
    if path is not None:
        try:
            base = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(base)
    if overrides:
        cfg = cfg.with_overrides(dict(parse_override(o) for o in overrides))
    return cfg
