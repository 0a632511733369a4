"""Experiment configuration as nested dataclasses with a line-oriented ``key=value`` text form.

Keys are dotted paths (``adapt.eta=0.1``); ``#`` starts a comment; tuples are
comma-separated. Every field has a default, so an empty file is a valid config.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from enum import Enum

from . import augment, snn, space


class ConfigError(ValueError):
    pass


class Method(str, Enum):
    NO_ADAPT = "noadapt"
    SPACE = "space"


@dataclass(frozen=True)
class DataConfig:
    cache: str = ""  # dataset cache file; empty means generate from the fields below
    num_classes: int = 4
    image_size: tuple[int, ...] = (24, 24)
    samples_per_class: int = 150
    test_per_class: int = 50
    noise_floor: float = 0.05
    seed: int = 0
    limit: int = 0  # evaluate only the first `limit` test samples (0 = all)


@dataclass(frozen=True)
class CorruptionConfig:
    kind: augment.Corruption = augment.Corruption.GAUSSIAN
    severity: int = 5  # 0 = clean


@dataclass(frozen=True)
class AugmentConfig:
    mixture_width: int = 3
    depth_min: int = 1
    depth_max: int = 3
    alpha: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    logit_scale: float = 0.5
    surrogate_window: float = 2.0
    cosine_decay: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    method: Method = Method.SPACE
    checkpoint: str = "runs/source.snnw"
    output_dir: str = "runs/default"
    carry_state: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    adapt: space.AdaptConfig = field(default_factory=space.AdaptConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    neuron: snn.LifNeuronConfig = field(default_factory=snn.LifNeuronConfig)
    arch: snn.ArchConfig = field(default_factory=snn.ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def policy(self) -> augment.AugmentPolicy:
        return augment.AugmentPolicy(
            mixture_width=self.augment.mixture_width,
            mixture_depth=(self.augment.depth_min, self.augment.depth_max),
            strength=self.adapt.augment_strength,
            alpha=self.augment.alpha,
        )

    def dataset_spec(self):
        from .trainer import SyntheticDatasetSpec

        d = self.data
        return SyntheticDatasetSpec(d.num_classes, tuple(d.image_size), d.samples_per_class, d.test_per_class, d.noise_floor)


# --------------------------------------------------------------------------- text form


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _leaf_items(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            yield from _leaf_items(value, key + ".")
        else:
            yield key, value


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(text: str, tp):
    if tp is tuple:  # bare tuple annotations hold integers (shapes, channel lists)
        tp = tuple[int, ...]
    origin = typing.get_origin(tp)
    if origin is tuple:
        (inner, *_) = typing.get_args(tp) or (str,)
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_convert(p, inner) for p in parts)
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(tp, type) and issubclass(tp, Enum):
        return tp(text)
    if tp is int:
        return int(text, 0)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise TypeError(f"unsupported field type {tp}")


def _set_path(obj, path: list[str], raw: str):
    hints = _hints(type(obj))
    name = path[0]
    if name not in {f.name for f in dataclasses.fields(obj)}:
        raise KeyError(name)
    current = getattr(obj, name)
    if len(path) > 1:
        if not dataclasses.is_dataclass(current):
            raise KeyError(".".join(path))
        return dataclasses.replace(obj, **{name: _set_path(current, path[1:], raw)})
    if dataclasses.is_dataclass(current):
        raise KeyError(name)
    return dataclasses.replace(obj, **{name: _convert(raw, hints[name])})


def apply_overrides(cfg: ExperimentConfig, items, source: str = "override") -> ExperimentConfig:
    """Apply ``(key, raw value, line number)`` triples; errors name the location."""
    seen: dict[str, int] = {}
    for key, raw, line in items:
        where = f"{source} {line}" if line is not None else source
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = line
        try:
            cfg = _set_path(cfg, key.split("."), raw)
        except KeyError:
            raise ConfigError(f"{where}: unknown key {key!r}") from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    return cfg


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    items = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        items.append((key, raw, lineno))
    return apply_overrides(base or ExperimentConfig(), items, source="line")


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in _leaf_items(cfg):
        text = _format(v)
        if "#" in text or "\n" in text or "\r" in text or text != text.strip():
            raise ConfigError(f"value of {k!r} cannot be written in key=value form: {text!r}")
        lines.append(f"{k}={text}\n")
    return "".join(lines)


def config_dict(cfg: ExperimentConfig) -> dict:
    return {k: _format(v) for k, v in _leaf_items(cfg)}


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
