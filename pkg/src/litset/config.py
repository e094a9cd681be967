"""Experiment configuration: one JSON document, overridable with dotted keys."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .biencoder import EncoderConfig
from .builder import MetaFilter, SamplingConfig, SamplingMode
from .protocol import SplitMode, SplitSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    train: str | None = None
    test: str | None = None
    kb: str | None = None
    mentions: str | None = None
    sentences: str | None = None
    litset: str | None = None
    # JSON file {scheme: {type_id: verbalization}}
    tables: str | None = None
    output_dir: str = "runs"


@dataclass
class Seeds:
    split: list[int] = field(default_factory=lambda: [0, 1, 2])
    support: list[int] = field(default_factory=lambda: [0, 1, 2])
    train: int = 0
    sampling: int = 0


@dataclass
class GridConfig:
    n_labels: list[int] = field(default_factory=lambda: [3, 5, 10, 30, 50])
    schemes: list[str] = field(default_factory=lambda: ["cryptic", "short", "long"])
    budget: int = 10000
    k_list: list[int] = field(default_factory=lambda: [1, 5, 10])
    cryptic_seed: int = 0
    # generate a templated synthetic corpus instead of reading paths.train/test
    synthetic: bool = False
    synthetic_mentions: int = 3000
    synthetic_test_sentences: int = 300
    synthetic_seed: int = 0


@dataclass
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    split: dict = field(default_factory=lambda: {"mode": "frequency", "n_lit": 50, "n_fs": 16,
                                                 "coarse_map": None, "frequency_on_test": False})
    sampling: dict = field(default_factory=lambda: {"mode": "sampled", "p_geometric": 0.5,
                                                    "tag_separator": ", ", "per_entity": False})
    encoder: dict = field(default_factory=lambda: asdict(EncoderConfig()))
    lit_train: dict = field(default_factory=lambda: asdict(TrainConfig(learning_rate=1e-5)))
    fs_train: dict = field(default_factory=lambda: asdict(TrainConfig(learning_rate=1e-5)))
    k_list: list[int] = field(default_factory=lambda: [0, 1, 5, 10])
    seeds: Seeds = field(default_factory=Seeds)
    grid: GridConfig = field(default_factory=GridConfig)
    scheme: str | None = None
    denylist: list[str] | None = None
    workers: int = 1

    # -- typed views ------------------------------------------------------

    def split_spec(self, seed: int | None = None) -> SplitSpec:
        payload = dict(self.split)
        if seed is not None:
            payload["seed"] = seed
        coarse = payload.get("coarse_map")
        if coarse is None:
            payload.pop("coarse_map", None)
        elif isinstance(coarse, str):
            payload["coarse_map"] = json.loads(Path(coarse).read_text(encoding="utf-8"))
        return SplitSpec(**payload)

    def sampling_config(self) -> SamplingConfig:
        payload = dict(self.sampling)
        payload["seed"] = self.seeds.sampling
        if self.denylist:
            payload["meta_filter"] = MetaFilter(tuple(self.denylist))
        return SamplingConfig(**payload)

    def encoder_config(self, seed: int | None = None) -> EncoderConfig:
        payload = dict(self.encoder)
        if seed is not None:
            payload["seed"] = seed
        return EncoderConfig(**payload)

    def lit_config(self) -> TrainConfig:
        return TrainConfig(**{**self.lit_train, "seed": self.seeds.train})

    def fs_config(self) -> TrainConfig:
        return TrainConfig(**self.fs_train)

    def validate(self) -> None:
        try:
            self.split_spec()
            self.sampling_config()
            self.encoder_config()
            self.lit_config()
            self.fs_config()
        except (TypeError, ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        if any(k < 0 for k in self.k_list):
            raise ConfigError("k values must be >= 0")

    def check_paths(self, *names: str) -> None:
        for name in names:
            value = getattr(self.paths, name)
            if value is None:
                raise ConfigError(f"paths.{name} is required")
            if not Path(value).exists():
                raise ConfigError(f"paths.{name}: {value} does not exist")

    # -- (de)serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> ExperimentConfig:
        payload = dict(payload)
        unknown = set(payload) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"paths": Paths, "seeds": Seeds, "grid": GridConfig}
        kwargs = {}
        for key, value in payload.items():
            if key in nested:
                try:
                    kwargs[key] = nested[key](**value)
                except TypeError as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
            elif key in ("encoder", "lit_train", "fs_train", "split", "sampling"):
                kwargs[key] = {**getattr(cls(), key), **value}
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None) -> ExperimentConfig:
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    def override(self, dotted: str, value: Any, parse_json: bool = True) -> None:
        """Set ``a.b.c`` to ``value`` (strings are parsed as JSON when possible)."""
        if parse_json and isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        *parents, leaf = dotted.split(".")
        target: Any = self
        for part in parents:
            target = target.get(part) if isinstance(target, dict) else getattr(target, part, None)
            if target is None:
                raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(target, dict):
            if leaf not in target:
                raise ConfigError(f"unknown config key {dotted!r}")
            target[leaf] = value
        elif is_dataclass(target) and leaf in {f.name for f in fields(target)}:
            setattr(target, leaf, value)
        else:
            raise ConfigError(f"unknown config key {dotted!r}")


def lookup(config: ExperimentConfig, dotted: str) -> Any:
    target: Any = config
    for part in dotted.split("."):
        target = target.get(part) if isinstance(target, dict) else getattr(target, part)
    return target


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (SamplingMode, SplitMode)):
        return value.value
    if is_dataclass(value):
        return _plain(asdict(value))
    return value


TINY_ENCODER = "tiny:layers=2,hidden=64,heads=4,vocab=8192"


def toy_grid_config(output_dir: str = "runs/toy-grid", seeds: Sequence[int] = (0, 1)) -> ExperimentConfig:
    """Desk-scale sweep on the synthetic corpus with tiny random encoders.

    Learning rates are far above the pretrained-encoder presets because the
    encoders start from scratch and only see a few hundred mentions.
    """
    cfg = ExperimentConfig()
    cfg.paths.output_dir = output_dir
    cfg.split.update(mode="frequency", n_lit=30, n_fs=6)
    cfg.encoder.update(token_encoder_id=TINY_ENCODER, label_encoder_id=TINY_ENCODER,
                       max_sequence_length=64)
    cfg.lit_train.update(learning_rate=1e-3, batch_size=16, epochs=3)
    cfg.fs_train.update(learning_rate=1e-3, batch_size=16, max_epochs=100, patience=5)
    cfg.seeds.split = list(seeds)
    cfg.seeds.support = list(seeds)
    cfg.grid = GridConfig(n_labels=[3, 10, 30], schemes=["cryptic", "long"], budget=150,
                          k_list=[1, 5], synthetic=True, synthetic_mentions=3000)
    return cfg
