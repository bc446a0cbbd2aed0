"""
Run Configuration
=================
YAML run config (``config/default.yaml``) loaded into frozen dataclasses.

- ``--set section.key=value`` overrides (values parsed as YAML scalars)
- registry ids and incompatible combinations rejected at load
- ``RunConfig.hash`` = sha256 of the canonical JSON of the resolved config

Usage:
    cfg = load_run_config(None, ["dataset.n_phantoms=100", "encoder.classifier=transformer"])
    enc = cfg.encoder_config(n_labels=11)
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from common.errors import ConfigurationError, MissingInputError
from common.io_utils import config_hash
from models.decoder import DecoderConfig
from models.encoder import EncoderConfig
from training.datasets import resolve_task
from training.search import SearchGrid
from training.trainer import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "config" / "default.yaml"
SECTIONS = ("dataset", "encoder", "decoder", "train_encoder", "train_decoder", "search", "paths")


@dataclass(frozen=True)
class DatasetConfig:
    n_phantoms: int = 500
    shape: tuple = (64, 64, 64)
    native_shape: Optional[tuple] = None
    task: str = "combined"
    multiplier: int = 1
    seed: int = 7
    workers: int = 1


@dataclass(frozen=True)
class SearchConfig:
    enabled: bool = False
    learning_rates: tuple = (1e-5, 1e-4, 1e-3, 1e-2)
    batch_sizes: tuple = (6, 12, 25, 50)
    target: float = 0.95
    max_combinations: int = 4

    def grid(self) -> SearchGrid:
        return SearchGrid(tuple(self.learning_rates), tuple(self.batch_sizes))


@dataclass(frozen=True)
class PathsConfig:
    work_dir: str = "runs"
    phantoms: str = "phantoms"
    datasets: str = "datasets"
    checkpoints: str = "checkpoints"
    results: str = "results"
    logs: str = "logs"

    def resolve(self, name: str) -> Path:
        return Path(self.work_dir) / getattr(self, name)


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    dataset: DatasetConfig
    search: SearchConfig
    paths: PathsConfig
    train_encoder: TrainConfig
    train_decoder: TrainConfig

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def encoder_config(self, n_labels: int) -> EncoderConfig:
        return EncoderConfig(n_labels=n_labels, **self.raw["encoder"])

    def decoder_config(self, vocab_size: int, feature_size: int) -> DecoderConfig:
        return DecoderConfig(vocab_size=vocab_size, feature_size=feature_size, **self.raw["decoder"])


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigurationError(f"Override {item!r} is not of the form section.key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2 or not all(parts):
        raise ConfigurationError(f"Override key {key!r} needs a section, e.g. dataset.seed")
    try:
        parsed = yaml.safe_load(value) if value.strip() else None
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Override {item!r}: {e}") from e
    return parts, parsed


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        parts, value = parse_override(item)
        node = raw
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"Unknown config section in override {item!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigurationError(f"Unknown config key {'.'.join(parts)!r}")
        node[parts[-1]] = value
    return raw


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"[{section}] {e}") from e


def _tuple(value) -> Optional[tuple]:
    return tuple(int(v) for v in value) if value is not None else None


def build_run_config(raw: dict) -> RunConfig:
    missing = [s for s in SECTIONS if not isinstance(raw.get(s), dict)]
    if missing:
        raise ConfigurationError(f"Config is missing section(s): {missing}")

    ds = dict(raw["dataset"])
    ds["shape"] = _tuple(ds.get("shape"))
    ds["native_shape"] = _tuple(ds.get("native_shape"))
    dataset = _build("dataset", DatasetConfig, ds)
    if dataset.n_phantoms < 1 or dataset.multiplier < 1 or dataset.workers < 1:
        raise ConfigurationError("dataset.n_phantoms, multiplier and workers must be >= 1")

    # validates registry ids and pairings
    _build("encoder", EncoderConfig, {"n_labels": 1, **raw["encoder"]})
    _build("decoder", DecoderConfig, {"vocab_size": 8, "feature_size": 1, **raw["decoder"]})

    resolve_task(dataset.task)

    search = _build("search", SearchConfig, raw["search"])
    search.grid()
    return RunConfig(
        raw=raw,
        dataset=dataset,
        search=search,
        paths=_build("paths", PathsConfig, raw["paths"]),
        train_encoder=_build("train_encoder", TrainConfig, raw["train_encoder"]),
        train_decoder=_build("train_decoder", TrainConfig, raw["train_decoder"]),
    )


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path) if path else DEFAULT_CONFIG
    if not path.exists():
        raise MissingInputError(f"Config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    return build_run_config(apply_overrides(raw, overrides))
