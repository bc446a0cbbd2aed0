"""
Checkpoints
===========
Each checkpoint is a pair of files:

    <name>.pt     torch state_dict
    <name>.json   metadata: architecture, config_hash, step, metrics, task,
                  model (the config dict needed to rebuild the network)

Loading checks the architecture id (and the config hash when one is
requested) before any weights touch the model.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from common.errors import CheckpointMismatchError, MissingInputError
from common.io_utils import load_json, save_json

logger = logging.getLogger(__name__)


@dataclass
class CheckpointMeta:
    architecture: str
    config_hash: str
    step: int
    task: str
    metrics: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "config_hash": self.config_hash,
            "step": self.step,
            "task": self.task,
            "metrics": self.metrics,
            "model": self.model,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CheckpointMeta":
        return cls(
            architecture=d["architecture"],
            config_hash=d["config_hash"],
            step=int(d["step"]),
            task=d["task"],
            metrics=d.get("metrics", {}),
            model=d.get("model", {}),
            extra=d.get("extra", {}),
        )


def _paths(path_stem: Path) -> tuple[Path, Path]:
    stem = Path(path_stem)
    if stem.suffix in (".pt", ".json"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".pt"), stem.with_name(stem.name + ".json")


def save_checkpoint(path_stem: Path, model: nn.Module, meta: CheckpointMeta) -> Path:
    weights_path, meta_path = _paths(path_stem)
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = weights_path.with_name(f".{weights_path.name}.tmp")
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save(state, tmp)
    tmp.replace(weights_path)
    save_json(meta_path, meta.to_dict())
    logger.debug(f"   checkpoint {weights_path.name} (step {meta.step})")
    return weights_path


def load_checkpoint_meta(path_stem: Path) -> CheckpointMeta:
    _, meta_path = _paths(path_stem)
    if not meta_path.exists():
        raise MissingInputError(f"Checkpoint metadata not found: {meta_path}")
    return CheckpointMeta.from_dict(load_json(meta_path))


def load_checkpoint(path_stem: Path, model: nn.Module, architecture: str,
                    expected_hash: Optional[str] = None) -> CheckpointMeta:
    """Load weights into ``model`` after checking the checkpoint was built for it."""
    weights_path, _ = _paths(path_stem)
    meta = load_checkpoint_meta(path_stem)
    if not weights_path.exists():
        raise MissingInputError(f"Checkpoint weights not found: {weights_path}")
    if meta.architecture != architecture:
        raise CheckpointMismatchError(
            f"{weights_path.name} holds {meta.architecture}, requested {architecture}"
        )
    if expected_hash is not None and meta.config_hash != expected_hash:
        raise CheckpointMismatchError(
            f"{weights_path.name} config hash {meta.config_hash[:12]} != requested {expected_hash[:12]}"
        )
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointMismatchError(f"{weights_path.name}: {e}") from e
    return meta
