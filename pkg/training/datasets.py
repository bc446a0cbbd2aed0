"""
Training Datasets
=================
torch ``Dataset`` views over the on-disk manifests written by ``synth`` and
``reports``, plus the task registry that fixes label widths.

Task registry:
    mirror | rotation | occlusion | combined    surrogate tasks, 1 / 5 / 5 / 11 logits
    mined:<label>                               one SARLE-mined label, 1 logit

Layout of a dataset directory:
    manifest.jsonl        SampleRecords (written by ``inject``)
    volumes/<id>.npy.gz   injected volumes
    reports.jsonl         one rendered report per sample (written by ``reports-gen``)
    vocab.json            word vocabulary for the decoder
    mined_labels.csv      long-format labels (written by ``mine-labels``)
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset as TorchDataset

from common.errors import ConfigurationError, InvalidInputError, MissingInputError
from common.io_utils import read_jsonl, write_jsonl
from models.encoder import to_token_representation
from reports.tokenizer import TokenSequence, Vocabulary, pad_batch, tokenize
from synth.abnormalities import AbnormalitySpec, Task, task_label_names
from synth.dataset_builder import SampleRecord, load_dataset
from volumes.volume_core import load_volume

logger = logging.getLogger(__name__)

MINED_PREFIX = "mined:"
REPORTS_FILE = "reports.jsonl"
VOCAB_FILE = "vocab.json"
MINED_LABELS_FILE = "mined_labels.csv"


# ---------------------------------------------------------------------------
# Task registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    name: str
    label_names: tuple[str, ...]
    surrogate: Optional[Task] = None
    mined_label: Optional[str] = None

    @property
    def n_labels(self) -> int:
        return len(self.label_names)


def resolve_task(name: str) -> TaskSpec:
    name = str(getattr(name, "value", name))
    if name.startswith(MINED_PREFIX):
        label = name[len(MINED_PREFIX):]
        if not label:
            raise ConfigurationError("mined task needs a label name, e.g. mined:pleural_effusion")
        return TaskSpec(name, (label,), mined_label=label)
    try:
        task = Task(name)
    except ValueError:
        choices = [t.value for t in Task] + [f"{MINED_PREFIX}<label>"]
        raise ConfigurationError(f"Unknown task {name!r}; choose from {choices}") from None
    return TaskSpec(name, task_label_names(task), surrogate=task)


def load_mined_labels(path: Path, label: str) -> dict[str, int]:
    """report_id -> 0/1 for one label from a long-format labels CSV."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Mined labels not found: {path}")
    df = pd.read_csv(path, dtype={"report_id": str})
    rows = df[df["label_name"] == label]
    if rows.empty:
        raise ConfigurationError(f"{path} holds no values for label {label!r}")
    return dict(zip(rows["report_id"], rows["value"].astype(int)))


# ---------------------------------------------------------------------------
# Volumes for the encoder
# ---------------------------------------------------------------------------

class VolumeDataset(TorchDataset):
    """(volume [D, H, W] float32, label [n_labels] float32) per sample of one split."""

    def __init__(self, dataset_dir: Path, split: Optional[str], task: Optional[str] = None, cache: bool = True):
        self.dataset_dir = Path(dataset_dir)
        dataset = load_dataset(self.dataset_dir, split)
        self.task = resolve_task(task or dataset.task.value)
        self.samples: list[SampleRecord] = dataset.samples
        if not self.samples:
            raise InvalidInputError(f"No samples in split {split!r} of {self.dataset_dir}")

        if self.task.mined_label:
            mined = load_mined_labels(self.dataset_dir / MINED_LABELS_FILE, self.task.mined_label)
            missing = [s.sample_id for s in self.samples if s.sample_id not in mined]
            if missing:
                raise MissingInputError(f"{len(missing)} samples have no mined {self.task.mined_label} label")
            labels = [[mined[s.sample_id]] for s in self.samples]
        else:
            if self.task.surrogate != dataset.task:
                raise ConfigurationError(f"{self.dataset_dir} holds {dataset.task.value} samples, not {self.task.name}")
            labels = [s.label_bits for s in self.samples]
        self.labels = torch.tensor(np.asarray(labels, dtype=np.float32))
        self._cache: Optional[dict[int, torch.Tensor]] = {} if cache else None

    def __len__(self) -> int:
        return len(self.samples)

    def volume(self, i: int) -> torch.Tensor:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        stem = self.dataset_dir / self.samples[i].volume_path
        data = torch.from_numpy(np.ascontiguousarray(load_volume(stem).data, dtype=np.float32))
        if self._cache is not None:
            self._cache[i] = data
        return data

    def __getitem__(self, i: int):
        return self.volume(i), self.labels[i]

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return tuple(self.volume(0).shape)

    @property
    def specs(self) -> list[AbnormalitySpec]:
        return [s.spec for s in self.samples]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRecord:
    sample_id: str
    split: str
    text: str

    def to_dict(self) -> dict:
        return {"id": self.sample_id, "split": self.split, "text": self.text}


def save_reports(dataset_dir: Path, records: Sequence[ReportRecord]) -> Path:
    path = Path(dataset_dir) / REPORTS_FILE
    write_jsonl(path, [r.to_dict() for r in records])
    return path


def load_reports(dataset_dir: Path) -> dict[str, ReportRecord]:
    path = Path(dataset_dir) / REPORTS_FILE
    if not path.exists():
        raise MissingInputError(f"Reports not found: {path} (run reports-gen first)")
    return {r["id"]: ReportRecord(r["id"], r["split"], r["text"]) for r in read_jsonl(path)}


def load_vocabulary(dataset_dir: Path) -> Vocabulary:
    path = Path(dataset_dir) / VOCAB_FILE
    if not path.exists():
        raise MissingInputError(f"Vocabulary not found: {path} (run reports-gen first)")
    return Vocabulary.load(path)


# ---------------------------------------------------------------------------
# Encoded images + reference reports for the decoder
# ---------------------------------------------------------------------------

@torch.no_grad()
def encode_images(encoder, volumes: VolumeDataset, representation: str, batch_size: int = 8) -> torch.Tensor:
    """
    Run a (frozen) encoder over every volume.

    tokens        → int64 [N, 100]
    feature_maps  → float32 [N, chunks, C, fh, fw]
    """
    encoder.eval()
    out = []
    loader = DataLoader(volumes, batch_size=batch_size, shuffle=False)
    for batch, _ in loader:
        if representation == "tokens":
            out.append(torch.from_numpy(to_token_representation(encoder(batch).penultimate)))
        elif representation == "feature_maps":
            out.append(encoder.features(batch).float())
        else:
            raise ConfigurationError(f"Unknown representation {representation!r}")
    return torch.cat(out)


class ReportDataset(TorchDataset):
    """(encoded image, padded reference ids) pairs; specs kept for factual scoring."""

    def __init__(self, images: torch.Tensor, references: Sequence[TokenSequence],
                 specs: Sequence[AbnormalitySpec], sample_ids: Sequence[str], length: int = 0):
        if not (len(images) == len(references) == len(specs) == len(sample_ids)):
            raise InvalidInputError("images, references, specs and ids differ in length")
        self.images = images
        self.references = torch.from_numpy(pad_batch(references, length)) if references else torch.zeros(0, 0)
        self.specs = list(specs)
        self.sample_ids = list(sample_ids)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __getitem__(self, i: int):
        return self.images[i], self.references[i]

    @property
    def max_reference_len(self) -> int:
        return int(self.references.shape[1]) if len(self) else 0


def build_report_dataset(volumes: VolumeDataset, images: torch.Tensor, vocab: Vocabulary,
                         reports: dict[str, ReportRecord], length: int = 0) -> ReportDataset:
    missing = [s.sample_id for s in volumes.samples if s.sample_id not in reports]
    if missing:
        raise MissingInputError(f"{len(missing)} samples have no report, e.g. {missing[0]}")
    refs = [tokenize(reports[s.sample_id].text, vocab) for s in volumes.samples]
    return ReportDataset(images, refs, volumes.specs, [s.sample_id for s in volumes.samples], length)
