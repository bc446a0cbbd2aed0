"""
Dataset Builder
===============
Generates phantom corpora and expands them into surrogate-task datasets,
saving every volume locally next to a JSON-lines manifest.

What it builds:
    - phantoms/   one volume + lobe label map per phantom, plus manifest.jsonl
    - datasets/<task>/volumes/   injected volumes, plus manifest.jsonl

Expansion per phantom:
    mirror     1 sample, exactly half of every consecutive phantom pair mirrored
    rotation   5 samples, one per rotation class
    occlusion  5 samples, one per lobe
    combined   ``multiplier`` samples, each with a uniformly drawn spec

Collection is incremental: phantoms and samples whose files already exist with
the recorded digest are skipped, and manifest records of existing samples never
change when phantoms are appended.

Usage:
    from synth.dataset_builder import collect_phantoms, build_dataset, materialize_dataset

    phantoms = collect_phantoms(work_dir / "phantoms", n=100, seed=7, shape=(64, 64, 64))
    dataset = build_dataset(phantoms, "rotation", seed=7)
    materialize_dataset(dataset, work_dir / "phantoms", work_dir / "datasets" / "rotation")
"""

import time
import logging
from pathlib import Path
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from common.errors import InvalidInputError, MissingInputError
from common.io_utils import load_json, read_jsonl, write_jsonl
from synth.abnormalities import (
    LOBES, ROTATIONS, AbnormalitySpec, Task, inject, task_label,
)
from synth.phantom import (
    derive_phantom_seed, generate_native_phantom, generate_phantom,
    load_phantom, save_phantom,
)
from volumes.volume_core import save_volume

logger = logging.getLogger(__name__)

# Split proportions: 364 / 50 / 50 out of 464
TEST_FRACTION = 50 / 464
VAL_FRACTION = 50 / 464

# RNG stream tags, keep the per-purpose draws independent
_STREAM_SPLIT = 1
_STREAM_MIRROR = 2
_STREAM_SPEC = 3


@dataclass(frozen=True)
class PhantomRecord:
    phantom_id: str
    index: int
    seed: int
    path: str               # stem relative to the phantom directory
    sha256: str = ""
    mask_sha256: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.phantom_id, "index": self.index, "seed": self.seed,
            "path": self.path, "sha256": self.sha256, "mask_sha256": self.mask_sha256,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomRecord":
        return cls(d["id"], int(d["index"]), int(d["seed"]), d["path"],
                   d.get("sha256", ""), d.get("mask_sha256", ""))


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    phantom_id: str
    task: Task
    spec: AbnormalitySpec
    label_bits: tuple[int, ...]
    split: str
    volume_path: str = ""
    sha256: str = ""
    phantom_sha256: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "phantom_id": self.phantom_id,
            "task": self.task.value,
            "spec": self.spec.to_dict(),
            "label_bits": list(self.label_bits),
            "split": self.split,
            "volume_path": self.volume_path,
            "sha256": self.sha256,
            "phantom_sha256": self.phantom_sha256,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            sample_id=d["id"],
            phantom_id=d["phantom_id"],
            task=Task(d["task"]),
            spec=AbnormalitySpec.from_dict(d["spec"]),
            label_bits=tuple(int(b) for b in d["label_bits"]),
            split=d["split"],
            volume_path=d.get("volume_path", ""),
            sha256=d.get("sha256", ""),
            phantom_sha256=d.get("phantom_sha256", ""),
        )


@dataclass
class Dataset:
    task: Task
    seed: int
    samples: list[SampleRecord] = field(default_factory=list)

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]

    def class_counts(self) -> dict[int, int]:
        """Sample count per label bit (sum over samples)."""
        totals = np.zeros(len(self.samples[0].label_bits), dtype=int) if self.samples else np.zeros(0, int)
        for s in self.samples:
            totals += np.asarray(s.label_bits)
        return {i: int(n) for i, n in enumerate(totals)}


# ---------------------------------------------------------------------------
# Phantom corpus
# ---------------------------------------------------------------------------

def phantom_id(index: int) -> str:
    return f"phantom-{index:05d}"


def collect_phantoms(
    out_dir: Path,
    n: int,
    seed: int,
    shape,
    native_shape=None,
) -> list[PhantomRecord]:
    """
    Generate ``n`` phantoms into ``out_dir`` and write ``manifest.jsonl``.

    With ``native_shape`` each phantom is rendered at that field of view and
    preprocessed down to ``shape``.
    """
    if n < 1:
        raise InvalidInputError(f"Need at least one phantom, got n={n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    known = {r["id"]: PhantomRecord.from_dict(r) for r in read_jsonl(manifest_path)} \
        if manifest_path.exists() else {}

    logger.info("=" * 55)
    logger.info(f"  Phantom generation: n={n}, seed={seed}, shape={tuple(shape)}")
    logger.info("=" * 55)
    start = time.time()

    records, generated = [], 0
    for index in range(n):
        pid = phantom_id(index)
        pseed = derive_phantom_seed(seed, index)
        stem = out_dir / pid
        prior = known.get(pid)
        if prior is not None and prior.seed == pseed and _volume_matches(stem, prior.sha256):
            records.append(prior)
            continue  # already collected

        if native_shape is not None:
            p = generate_native_phantom(pseed, native_shape, shape)
        else:
            p = generate_phantom(pseed, shape)
        digests = save_phantom(stem, p)
        records.append(PhantomRecord(pid, index, pseed, pid, digests["sha256"], digests["mask_sha256"]))
        generated += 1
        if generated % 25 == 0:
            logger.info(f"── {generated} phantoms generated ({index + 1}/{n})")

    write_jsonl(manifest_path, [r.to_dict() for r in records])
    logger.info(f"✅ {generated} generated, {n - generated} reused in {time.time() - start:.1f}s")
    return records


def load_phantom_manifest(phantom_dir: Path) -> list[PhantomRecord]:
    path = Path(phantom_dir) / "manifest.jsonl"
    if not path.exists():
        raise MissingInputError(f"Phantom manifest not found: {path}")
    return [PhantomRecord.from_dict(r) for r in read_jsonl(path)]


def _volume_matches(stem: Path, sha256: str) -> bool:
    sidecar = stem.parent / f"{stem.name}.json"
    data = stem.parent / f"{stem.name}.npy.gz"
    if not (sidecar.exists() and data.exists()) or not sha256:
        return False
    return load_json(sidecar).get("sha256") == sha256


def _phantom_sha256(stem: Path) -> str:
    sidecar = stem.parent / f"{stem.name}.json"
    return load_json(sidecar).get("sha256", "") if sidecar.exists() else ""


# ---------------------------------------------------------------------------
# Dataset planning
# ---------------------------------------------------------------------------

def assign_split(seed: int, index: int) -> str:
    u = np.random.default_rng([int(seed), int(index), _STREAM_SPLIT]).random()
    if u < TEST_FRACTION:
        return "test"
    if u < TEST_FRACTION + VAL_FRACTION:
        return "val"
    return "train"


def _mirrored(seed: int, index: int) -> bool:
    # one of each consecutive pair (2k, 2k+1) is mirrored
    pick = int(np.random.default_rng([int(seed), index // 2, _STREAM_MIRROR]).integers(2))
    return index % 2 == pick


def _draw_spec(seed: int, index: int, k: int) -> AbnormalitySpec:
    rng = np.random.default_rng([int(seed), int(index), int(k), _STREAM_SPEC])
    return AbnormalitySpec(
        mirrored=bool(rng.integers(2)),
        rotation_deg=ROTATIONS[int(rng.integers(len(ROTATIONS)))],
        occluded_lobe=LOBES[int(rng.integers(len(LOBES)))],
    )


def _specs_for(task: Task, seed: int, index: int, multiplier: int) -> list[AbnormalitySpec]:
    if task == Task.MIRROR:
        return [AbnormalitySpec(mirrored=_mirrored(seed, index))]
    if task == Task.ROTATION:
        return [AbnormalitySpec(rotation_deg=r) for r in ROTATIONS]
    if task == Task.OCCLUSION:
        return [AbnormalitySpec(occluded_lobe=lobe) for lobe in LOBES]
    return [_draw_spec(seed, index, k) for k in range(multiplier)]


def build_dataset(phantoms: Sequence, task, seed: int, multiplier: int = 1) -> Dataset:
    """
    Plan the samples of a surrogate-task dataset (no files written).

    ``phantoms`` are PhantomRecords (or anything with ``phantom_id``); their
    position in the sequence is the phantom index used for all random draws.
    """
    task = Task(task)
    if not phantoms:
        raise InvalidInputError("build_dataset needs at least one phantom")
    if multiplier < 1:
        raise InvalidInputError(f"multiplier must be >= 1, got {multiplier}")

    samples = []
    for index, ph in enumerate(phantoms):
        pid = getattr(ph, "phantom_id", None) or phantom_id(index)
        split = assign_split(seed, index)
        for k, spec in enumerate(_specs_for(task, seed, index, multiplier)):
            samples.append(SampleRecord(
                sample_id=f"{task.value}-{pid}-{k}",
                phantom_id=pid,
                task=task,
                spec=spec,
                label_bits=task_label(spec, task).bits,
                split=split,
            ))
    return Dataset(task, int(seed), samples)


# ---------------------------------------------------------------------------
# Materialization
# ---------------------------------------------------------------------------

def materialize_dataset(
    dataset: Dataset,
    phantom_dir: Path,
    out_dir: Path,
    workers: int = 1,
) -> Dataset:
    """
    Inject every planned sample and save its volume; rewrites ``manifest.jsonl``.

    Samples whose volume already exists with the recorded digest, injected
    into a phantom with the same digest as now, are skipped.
    Results do not depend on ``workers`` (every sample is a pure function of
    its phantom and spec).
    """
    phantom_dir, out_dir = Path(phantom_dir), Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    known = {r["id"]: r for r in read_jsonl(manifest_path)} if manifest_path.exists() else {}

    logger.info("=" * 55)
    logger.info(f"  Injecting {dataset.task.value}: {len(dataset.samples)} samples")
    logger.info("=" * 55)
    start = time.time()

    by_phantom: dict[str, list[SampleRecord]] = {}
    for s in dataset.samples:
        by_phantom.setdefault(s.phantom_id, []).append(s)

    def work(pid: str) -> list[SampleRecord]:
        out, phantom = [], None
        source = _phantom_sha256(phantom_dir / pid)
        for s in by_phantom[pid]:
            rel = f"volumes/{s.sample_id}"
            prior = known.get(s.sample_id)
            if prior is not None and prior.get("spec") == s.spec.to_dict() \
                    and source and prior.get("phantom_sha256") == source \
                    and _volume_matches(out_dir / rel, prior.get("sha256", "")):
                out.append(SampleRecord(**{**s.__dict__, "volume_path": rel, "sha256": prior["sha256"],
                                           "phantom_sha256": source}))
                continue  # already collected
            if phantom is None:
                phantom = load_phantom(phantom_dir / pid)
            volume, _ = inject(phantom, s.spec, s.task)
            sidecar = save_volume(out_dir / rel, volume)
            out.append(SampleRecord(**{**s.__dict__, "volume_path": rel, "sha256": sidecar["sha256"],
                                       "phantom_sha256": source}))
        return out

    order = list(by_phantom)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(work, order))
    else:
        chunks = [work(pid) for pid in order]
    samples = [s for chunk in chunks for s in chunk]

    write_jsonl(manifest_path, [s.to_dict() for s in samples])
    reused = sum(1 for s in samples if known.get(s.sample_id, {}).get("sha256") == s.sha256)
    logger.info(f"✅ {len(samples) - reused} written, {reused} reused in {time.time() - start:.1f}s")
    return Dataset(dataset.task, dataset.seed, samples)


def load_dataset(dataset_dir: Path, split: Optional[str] = None) -> Dataset:
    path = Path(dataset_dir) / "manifest.jsonl"
    if not path.exists():
        raise MissingInputError(f"Dataset manifest not found: {path}")
    samples = [SampleRecord.from_dict(r) for r in read_jsonl(path)]
    if not samples:
        raise InvalidInputError(f"Empty dataset manifest: {path}")
    task = samples[0].task
    if split is not None:
        samples = [s for s in samples if s.split == split]
    return Dataset(task, -1, samples)
