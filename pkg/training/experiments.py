"""
Experiments
===========
End-to-end stages built from the pieces in ``models`` and ``training``:

    render_dataset_reports   one template report per sample + the vocabulary
    fit_encoder              train (optionally search) an encoder on a surrogate task
    fit_decoder              train a decoder on frozen-encoder representations
    run_encoder_evaluation   metrics JSON + per-label scores CSV
    run_decoder_evaluation   next-word / factual accuracy + generated reports
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from common.config import RunConfig
from common.errors import ConfigurationError, InvalidInputError
from common.io_utils import config_hash, save_array, save_json, write_jsonl
from models.checkpoints import CheckpointMeta, load_checkpoint, load_checkpoint_meta, save_checkpoint
from models.decoder import DecoderConfig, ReportDecoder, build_decoder
from models.encoder import Encoder, EncoderConfig, build_encoder
from reports.templates import TemplateLibrary, render_report
from reports.tokenizer import Vocabulary
from synth.dataset_builder import load_dataset
from training.datasets import (
    VOCAB_FILE, ReportDataset, ReportRecord, VolumeDataset, build_report_dataset, encode_images,
    load_reports, load_vocabulary, resolve_task, save_reports,
)
from training.evaluation import (
    collect_encoder_outputs, decoder_loss, evaluate_decoder, evaluate_encoder, generate_reports,
    next_word_accuracy, score_reports,
)
from training.search import TrialOutcome, hyperparameter_search
from training.trainer import TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Reference reports
# ---------------------------------------------------------------------------

def render_dataset_reports(dataset_dir: Path, lib: TemplateLibrary, seed: int) -> tuple[list[ReportRecord], Vocabulary]:
    """
    Render one report per sample (template choice seeded by (seed, position))
    and build the vocabulary from every sentence the library can produce.
    """
    dataset_dir = Path(dataset_dir)
    dataset = load_dataset(dataset_dir)
    records = [
        ReportRecord(s.sample_id, s.split, render_report(s.spec, lib, [int(seed), i], s.task).text)
        for i, s in enumerate(dataset.samples)
    ]
    save_reports(dataset_dir, records)
    vocab = Vocabulary.build(sentence for _, _, sentence in lib.iter_sentences())
    vocab.save(dataset_dir / VOCAB_FILE)
    logger.info(f"   {len(records)} reports, vocabulary of {len(vocab)} tokens")
    return records, vocab


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

def encoder_model_hash(cfg: EncoderConfig, input_shape) -> str:
    return config_hash({"encoder": cfg.to_dict(), "input_shape": list(input_shape)})


def encoder_loss(model: Encoder, batch) -> torch.Tensor:
    volumes, labels = batch
    return F.binary_cross_entropy_with_logits(model(volumes).logits, labels)


def _train_with_optional_search(name, build_model, train_set, val_set, train_cfg: TrainConfig,
                                loss_fn, evaluate_fn, score_key, out_dir: Path, meta_for,
                                run_cfg: RunConfig) -> tuple[torch.nn.Module, TrainResult]:
    out_dir = Path(out_dir)

    def run(cfg: TrainConfig, stem_dir: Path):
        model = build_model()
        result = train(model, train_set, val_set, cfg, loss_fn, evaluate_fn, stem_dir, name, meta_for(model))
        return model, result

    if not run_cfg.search.enabled:
        return run(train_cfg, out_dir)

    def trial(cfg: TrainConfig) -> TrialOutcome:
        stem_dir = out_dir / "search" / f"lr{cfg.learning_rate:g}-b{cfg.batch_size}"
        model, result = run(cfg, stem_dir)
        return TrialOutcome(result.best_metrics.get(score_key), result.train_losses, (model, result, stem_dir))

    search = hyperparameter_search(
        trial, train_cfg, run_cfg.search.grid(), run_cfg.search.target,
        run_cfg.search.max_combinations, out_dir / f"{name}.search.jsonl", name,
    )
    if search.best_payload is None:
        raise ConfigurationError(f"{name}: no search trial produced a score")
    model, result, stem_dir = search.best_payload
    meta = load_checkpoint(stem_dir / name, model, meta_for(model).architecture)
    save_checkpoint(out_dir / name, model, meta)
    result.checkpoint = out_dir / f"{name}.pt"
    return model, result


def fit_encoder(run_cfg: RunConfig, dataset_dir: Path, out_dir: Path, task: Optional[str] = None,
                name: str = "encoder") -> tuple[Encoder, TrainResult]:
    task_spec = resolve_task(task or run_cfg.dataset.task)
    train_set = VolumeDataset(dataset_dir, "train", task_spec.name)
    val_set = VolumeDataset(dataset_dir, "val", task_spec.name)
    enc_cfg = run_cfg.encoder_config(task_spec.n_labels)
    shape = train_set.volume_shape

    def meta_for(model) -> CheckpointMeta:
        return CheckpointMeta(
            architecture=enc_cfg.architecture,
            config_hash=encoder_model_hash(enc_cfg, shape),
            step=0, task=task_spec.name,
            model=enc_cfg.to_dict(),
            extra={"input_shape": list(shape), "run_config_hash": run_cfg.hash},
        )

    def evaluate(model, ds) -> dict:
        return evaluate_encoder(model, ds, task_spec.label_names)

    return _train_with_optional_search(
        name, lambda: build_encoder(enc_cfg, shape), train_set, val_set, run_cfg.train_encoder,
        encoder_loss, evaluate, "accuracy", out_dir, meta_for, run_cfg,
    )


def load_encoder(stem: Path, expected: Optional[EncoderConfig] = None) -> tuple[Encoder, CheckpointMeta]:
    """Rebuild an encoder from its checkpoint; ``expected`` pins architecture and config."""
    meta = load_checkpoint_meta(stem)
    cfg = EncoderConfig(**meta.model)
    shape = tuple(meta.extra["input_shape"])
    architecture, expected_hash = cfg.architecture, None
    if expected is not None:
        architecture, expected_hash = expected.architecture, encoder_model_hash(expected, shape)
    model = Encoder(cfg, shape)
    load_checkpoint(stem, model, architecture, expected_hash)
    return model.eval(), meta


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

def _feature_size(encoder: Encoder, representation: str) -> int:
    if representation == "tokens":
        return 1
    if encoder.feature_map_size is None:
        raise ConfigurationError("feature_maps representation needs the chunked_2d extractor")
    fh, fw = encoder.feature_map_size
    return fh * fw


def report_split(dataset_dir: Path, encoder: Encoder, representation: str, split: str,
                 vocab: Vocabulary, task: str) -> ReportDataset:
    volumes = VolumeDataset(dataset_dir, split, task)
    images = encode_images(encoder, volumes, representation)
    return build_report_dataset(volumes, images, vocab, load_reports(dataset_dir))


def decoder_model_hash(cfg: DecoderConfig, encoder_hash: str) -> str:
    return config_hash({"decoder": cfg.to_dict(), "encoder": encoder_hash})


def decoder_loss_fn(model: ReportDecoder, batch) -> torch.Tensor:
    images, refs = batch
    return model.loss(refs, images)


def fit_decoder(run_cfg: RunConfig, dataset_dir: Path, encoder_stem: Path, out_dir: Path,
                name: str = "decoder") -> tuple[ReportDecoder, TrainResult]:
    encoder, enc_meta = load_encoder(encoder_stem)
    for p in encoder.parameters():
        p.requires_grad_(False)
    representation = run_cfg.raw["decoder"]["representation"]
    vocab = load_vocabulary(dataset_dir)
    train_set = report_split(dataset_dir, encoder, representation, "train", vocab, enc_meta.task)
    val_set = report_split(dataset_dir, encoder, representation, "val", vocab, enc_meta.task)

    dec_cfg = run_cfg.decoder_config(len(vocab), _feature_size(encoder, representation))
    longest = max(train_set.max_reference_len, val_set.max_reference_len)
    if dec_cfg.max_len < longest:
        raise ConfigurationError(f"decoder.max_len {dec_cfg.max_len} below the longest reference ({longest} tokens)")

    def meta_for(model) -> CheckpointMeta:
        return CheckpointMeta(
            architecture=dec_cfg.architecture,
            config_hash=decoder_model_hash(dec_cfg, enc_meta.config_hash),
            step=0, task=enc_meta.task,
            model=dec_cfg.to_dict(),
            extra={"encoder": str(encoder_stem), "encoder_hash": enc_meta.config_hash,
                   "run_config_hash": run_cfg.hash},
        )

    def evaluate(model, ds) -> dict:
        return evaluate_decoder(model, ds)

    return _train_with_optional_search(
        name, lambda: build_decoder(dec_cfg), train_set, val_set, run_cfg.train_decoder,
        decoder_loss_fn, evaluate, "next_word_accuracy", out_dir, meta_for, run_cfg,
    )


def load_decoder(stem: Path, expected: Optional[DecoderConfig] = None) -> tuple[ReportDecoder, CheckpointMeta]:
    meta = load_checkpoint_meta(stem)
    cfg = DecoderConfig(**meta.model)
    architecture, expected_hash = cfg.architecture, None
    if expected is not None:
        architecture = expected.architecture
        expected_hash = decoder_model_hash(expected, meta.extra.get("encoder_hash", ""))
    model = ReportDecoder(cfg)
    load_checkpoint(stem, model, architecture, expected_hash)
    return model.eval(), meta


# ---------------------------------------------------------------------------
# Evaluation runs
# ---------------------------------------------------------------------------

def run_encoder_evaluation(dataset_dir: Path, encoder_stem: Path, out_dir: Path, split: str = "test",
                           expected: Optional[EncoderConfig] = None) -> dict:
    model, meta = load_encoder(encoder_stem, expected)
    task_spec = resolve_task(meta.task)
    data = VolumeDataset(dataset_dir, split, task_spec.name)
    metrics = evaluate_encoder(model, data, task_spec.label_names)
    out = collect_encoder_outputs(model, data)

    out_dir = Path(out_dir)
    rows = [
        {"sample_id": s.sample_id, "label": name, "score": float(out.probs[i, j]), "truth": int(out.labels[i, j])}
        for i, s in enumerate(data.samples)
        for j, name in enumerate(task_spec.label_names)
    ]
    scores_path = out_dir / f"encoder_scores_{split}.csv"
    scores_path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=["sample_id", "label", "score", "truth"]).to_csv(scores_path, index=False)

    record = {"architecture": meta.architecture, "task": meta.task, "split": split, "step": meta.step, **metrics}
    save_json(out_dir / f"encoder_eval_{split}.json", record)
    logger.info(f"✅ encoder {meta.architecture} on {meta.task}/{split}: accuracy {metrics['accuracy']:.3f}, "
                f"PR-AUC {metrics['pr_auc']}")
    return record


def run_decoder_evaluation(dataset_dir: Path, encoder_stem: Path, decoder_stem: Path, out_dir: Path,
                           lib: TemplateLibrary, split: str = "test",
                           expected: Optional[DecoderConfig] = None) -> dict:
    encoder, enc_meta = load_encoder(encoder_stem)
    decoder, dec_meta = load_decoder(decoder_stem, expected)
    if dec_meta.extra.get("encoder_hash") not in (None, enc_meta.config_hash):
        raise ConfigurationError(f"{decoder_stem} was trained on a different encoder than {encoder_stem}")
    vocab = load_vocabulary(dataset_dir)
    data = report_split(dataset_dir, encoder, decoder.cfg.representation, split, vocab, enc_meta.task)
    if len(data) == 0:
        raise InvalidInputError(f"Split {split!r} is empty")

    nwa = next_word_accuracy(decoder, data)
    texts, _ = generate_reports(decoder, data, vocab)
    task = resolve_task(enc_meta.task).surrogate
    if task is None:
        raise ConfigurationError("Factual accuracy needs a surrogate task")
    fact = score_reports(texts, data.specs, lib, task)

    out_dir = Path(out_dir)
    write_jsonl(out_dir / f"generated_{split}.jsonl",
                [{"id": sid, "text": t} for sid, t in zip(data.sample_ids, texts)])
    record = {
        "architecture": dec_meta.architecture,
        "representation": decoder.cfg.representation,
        "task": enc_meta.task,
        "split": split,
        "loss": decoder_loss(decoder, data),
        "next_word_accuracy": nwa.accuracy,
        "next_word_counts": [nwa.correct, nwa.total],
        **fact.to_dict(),
    }
    save_json(out_dir / f"decoder_eval_{split}.json", record)
    logger.info(f"✅ decoder {dec_meta.architecture} on {enc_meta.task}/{split}: "
                f"next-word {nwa.accuracy:.3f}, factual {fact.accuracy:.3f}")
    return record


def run_generation(dataset_dir: Path, encoder_stem: Path, decoder_stem: Path, out_dir: Path,
                   split: str = "test", dump_distributions: bool = False) -> Path:
    encoder, enc_meta = load_encoder(encoder_stem)
    decoder, _ = load_decoder(decoder_stem)
    vocab = load_vocabulary(dataset_dir)
    data = report_split(dataset_dir, encoder, decoder.cfg.representation, split, vocab, enc_meta.task)
    texts, results = generate_reports(decoder, data, vocab)

    out_dir = Path(out_dir)
    records = []
    for sid, text, r in zip(data.sample_ids, texts, results):
        records.append({"id": sid, "text": text, "ids": list(r.ids), "stop_reason": r.stop_reason})
        if dump_distributions:
            save_array(out_dir / "distributions" / f"{sid}.npy.gz", np.asarray(r.distributions))
    path = out_dir / f"generated_{split}.jsonl"
    write_jsonl(path, records)
    logger.info(f"✅ {len(records)} reports written to {path}")
    return path
