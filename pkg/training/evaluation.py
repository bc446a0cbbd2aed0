"""
Evaluation
==========
Encoder: BCE loss, strict all-labels accuracy, per-label accuracy, per-label
and macro PR-AUC.

Decoder:
    next_word_accuracy   argmax of the teacher-forced distribution vs the
                         reference token, micro-averaged over every non-pad
                         target position
    factual_accuracy     greedy reports parsed back into claims; a report is
                         correct iff every claim of the task parses and
                         matches the ground truth
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from common.errors import InvalidInputError
from models.decoder import ReportDecoder, generate, teacher_forced_logits
from reports.templates import TASK_KINDS, TemplateLibrary, parse_report
from reports.tokenizer import PAD_ID, Vocabulary, detokenize
from synth.abnormalities import AbnormalitySpec, Task
from training.metrics import multilabel_accuracy, per_label_pr_auc, wilson_interval

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderOutputs:
    probs: np.ndarray           # [N, n_labels]
    labels: np.ndarray          # [N, n_labels]
    loss: float


@torch.no_grad()
def collect_encoder_outputs(model, dataset, batch_size: int = 8) -> EncoderOutputs:
    if len(dataset) == 0:
        raise InvalidInputError("Cannot evaluate on an empty dataset")
    model.eval()
    probs, labels, total = [], [], 0.0
    for volumes, y in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        logits = model(volumes).logits
        total += F.binary_cross_entropy_with_logits(logits, y, reduction="sum").item()
        probs.append(torch.sigmoid(logits).double().numpy())
        labels.append(y.numpy())
    probs, labels = np.concatenate(probs), np.concatenate(labels).astype(int)
    return EncoderOutputs(probs, labels, total / labels.size)


def evaluate_encoder(model, dataset, label_names: Sequence[str], batch_size: int = 8) -> dict:
    out = collect_encoder_outputs(model, dataset, batch_size)
    acc = multilabel_accuracy(out.probs, out.labels)
    per_label = per_label_pr_auc(out.probs, out.labels, label_names)
    return {
        "loss": out.loss,
        "accuracy": acc["accuracy"],
        "accuracy_ci": wilson_interval(acc["n_correct"], acc["n"]),
        "per_label_accuracy": dict(zip(label_names, acc["per_bit"])),
        "pr_auc": per_label.get("macro"),
        "per_label_pr_auc": {k: v for k, v in per_label.items() if k != "macro"},
        "n": acc["n"],
    }


# ---------------------------------------------------------------------------
# Decoder: next-word accuracy
# ---------------------------------------------------------------------------

@dataclass
class NextWordResult:
    accuracy: float
    correct: int
    total: int


@torch.no_grad()
def next_word_accuracy(model: ReportDecoder, dataset, batch_size: int = 16) -> NextWordResult:
    if len(dataset) == 0:
        raise InvalidInputError("next_word_accuracy needs at least one report")
    model.eval()
    correct = total = 0
    for images, refs in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        probs = teacher_forced_logits(model, refs, images)
        targets = refs[:, 1:]
        keep = targets != PAD_ID
        correct += int(((probs.argmax(-1) == targets) & keep).sum())
        total += int(keep.sum())
    return NextWordResult(correct / total, correct, total)


@torch.no_grad()
def decoder_loss(model: ReportDecoder, dataset, batch_size: int = 16) -> float:
    """Mean token cross-entropy over the dataset (same weighting as training)."""
    model.eval()
    total, count = 0.0, 0
    for images, refs in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        n = int((refs[:, 1:] != PAD_ID).sum())
        total += model.loss(refs, images).item() * n
        count += n
    return total / count


# ---------------------------------------------------------------------------
# Decoder: factual accuracy
# ---------------------------------------------------------------------------

@dataclass
class FactualResult:
    accuracy: float
    n_correct: int
    n: int
    per_kind: dict[str, float] = field(default_factory=dict)
    unparseable: int = 0
    ci: Optional[tuple[float, float]] = None

    def to_dict(self) -> dict:
        return {
            "factual_accuracy": self.accuracy,
            "n_correct": self.n_correct,
            "n": self.n,
            "per_kind": self.per_kind,
            "unparseable_sentences": self.unparseable,
            "ci": list(self.ci) if self.ci else None,
        }


def score_reports(texts: Sequence[str], specs: Sequence[AbnormalitySpec], lib: TemplateLibrary,
                  task=Task.COMBINED) -> FactualResult:
    if len(texts) != len(specs):
        raise InvalidInputError(f"{len(texts)} reports for {len(specs)} specs")
    if not texts:
        raise InvalidInputError("factual accuracy needs at least one report")
    kinds = TASK_KINDS[Task(task)]
    hits = {k: 0 for k in kinds}
    n_correct = unparseable = 0
    for text, spec in zip(texts, specs):
        parsed = parse_report(text, lib)
        matches = parsed.matches(spec, task)
        unparseable += len(parsed.unparseable)
        for k in kinds:
            hits[k] += int(matches[k])
        n_correct += int(all(matches.values()))
    n = len(texts)
    return FactualResult(
        accuracy=n_correct / n,
        n_correct=n_correct,
        n=n,
        per_kind={k: hits[k] / n for k in kinds},
        unparseable=unparseable,
        ci=wilson_interval(n_correct, n),
    )


@torch.no_grad()
def generate_reports(model: ReportDecoder, dataset, vocab: Vocabulary, batch_size: int = 16):
    """Greedy reports for every sample: (texts, GenerationResults) in dataset order."""
    model.eval()
    texts, results = [], []
    for images, _ in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        for r in generate(model, images):
            results.append(r)
            texts.append(detokenize(r.ids, vocab))
    return texts, results


def factual_accuracy(model: ReportDecoder, dataset, vocab: Vocabulary, lib: TemplateLibrary,
                     task=Task.COMBINED, batch_size: int = 16) -> FactualResult:
    texts, _ = generate_reports(model, dataset, vocab, batch_size)
    return score_reports(texts, dataset.specs, lib, task)


def evaluate_decoder(model: ReportDecoder, dataset, vocab: Optional[Vocabulary] = None,
                     lib: Optional[TemplateLibrary] = None, task=Task.COMBINED, batch_size: int = 16) -> dict:
    """Validation metrics used during training; factual accuracy only when a template library is given."""
    nwa = next_word_accuracy(model, dataset, batch_size)
    metrics = {
        "loss": decoder_loss(model, dataset, batch_size),
        "next_word_accuracy": nwa.accuracy,
        "next_word_ci": wilson_interval(nwa.correct, nwa.total),
    }
    if lib is not None and vocab is not None:
        fact = factual_accuracy(model, dataset, vocab, lib, task, batch_size)
        metrics["factual_accuracy"] = fact.accuracy
        metrics["factual"] = fact.to_dict()
    return metrics
