"""
SARLE Label Miner
=================
Rule-based extraction of binary abnormality labels from narrative reports.

Two phases:
    1. normality filtering: walk the words of every sentence, and when a
       main word from the rule table is hit, apply its operation (delete the
       words that follow up to a stop word, delete the words before it, or
       drop the sentence)
    2. vocabulary matching: a label is 1 when any of its trigger phrases is
       left in the retained text

Rule table and vocabulary are plain-text files in ``sarle/data`` and can be
edited or swapped per language.

Usage:
    from sarle.sarle import load_rule_table, load_medical_vocabulary, label_report

    rules, vocab = load_rule_table(), load_medical_vocabulary()
    label_report("No sign of effusion, however a nodule is visible.", rules, vocab)
    # {'pleural_effusion': 0, 'pulmonary_nodule': 1}
"""

import re
import logging
from enum import Enum
from pathlib import Path
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import pandas as pd

from common.errors import ConfigurationError, InvalidInputError, MissingInputError
from training.metrics import ConfusionMatrix, classification_metrics

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent / "data"
DEFAULT_RULES = DATA_DIR / "rules.txt"
DEFAULT_VOCABULARY = DATA_DIR / "vocabulary.txt"
DEFAULT_CORPUS = DATA_DIR / "labeled_reports.csv"

SENTENCE_END = "."
_TOKEN = re.compile(r"\w+|[^\w\s]")
_SPACE_BEFORE_PUNCT = re.compile(r"\s+([^\w\s])")


class Operation(str, Enum):
    DELETE_FOLLOWING_UNTIL_STOP = "delete_following_until_stop"
    DELETE_PRECEDING = "delete_preceding"
    DELETE_SENTENCE = "delete_sentence"


def _tokens(text: str) -> list[str]:
    return _TOKEN.findall(text)


def _is_word(token: str) -> bool:
    return bool(re.match(r"\w", token))


def _join(tokens: Sequence[str]) -> str:
    return _SPACE_BEFORE_PUNCT.sub(r"\1", " ".join(tokens))


# ---------------------------------------------------------------------------
# Rule table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    main_word: tuple[str, ...]
    operation: Operation
    stop_words: frozenset


@dataclass(frozen=True)
class RuleTable:
    rules: tuple[Rule, ...]

    def __post_init__(self):
        # longest main word first so "no sign of" beats "no"
        ordered = tuple(sorted(self.rules, key=lambda r: len(r.main_word), reverse=True))
        object.__setattr__(self, "rules", ordered)

    def match(self, lower_tokens: Sequence[str], i: int) -> Optional[Rule]:
        for rule in self.rules:
            n = len(rule.main_word)
            if tuple(lower_tokens[i: i + n]) == rule.main_word:
                return rule
        return None


def parse_rule_text(text: str) -> RuleTable:
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            raise ConfigurationError(f"rules line {lineno}: expected 'main word | operation | stops'")
        main_word = tuple(t.lower() for t in _tokens(parts[0]))
        if not main_word:
            raise ConfigurationError(f"rules line {lineno}: empty main word")
        try:
            operation = Operation(parts[1])
        except ValueError:
            raise ConfigurationError(f"rules line {lineno}: unknown operation {parts[1]!r}") from None
        stops = frozenset(parts[2].lower().split()) | {SENTENCE_END}
        rules.append(Rule(main_word, operation, stops))
    if not rules:
        raise ConfigurationError("Rule table is empty")
    return RuleTable(tuple(rules))


def load_rule_table(path: Optional[Path] = None) -> RuleTable:
    path = Path(path) if path else DEFAULT_RULES
    if not path.exists():
        raise MissingInputError(f"Rule table not found: {path}")
    return parse_rule_text(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Medical vocabulary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MedicalVocabulary:
    """Trigger phrases per label. Phrase sets may overlap between labels."""

    phrases: dict

    def __post_init__(self):
        for label, phrases in self.phrases.items():
            if not phrases:
                raise ConfigurationError(f"Label {label!r} has no trigger phrases")

    @property
    def labels(self) -> list[str]:
        return sorted(self.phrases)

    def pattern(self, label: str) -> re.Pattern:
        alternatives = sorted(self.phrases[label], key=len, reverse=True)
        body = "|".join(r"\s+".join(map(re.escape, p.split())) for p in alternatives)
        return re.compile(rf"\b(?:{body})\b", re.IGNORECASE)


def parse_vocabulary_text(text: str) -> MedicalVocabulary:
    phrases = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        label, sep, rest = line.partition(":")
        if not sep or not label.strip():
            raise ConfigurationError(f"vocabulary line {lineno}: expected 'label: phrase, phrase'")
        phrases[label.strip()] = tuple(p.strip().lower() for p in rest.split(",") if p.strip())
    if not phrases:
        raise ConfigurationError("Medical vocabulary is empty")
    return MedicalVocabulary(phrases)


def load_medical_vocabulary(path: Optional[Path] = None) -> MedicalVocabulary:
    path = Path(path) if path else DEFAULT_VOCABULARY
    if not path.exists():
        raise MissingInputError(f"Vocabulary not found: {path}")
    return parse_vocabulary_text(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Phase 1 - normality filtering
# ---------------------------------------------------------------------------

def _sentences(tokens: list[str]) -> list[list[str]]:
    out, current = [], []
    for token in tokens:
        current.append(token)
        if token == SENTENCE_END:
            out.append(current)
            current = []
    if current:
        out.append(current)
    return out


def _filter_sentence(tokens: list[str], rules: RuleTable) -> Optional[list[str]]:
    lower = [t.lower() for t in tokens]
    keep = [True] * len(tokens)
    i = 0
    while i < len(tokens):
        rule = rules.match(lower, i) if keep[i] else None
        if rule is None:
            i += 1
            continue
        end = i + len(rule.main_word)
        if rule.operation == Operation.DELETE_SENTENCE:
            return None
        if rule.operation == Operation.DELETE_FOLLOWING_UNTIL_STOP:
            j = end
            while j < len(tokens) and lower[j] not in rule.stop_words:
                j += 1
            keep[i:j] = [False] * (j - i)
            i = j
        else:
            j = i - 1
            while j >= 0 and lower[j] not in rule.stop_words:
                j -= 1
            keep[j + 1:end] = [False] * (end - j - 1)
            i = end
    return [t for t, k in zip(tokens, keep) if k]


def filter_normal(report_text: str, rules: RuleTable) -> str:
    """Text left after removing (sub)sentences that describe normal findings."""
    kept = []
    for sentence in _sentences(_tokens(report_text)):
        retained = _filter_sentence(sentence, rules)
        if retained and any(_is_word(t) for t in retained):
            kept.append(_join(retained))
    return " ".join(kept)


# ---------------------------------------------------------------------------
# Phase 2 - vocabulary matching
# ---------------------------------------------------------------------------

def extract_labels(retained_text: str, vocab: MedicalVocabulary) -> dict[str, int]:
    return {label: int(bool(vocab.pattern(label).search(retained_text))) for label in vocab.labels}


def label_report(report_text: str, rules: RuleTable, vocab: MedicalVocabulary) -> dict[str, int]:
    return extract_labels(filter_normal(report_text, rules), vocab)


def label_reports(
    reports: Iterable[tuple[str, str]],
    rules: RuleTable,
    vocab: MedicalVocabulary,
) -> pd.DataFrame:
    """Long-format labels: one row per (report_id, label_name)."""
    rows = []
    for report_id, text in reports:
        for label, value in label_report(text, rules, vocab).items():
            rows.append({"report_id": report_id, "label_name": label, "value": value})
    return pd.DataFrame(rows, columns=["report_id", "label_name", "value"])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelerEvaluation:
    confusion: ConfusionMatrix
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]

    def to_dict(self) -> dict:
        return {
            **self.confusion.to_dict(),
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def evaluate_confusion(cm: ConfusionMatrix) -> LabelerEvaluation:
    m = classification_metrics(cm)
    return LabelerEvaluation(cm, m["accuracy"], m["recall"], m["specificity"])


def evaluate_labeler(predicted: Sequence[int], truth: Sequence[int]) -> LabelerEvaluation:
    if len(predicted) != len(truth):
        raise InvalidInputError(f"predicted ({len(predicted)}) and truth ({len(truth)}) differ in length")
    return evaluate_confusion(ConfusionMatrix.from_predictions(predicted, truth))


def load_labeled_reports(path: Optional[Path] = None) -> pd.DataFrame:
    path = Path(path) if path else DEFAULT_CORPUS
    if not path.exists():
        raise MissingInputError(f"Report corpus not found: {path}")
    df = pd.read_csv(path, dtype={"report_id": str})
    if not {"report_id", "text"} <= set(df.columns):
        raise InvalidInputError(f"{path}: needs report_id and text columns")
    return df


def evaluate_corpus(df: pd.DataFrame, rules: RuleTable, vocab: MedicalVocabulary) -> dict[str, LabelerEvaluation]:
    """Evaluate every vocabulary label that has a ground-truth column in ``df``."""
    labels = label_reports(zip(df["report_id"], df["text"]), rules, vocab)
    wide = labels.pivot(index="report_id", columns="label_name", values="value").reindex(df["report_id"])
    results = {}
    for label in vocab.labels:
        if label in df.columns:
            results[label] = evaluate_labeler(wide[label].tolist(), df[label].astype(int).tolist())
            logger.info(
                f"   {label:<20} acc={results[label].accuracy:.3f}  "
                f"sens={results[label].sensitivity}  spec={results[label].specificity}"
            )
    return results
