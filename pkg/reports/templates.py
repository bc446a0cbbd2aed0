"""
Report Templates
================
Renders narrative reports from AbnormalitySpecs and parses (generated) reports
back into the abnormalities they claim.

Library file format (``reports/data/templates.txt``):
    [section]            one of SECTIONS below
    Template sentence with {slot} markers.

Combined-task reports always hold three sentences, in the order
mirror → rotation → occlusion. Single-task reports hold the one sentence of
their task.

Usage:
    from reports.templates import load_template_library, render_report, parse_report

    lib = load_template_library()
    report = render_report(spec, lib, rng_seed=3)
    claims = parse_report(report.text, lib)
"""

import re
import logging
from pathlib import Path
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import numpy as np

from common.errors import ConfigurationError, InvalidInputError
from synth.abnormalities import LOBES, ROTATIONS, AbnormalitySpec, Lobe, Task

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATES = Path(__file__).resolve().parent / "data" / "templates.txt"

SECTIONS = {
    "mirror.positive": frozenset(),
    "mirror.negative": frozenset(),
    "rotation.signed": frozenset({"direction", "degrees"}),
    "rotation.counterclockwise": frozenset({"degrees"}),
    "rotation.zero": frozenset(),
    "occlusion": frozenset({"lobe"}),
}
MIN_TEMPLATES = 30
MAX_COMBINED_WORDS = 50

KINDS = ("mirror", "rotation", "occlusion")
TASK_KINDS = {
    Task.MIRROR: ("mirror",),
    Task.ROTATION: ("rotation",),
    Task.OCCLUSION: ("occlusion",),
    Task.COMBINED: KINDS,
}

LOBE_PHRASES = {
    Lobe.LUL: "left upper lobe",
    Lobe.LLL: "left lower lobe",
    Lobe.RUL: "right upper lobe",
    Lobe.RML: "right middle lobe",
    Lobe.RLL: "right lower lobe",
}
DIRECTIONS = {1: "counterclockwise", -1: "clockwise"}
DEGREES = tuple(sorted({abs(r) for r in ROTATIONS if r}))

SLOT_PATTERNS = {
    "direction": "|".join(sorted(DIRECTIONS.values(), key=len, reverse=True)),
    "degrees": "|".join(str(d) for d in DEGREES),
    "lobe": "|".join(LOBE_PHRASES.values()),
}

_ALLOWED = re.compile(r"^[A-Za-z0-9 ,{}]+\.$")
_SLOT = re.compile(r"\{(\w+)\}")
_WORD = re.compile(r"[A-Za-z0-9]+")


def count_words(text: str) -> int:
    return len(_WORD.findall(text))


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.findall(r"[^.]+\.?", text) if s.strip()]


# ---------------------------------------------------------------------------
# Library
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    section: str
    text: str
    pattern: re.Pattern = field(compare=False, repr=False)

    @property
    def kind(self) -> str:
        return self.section.split(".")[0]

    def fill(self, **slots) -> str:
        return self.text.format(**slots)

    def match(self, sentence: str) -> Optional[dict]:
        m = self.pattern.fullmatch(sentence.strip())
        return None if m is None else {k: v.lower() for k, v in m.groupdict().items()}


def _compile(text: str) -> re.Pattern:
    parts, last = [], 0
    for m in _SLOT.finditer(text):
        parts.append(re.escape(text[last:m.start()]))
        parts.append(f"(?P<{m.group(1)}>{SLOT_PATTERNS[m.group(1)]})")
        last = m.end()
    parts.append(re.escape(text[last:]))
    body = "".join(parts)
    # tolerate any whitespace, including none before punctuation
    body = body.replace(r"\ ", r"\s+").replace(",", r"\s*,").replace(r"\.", r"\s*\.")
    return re.compile(body, re.IGNORECASE)


@dataclass(frozen=True)
class TemplateLibrary:
    templates: dict[str, tuple[Template, ...]]

    def section(self, name: str) -> tuple[Template, ...]:
        return self.templates.get(name, ())

    def candidates(self, kind: str, value) -> list[tuple[Template, dict]]:
        """Every (template, slot filling) able to express ``value`` for ``kind``."""
        if kind == "mirror":
            return [(t, {}) for t in self.section("mirror.positive" if value else "mirror.negative")]
        if kind == "rotation":
            if value == 0:
                return [(t, {}) for t in self.section("rotation.zero")]
            slots = {"direction": DIRECTIONS[int(np.sign(value))], "degrees": str(abs(value))}
            out = [(t, slots) for t in self.section("rotation.signed")]
            if value > 0:
                out += [(t, {"degrees": slots["degrees"]}) for t in self.section("rotation.counterclockwise")]
            return out
        if kind == "occlusion":
            if value is None:
                raise ConfigurationError("Occlusion sentence needs a lobe")
            return [(t, {"lobe": LOBE_PHRASES[Lobe(value)]}) for t in self.section("occlusion")]
        raise InvalidInputError(f"Unknown abnormality kind {kind!r}")

    def iter_sentences(self) -> Iterator[tuple[str, object, str]]:
        """The full rendered corpus: (kind, value, sentence) for every template filling."""
        values = {"mirror": (True, False), "rotation": ROTATIONS, "occlusion": LOBES}
        for kind in KINDS:
            for value in values[kind]:
                for template, slots in self.candidates(kind, value):
                    yield kind, value, template.fill(**slots)

    def validate(self) -> None:
        for kind, values in (("mirror", (True, False)), ("rotation", ROTATIONS), ("occlusion", LOBES)):
            for value in values:
                n = len(self.candidates(kind, value))
                if n < MIN_TEMPLATES:
                    raise ConfigurationError(
                        f"Template coverage for {kind}={value!r} is {n}, need >= {MIN_TEMPLATES}"
                    )


def parse_template_text(text: str) -> TemplateLibrary:
    sections: dict[str, list[Template]] = {}
    seen: dict[str, str] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SECTIONS:
                raise ConfigurationError(f"line {lineno}: unknown template section [{current}]")
            sections.setdefault(current, [])
            continue
        if current is None:
            raise ConfigurationError(f"line {lineno}: template outside of a section")
        if not _ALLOWED.match(line) or line.count(".") != 1:
            raise ConfigurationError(f"line {lineno}: templates use words, digits, commas and one final full stop")
        slots = set(_SLOT.findall(line))
        if slots != SECTIONS[current]:
            raise ConfigurationError(
                f"line {lineno}: section [{current}] needs slots {sorted(SECTIONS[current])}, got {sorted(slots)}"
            )
        key = line.lower()
        if key in seen:
            raise ConfigurationError(f"line {lineno}: duplicate template (also in [{seen[key]}])")
        seen[key] = current
        sections[current].append(Template(current, line, _compile(line)))
    return TemplateLibrary({name: tuple(ts) for name, ts in sections.items()})


def load_template_library(path: Optional[Path] = None) -> TemplateLibrary:
    path = Path(path) if path else DEFAULT_TEMPLATES
    if not path.exists():
        raise ConfigurationError(f"Template library not found: {path}")
    lib = parse_template_text(path.read_text(encoding="utf-8"))
    lib.validate()
    logger.debug(f"Loaded {sum(len(t) for t in lib.templates.values())} templates from {path}")
    return lib


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Report:
    text: str
    sentences: tuple[str, ...]

    @classmethod
    def from_text(cls, text: str) -> "Report":
        return cls(text, tuple(split_sentences(text)))

    @property
    def n_words(self) -> int:
        return count_words(self.text)


def _spec_value(spec: AbnormalitySpec, kind: str):
    return {"mirror": spec.mirrored, "rotation": spec.rotation_deg, "occlusion": spec.occluded_lobe}[kind]


def render_report(spec: AbnormalitySpec, lib: TemplateLibrary, rng_seed, task=Task.COMBINED) -> Report:
    """One sentence per abnormality of ``task``; template choice uniform given the seed."""
    rng = np.random.default_rng(rng_seed)
    sentences = []
    for kind in TASK_KINDS[Task(task)]:
        options = lib.candidates(kind, _spec_value(spec, kind))
        if not options:
            raise ConfigurationError(f"No template covers {kind}={_spec_value(spec, kind)!r}")
        template, slots = options[int(rng.integers(len(options)))]
        sentences.append(template.fill(**slots))
    return Report(" ".join(sentences), tuple(sentences))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _claim_value(template: Template, slots: dict):
    if template.section == "mirror.positive":
        return True
    if template.section == "mirror.negative":
        return False
    if template.section == "rotation.zero":
        return 0
    if template.kind == "rotation":
        sign = -1 if slots.get("direction") == DIRECTIONS[-1] else 1
        return sign * int(slots["degrees"])
    phrase_to_lobe = {p: lobe for lobe, p in LOBE_PHRASES.items()}
    return phrase_to_lobe[slots["lobe"]]


@dataclass
class ParsedReport:
    """Claims per abnormality kind; ``None`` where nothing (consistent) was claimed."""

    claims: dict = field(default_factory=dict)
    unparseable: list = field(default_factory=list)
    conflicts: list = field(default_factory=list)

    def claim(self, kind: str):
        return self.claims.get(kind)

    def has(self, kind: str) -> bool:
        return kind in self.claims

    def to_spec(self) -> Optional[AbnormalitySpec]:
        if not all(self.has(k) for k in KINDS):
            return None
        return AbnormalitySpec(self.claims["mirror"], self.claims["rotation"], self.claims["occlusion"])

    def matches(self, truth: AbnormalitySpec, task=Task.COMBINED) -> dict[str, bool]:
        """Per-abnormality correctness; missing or conflicting claims are incorrect."""
        return {
            kind: self.has(kind) and self.claims[kind] == _spec_value(truth, kind)
            for kind in TASK_KINDS[Task(task)]
        }

    def is_correct(self, truth: AbnormalitySpec, task=Task.COMBINED) -> bool:
        return all(self.matches(truth, task).values())


def parse_sentence(sentence: str, lib: TemplateLibrary) -> Optional[tuple[str, object]]:
    """(kind, value) claimed by one sentence, or None when no template (or several disagreeing) match."""
    readings = set()
    for templates in lib.templates.values():
        for template in templates:
            slots = template.match(sentence)
            if slots is not None:
                readings.add((template.kind, _claim_value(template, slots)))
    return readings.pop() if len(readings) == 1 else None


def parse_report(report: Union[Report, str], lib: TemplateLibrary) -> ParsedReport:
    text = report.text if isinstance(report, Report) else report
    parsed = ParsedReport()
    for sentence in split_sentences(text):
        reading = parse_sentence(sentence, lib)
        if reading is None:
            parsed.unparseable.append(sentence)
            continue
        kind, value = reading
        if kind in parsed.conflicts:
            continue
        if kind in parsed.claims and parsed.claims[kind] != value:
            del parsed.claims[kind]
            parsed.conflicts.append(kind)
            continue
        parsed.claims[kind] = value
    return parsed
