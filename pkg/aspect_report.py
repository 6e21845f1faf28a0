# =====================================================
# Nine-aspect evaluation schema: parsing, serialization and byte spans
# =====================================================

# Loading modules
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from itertools import accumulate
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from pydantic import BaseModel, Field, ValidationError

logger = logging.getLogger(__name__)


class Aspect(Enum):
    TECHNICAL_QUALITY = "technical_quality"
    DYNAMICS = "dynamics"
    CONSISTENCY = "consistency"
    PHYSICS = "physics"
    ELEMENT_PRESENCE = "element_presence"
    ELEMENT_QUALITY = "element_quality"
    ACTION_PRESENCE = "action_presence"
    ACTION_QUALITY = "action_quality"
    OVERALL = "overall"

    @property
    def key(self) -> str:
        return self.value

    @property
    def abbreviation(self) -> str:
        return _ABBREVIATIONS[self]

    @property
    def description(self) -> str:
        return _DESCRIPTIONS[self]

    @classmethod
    def from_key(cls, key: str) -> Aspect:
        return cls(key)


# Enum definition order is the canonical order
CANONICAL_ORDER: tuple[Aspect, ...] = tuple(Aspect)
ASPECT_KEYS: tuple[str, ...] = tuple(a.key for a in CANONICAL_ORDER)

_ABBREVIATIONS = {
    Aspect.TECHNICAL_QUALITY: "TQ", Aspect.DYNAMICS: "DY", Aspect.CONSISTENCY: "CO",
    Aspect.PHYSICS: "PH", Aspect.ELEMENT_PRESENCE: "EP", Aspect.ELEMENT_QUALITY: "EQ",
    Aspect.ACTION_PRESENCE: "AP", Aspect.ACTION_QUALITY: "AQ", Aspect.OVERALL: "OR",
}

_DESCRIPTIONS = {
    Aspect.TECHNICAL_QUALITY: "sharpness, natural colour, and freedom from noise or compression artifacts",
    Aspect.DYNAMICS: "amount of meaningful motion: object and camera movement, changes of light or weather",
    Aspect.CONSISTENCY: "objects keep stable identity and properties over time, without flicker or sudden changes",
    Aspect.PHYSICS: "behaviour and interactions that respect real-world physical laws",
    Aspect.ELEMENT_PRESENCE: "share of the objects named in the instruction that actually appear",
    Aspect.ELEMENT_QUALITY: "realism and detail of the rendered objects",
    Aspect.ACTION_PRESENCE: "whether the actions and interactions named in the instruction take place",
    Aspect.ACTION_QUALITY: "naturalness and smoothness of those actions and interactions",
    Aspect.OVERALL: "holistic judgement of the video across all other aspects",
}


# ---------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------
class ReportError(ValueError):
    """Base class for structured-output failures."""


class MalformedStructure(ReportError):
    def __init__(self, position: int, reason: str = "malformed structure"):
        self.position = position  # byte offset into the raw text
        self.reason = reason
        super().__init__(f"{reason} at byte {position}")


class MissingAspect(ReportError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing aspect {name!r}")


class ScoreOutOfRange(ReportError):
    def __init__(self, aspect: str, value: Any):
        self.aspect = aspect
        self.value = value
        super().__init__(f"score {value!r} for {aspect!r} is outside the configured bounds")


class EmptyComment(ReportError):
    def __init__(self, aspect: str):
        self.aspect = aspect
        super().__init__(f"empty comment for {aspect!r}")


# ---------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class ScoreBounds:
    low: float = 0.0
    high: float = 5.0

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"invalid score bounds [{self.low}, {self.high}]")

    def contains(self, value: float) -> bool:
        return value == value and self.low <= value <= self.high  # NaN fails the first test


DEFAULT_BOUNDS = ScoreBounds()


@dataclass(frozen=True)
class AspectEntry:
    comment: str
    score: float


@dataclass(frozen=True)
class AspectReport:
    """Structured output y = {comments, scores}; equality ignores provenance fields."""

    entries: Mapping[Aspect, AspectEntry]
    raw_text: str = field(default="", compare=False)
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        missing = [a for a in CANONICAL_ORDER if a not in self.entries]
        if missing:
            raise MissingAspect(missing[0].key)
        # canonical order regardless of construction history
        object.__setattr__(self, "entries", {a: self.entries[a] for a in CANONICAL_ORDER})

    def score(self, aspect: Aspect) -> float:
        return self.entries[aspect].score

    def comment(self, aspect: Aspect) -> str:
        return self.entries[aspect].comment

    @property
    def overall(self) -> float:
        return self.entries[Aspect.OVERALL].score

    def scores(self) -> dict[str, float]:
        return {a.key: e.score for a, e in self.entries.items()}

    def comments(self) -> dict[str, str]:
        return {a.key: e.comment for a, e in self.entries.items()}

    def mean_score(self, aspects: Sequence[Aspect] | None = None) -> float:
        chosen = CANONICAL_ORDER if aspects is None else tuple(aspects)
        return math.fsum(self.entries[a].score for a in chosen) / len(chosen)


class SpanKind(Enum):
    COMMENT = "comment"
    SCORE = "score"
    STRUCTURE = "structure"


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    kind: SpanKind
    aspect: Aspect | None = None

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SpanMap:
    """Byte ranges of comment and score values inside raw_text; the rest is structure."""

    length: int
    labeled: tuple[Span, ...]

    def spans(self) -> list[Span]:
        out = []
        cursor = 0
        for span in self.labeled:
            if span.start > cursor:
                out.append(Span(cursor, span.start, SpanKind.STRUCTURE))
            out.append(span)
            cursor = span.end
        if cursor < self.length:
            out.append(Span(cursor, self.length, SpanKind.STRUCTURE))
        return out

    def of_kind(self, kind: SpanKind) -> list[Span]:
        return [s for s in self.spans() if s.kind is kind]

    def shifted(self, offset: int) -> SpanMap:
        moved = tuple(Span(s.start + offset, s.end + offset, s.kind, s.aspect) for s in self.labeled)
        return SpanMap(self.length + offset, moved)


# ---------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------
_FENCE_OPEN_RE = re.compile(r"^[ \t]*```[^\n`]*\n", re.MULTILINE)
_WHITESPACE = " \t\n\r"
_DECODER = json.JSONDecoder()


class _Scanner:
    """Walks one JSON object recording the character ranges of comment and score values."""

    def __init__(self, text: str, bounds: ScoreBounds):
        self.text = text
        self.bounds = bounds
        self.byte_at = [0, *accumulate(len(ch.encode("utf-8")) for ch in text)]
        self.entries: dict[Aspect, AspectEntry] = {}
        self.spans: dict[Aspect, tuple[Span, Span]] = {}
        self.warnings: list[str] = []

    def fail(self, pos: int, reason: str):
        raise MalformedStructure(self.byte_at[min(pos, len(self.text))], reason)

    def skip(self, i: int) -> int:
        while i < len(self.text) and self.text[i] in _WHITESPACE:
            i += 1
        return i

    def expect(self, i: int, ch: str) -> int:
        i = self.skip(i)
        if i >= len(self.text) or self.text[i] != ch:
            self.fail(i, f"expected {ch!r}")
        return i + 1

    def key(self, i: int) -> tuple[str, int]:
        i = self.skip(i)
        if i >= len(self.text) or self.text[i] != '"':
            self.fail(i, "expected a quoted key")
        try:
            return json.decoder.scanstring(self.text, i + 1)
        except json.JSONDecodeError as err:
            self.fail(err.pos, err.msg)

    def value(self, i: int) -> tuple[Any, int, int]:
        i = self.skip(i)
        try:
            obj, end = _DECODER.raw_decode(self.text, i)
        except json.JSONDecodeError as err:
            self.fail(err.pos, err.msg)
        return obj, i, end

    def members(self, i: int):
        """Yields (key, value_start) and leaves self.cursor past the closing brace."""
        i = self.expect(i, "{")
        j = self.skip(i)
        if j < len(self.text) and self.text[j] == "}":
            self.cursor = j + 1
            return
        while True:
            name, i = self.key(i)
            i = self.expect(i, ":")
            self.cursor = i
            yield name, self.skip(i)
            i = self.skip(self.cursor)
            if i < len(self.text) and self.text[i] == ",":
                i += 1
                continue
            if i < len(self.text) and self.text[i] == "}":
                self.cursor = i + 1
                return
            self.fail(i, "expected ',' or '}'")

    def aspect_object(self, aspect: Aspect, i: int) -> int:
        comment = score = None
        comment_span = score_span = None
        for name, start in self.members(i):
            if name == "comment":
                if start >= len(self.text) or self.text[start] != '"':
                    self.fail(start, "comment must be a string")
                text, end = self.key(start)
                comment, comment_span = text, (start + 1, end - 1)
            elif name == "score":
                obj, start, end = self.value(start)
                if isinstance(obj, bool) or not isinstance(obj, (int, float)):
                    self.fail(start, "score must be a number")
                if not self.bounds.contains(float(obj)):
                    raise ScoreOutOfRange(aspect.key, obj)
                score, score_span = float(obj), (start, end)
            else:
                _, _, end = self.value(start)
                self.warnings.append(f"ignored key {name!r} inside {aspect.key!r}")
            self.cursor = end
        if comment is None or score is None:
            self.fail(i, f"aspect {aspect.key!r} needs both comment and score")
        if not comment.strip():
            raise EmptyComment(aspect.key)
        if aspect in self.entries:
            self.warnings.append(f"duplicate aspect {aspect.key!r}: last occurrence wins")
            logger.warning("Duplicate aspect %s in model output, keeping the last one", aspect.key)
        self.entries[aspect] = AspectEntry(comment=comment, score=score)
        self.spans[aspect] = (
            Span(self.byte_at[comment_span[0]], self.byte_at[comment_span[1]], SpanKind.COMMENT, aspect),
            Span(self.byte_at[score_span[0]], self.byte_at[score_span[1]], SpanKind.SCORE, aspect),
        )
        return self.cursor

    def report_object(self, start: int) -> int:
        for name, value_start in self.members(start):
            try:
                aspect = Aspect.from_key(name)
            except ValueError:
                _, _, end = self.value(value_start)
                self.warnings.append(f"ignored unknown key {name!r}")
                self.cursor = end
                continue
            self.cursor = self.aspect_object(aspect, value_start)
        return self.cursor


def _object_window(raw: str) -> tuple[int, int]:
    """
    Repair policy: one outer code fence, then prose before the first '{' and after the last '}'.
    A fence counts only when its opening line precedes the object and its closing
    marker is the last one in the text; backticks inside comments stay content.
    """
    lo, hi = 0, len(raw)
    brace = raw.find("{")
    opening = _FENCE_OPEN_RE.search(raw)
    if opening and (brace < 0 or opening.end() <= brace):
        closing = raw.rfind("```")
        if closing >= opening.end():
            lo, hi = opening.end(), closing
    first = raw.find("{", lo, hi)
    last = raw.rfind("}", lo, hi)
    if first < 0 or last < first:
        return -1, lo
    return first, last + 1


def parse_report(raw: str, bounds: ScoreBounds = DEFAULT_BOUNDS) -> tuple[AspectReport, SpanMap]:
    """
    Parse a model completion into a validated AspectReport and its byte SpanMap.

    Inputs:
    raw: full completion text, optionally fenced or surrounded by prose
    bounds: admissible score range

    Raises MalformedStructure, ScoreOutOfRange, EmptyComment or MissingAspect,
    each pointing at the first offending location.
    """
    start, end = _object_window(raw)
    scanner = _Scanner(raw, bounds)
    if start < 0:
        scanner.fail(end, "no JSON object found")
    stop = scanner.report_object(start)
    if scanner.skip(stop) != end:
        scanner.fail(scanner.skip(stop), "unexpected content after the report object")

    for aspect in CANONICAL_ORDER:
        if aspect not in scanner.entries:
            raise MissingAspect(aspect.key)

    labeled = sorted((s for pair in scanner.spans.values() for s in pair), key=lambda s: s.start)
    span_map = SpanMap(length=scanner.byte_at[-1], labeled=tuple(labeled))
    report = AspectReport(scanner.entries, raw_text=raw, warnings=tuple(scanner.warnings))
    return report, span_map


def serialize_report(report: AspectReport) -> str:
    """Canonical JSON: aspects in canonical order, comment before score."""
    payload = {
        aspect.key: {"comment": report.entries[aspect].comment, "score": float(report.entries[aspect].score)}
        for aspect in CANONICAL_ORDER
    }
    return json.dumps(payload, ensure_ascii=False, indent=2)


def compute_span_map(raw: str, bounds: ScoreBounds = DEFAULT_BOUNDS) -> SpanMap:
    return parse_report(raw, bounds)[1]


def report_from_mapping(scores: Mapping[str, float], comments: Mapping[str, str]) -> AspectReport:
    entries = {}
    for aspect in CANONICAL_ORDER:
        if aspect.key not in scores or aspect.key not in comments:
            raise MissingAspect(aspect.key)
        entries[aspect] = AspectEntry(comment=comments[aspect.key], score=float(scores[aspect.key]))
    return AspectReport(entries)


# ---------------------------------------------------------------------
# Dataset records
# ---------------------------------------------------------------------
class EvalRecord(BaseModel):
    video_id: str
    instruction: str
    category: str = ""
    generator_model: str = ""
    scores: dict[str, float]
    comments: dict[str, str]
    video_path: str | None = None
    provenance: dict[str, dict[str, Any]] = Field(default_factory=dict)
    pending_review: list[str] = Field(default_factory=list)
    human_reviewed: bool = False

    @property
    def overall(self) -> float:
        return self.scores[Aspect.OVERALL.key]


class ViolationKind(Enum):
    SCORE_OUT_OF_RANGE = "ScoreOutOfRange"
    MISSING_ASPECT = "MissingAspect"
    EMPTY_COMMENT = "EmptyComment"
    EMPTY_INSTRUCTION = "EmptyInstruction"
    UNRESOLVABLE_VIDEO = "UnresolvableVideo"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    aspect: str | None = None
    detail: str = ""


def validate_record(rec: EvalRecord, bounds: ScoreBounds = DEFAULT_BOUNDS,
                    base_dir: Path | None = None) -> list[Violation]:
    """Returns every problem found in a dataset row; an empty list means valid."""
    violations = []
    if not rec.instruction.strip():
        violations.append(Violation(ViolationKind.EMPTY_INSTRUCTION))
    for key in ASPECT_KEYS:
        if key not in rec.scores:
            violations.append(Violation(ViolationKind.MISSING_ASPECT, key, "score"))
        elif not bounds.contains(float(rec.scores[key])):
            violations.append(Violation(ViolationKind.SCORE_OUT_OF_RANGE, key, str(rec.scores[key])))
        if key not in rec.comments:
            violations.append(Violation(ViolationKind.MISSING_ASPECT, key, "comment"))
        elif not rec.comments[key].strip():
            violations.append(Violation(ViolationKind.EMPTY_COMMENT, key))
    if not rec.video_id.strip():
        violations.append(Violation(ViolationKind.UNRESOLVABLE_VIDEO, detail="empty video_id"))
    elif rec.video_path and not rec.video_path.startswith(("http://", "https://")):
        path = Path(rec.video_path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            violations.append(Violation(ViolationKind.UNRESOLVABLE_VIDEO, detail=str(path)))
    return violations


def report_from_record(rec: EvalRecord) -> AspectReport:
    """Ground-truth comments and scores as a report (the fine-tuning target)."""
    return report_from_mapping(rec.scores, rec.comments)


class RecordFileError(ReportError):
    def __init__(self, path: Path, line: int, reason: str):
        self.path, self.line = path, line
        super().__init__(f"{path}:{line}: {reason}")


def load_records(path: Path | str) -> list[EvalRecord]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(EvalRecord.model_validate_json(line))
            except ValidationError as err:
                raise RecordFileError(path, lineno, str(err).splitlines()[0]) from err
    return records


def write_records(path: Path | str, records: Iterable[EvalRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for rec in records:
            handle.write(rec.model_dump_json(exclude_defaults=True) + "\n")
