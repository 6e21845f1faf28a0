# =====================================================
# Comment metrics: ROUGE-1 / ROUGE-L overlap, judge verdicts, comment length statistics
# =====================================================

# Loading modules
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from alignment_metrics import MetricError, align_by_video
from aspect_report import CANONICAL_ORDER, Aspect, AspectReport, EvalRecord

logger = logging.getLogger(__name__)

_WORD_RE = re.compile(r"\w+")


class EmptyAfterTokenization(MetricError):
    pass


class UnparseableVerdict(MetricError):
    def __init__(self, raw: str):
        self.raw = raw
        super().__init__(f"no 1-5 verdict found in judge output: {raw[:120]!r}")


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; every non-word character (Unicode-aware) separates tokens."""
    return _WORD_RE.findall(text.lower())


def _score(overlap: int, candidate_len: int, reference_len: int) -> RougeScore:
    precision = overlap / candidate_len
    recall = overlap / reference_len
    f1 = 0.0 if overlap == 0 else 2 * precision * recall / (precision + recall)
    return RougeScore(precision, recall, f1)


def _tokens_or_fail(candidate: str, reference: str) -> tuple[list[str], list[str]]:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        raise EmptyAfterTokenization("candidate and reference need at least one word token")
    return cand, ref


def rouge1(candidate: str, reference: str) -> RougeScore:
    cand, ref = _tokens_or_fail(candidate, reference)
    overlap = sum((Counter(cand) & Counter(ref)).values())  # clipped counts
    return _score(overlap, len(cand), len(ref))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            current.append(previous[j - 1] + 1 if x == y else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rougeL(candidate: str, reference: str) -> RougeScore:
    cand, ref = _tokens_or_fail(candidate, reference)
    return _score(lcs_length(cand, ref), len(cand), len(ref))


# ---------------------------------------------------------------------
# Judge verdicts
# ---------------------------------------------------------------------
_LABELED_VERDICT_RE = re.compile(r"score\s*[:=]\s*\**\s*(\d+(?:\.\d+)?)", re.IGNORECASE)
_BARE_VERDICT_RE = re.compile(r"^\s*\**\s*(\d+(?:\.\d+)?)\s*\**\s*$")


def parse_verdict(raw: str) -> float:
    """A bare number, or the last 'Score: n' in the text, within [1, 5]."""
    matches = _LABELED_VERDICT_RE.findall(raw) or _BARE_VERDICT_RE.findall(raw)
    if not matches:
        raise UnparseableVerdict(raw)
    value = float(matches[-1])
    if not 1.0 <= value <= 5.0:
        raise UnparseableVerdict(raw)
    return value


def judge_comment(candidate: str, reference: str, context: str, judge) -> float:
    """Judge-model rating of a generated comment; judge is a ModelGateway bound to the judge endpoint."""
    return judge.judge_comment(candidate, reference, context)


# ---------------------------------------------------------------------
# Aggregates
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class OverlapReport:
    rouge1_f1: Mapping[Aspect, float]  # percent
    rougeL_f1: Mapping[Aspect, float]
    sample_count: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"aspect": a.key, "rouge1_f1": self.rouge1_f1[a], "rougeL_f1": self.rougeL_f1[a]}
            for a in CANONICAL_ORDER
        ])

    def to_dict(self) -> dict:
        return {
            "rouge1_f1": {a.key: self.rouge1_f1[a] for a in CANONICAL_ORDER},
            "rougeL_f1": {a.key: self.rougeL_f1[a] for a in CANONICAL_ORDER},
            "mean_rouge1_f1": round(math.fsum(self.rouge1_f1.values()) / len(CANONICAL_ORDER), 2),
            "mean_rougeL_f1": round(math.fsum(self.rougeL_f1.values()) / len(CANONICAL_ORDER), 2),
            "sample_count": self.sample_count,
        }


def comment_overlap(preds: Mapping[str, AspectReport], truths: Sequence[EvalRecord]) -> OverlapReport:
    """Per-aspect mean ROUGE-1 and ROUGE-L F1 (x100) of predicted against reference comments."""
    pairs = align_by_video(preds, truths)
    r1, rl = {}, {}
    for aspect in CANONICAL_ORDER:
        ones, ells = [], []
        for report, record in pairs:
            try:
                ones.append(rouge1(report.comment(aspect), record.comments[aspect.key]).f1)
                ells.append(rougeL(report.comment(aspect), record.comments[aspect.key]).f1)
            except EmptyAfterTokenization:
                logger.warning("Skipping %s/%s: empty comment after tokenization", record.video_id, aspect.key)
        r1[aspect] = round(100.0 * math.fsum(ones) / len(ones), 2) if ones else 0.0
        rl[aspect] = round(100.0 * math.fsum(ells) / len(ells), 2) if ells else 0.0
    return OverlapReport(r1, rl, len(pairs))


@dataclass(frozen=True)
class LengthStats:
    mean_words: float
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]
    comment_count: int
    empty_excluded: int

    def to_dict(self) -> dict:
        return {
            "mean_words": self.mean_words,
            "comment_count": self.comment_count,
            "empty_excluded": self.empty_excluded,
            "histogram": {"bin_edges": list(self.bin_edges), "counts": list(self.counts)},
        }


def word_length_stats(comments: Iterable[str], bin_width: int = 50) -> LengthStats:
    lengths = []
    empty = 0
    for text in comments:
        words = len(tokenize(text))
        if words == 0:
            empty += 1
        else:
            lengths.append(words)
    if empty:
        logger.warning("Excluded %d empty comments from length statistics", empty)
    if not lengths:
        raise MetricError("no non-empty comments")
    top = bin_width * (max(lengths) // bin_width + 1)
    counts, edges = np.histogram(lengths, bins=np.arange(0, top + bin_width, bin_width))
    return LengthStats(
        mean_words=math.fsum(lengths) / len(lengths),
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        comment_count=len(lengths),
        empty_excluded=empty,
    )


def comment_length_stats(records: Sequence[EvalRecord], bin_width: int = 50) -> LengthStats:
    """Word counts of every ground-truth comment across all aspects."""
    if not records:
        raise MetricError("no records")
    return word_length_stats((text for rec in records for text in rec.comments.values()), bin_width)
