# =====================================================
# Human-alignment metrics: per-aspect Spearman correlation and pairwise preference accuracy
# =====================================================

# Loading modules
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np  # array operations
import pandas as pd  # tie-averaged ranks, tables

from aspect_report import CANONICAL_ORDER, Aspect, AspectReport, EvalRecord

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


class DegenerateInput(MetricError):
    pass


class AlignmentError(MetricError):
    def __init__(self, missing: Sequence[str]):
        self.missing = sorted(missing)
        super().__init__(f"no counterpart for video ids: {', '.join(self.missing)}")


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks, tied values share their mean rank."""
    return pd.Series(np.asarray(values, dtype=np.float64)).rank(method="average").to_numpy()


def spearman(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Pearson correlation of tie-averaged ranks."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.size != y.size:
        raise MetricError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise MetricError("spearman needs at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("constant sequence, rank correlation undefined")

    a = average_ranks(x)
    b = average_ranks(y)
    a -= a.mean()
    b -= b.mean()
    # identical or mirrored rankings are reported exactly
    if np.array_equal(a, b):
        return 1.0
    if np.array_equal(a, -b):
        return -1.0
    r = float(np.dot(a, b) / (np.sqrt(np.dot(a, a)) * np.sqrt(np.dot(b, b))))
    return min(1.0, max(-1.0, r))


@dataclass(frozen=True)
class CorrelationReport:
    per_aspect: Mapping[Aspect, float | None]  # rho x 100, two decimals; None when undefined
    sample_count: int
    excluded: tuple[Aspect, ...] = ()

    @classmethod
    def from_percentages(cls, values: Sequence[float] | Mapping[Aspect, float], sample_count: int = 0) -> CorrelationReport:
        if not isinstance(values, Mapping):
            if len(values) != len(CANONICAL_ORDER):
                raise MetricError(f"expected nine values, got {len(values)}")
            values = dict(zip(CANONICAL_ORDER, values))
        return cls({a: round(float(values[a]), 2) for a in CANONICAL_ORDER}, sample_count)

    @property
    def average(self) -> float | None:
        defined = [v for v in self.per_aspect.values() if v is not None]
        if not defined:
            return None
        return round(math.fsum(defined) / len(defined), 2)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"aspect": a.key, "abbreviation": a.abbreviation, "spearman_x100": self.per_aspect[a]}
                for a in CANONICAL_ORDER]
        rows.append({"aspect": "average", "abbreviation": "AVG", "spearman_x100": self.average})
        return pd.DataFrame(rows)

    def to_dict(self) -> dict:
        return {
            "per_aspect": {a.key: self.per_aspect[a] for a in CANONICAL_ORDER},
            "average": self.average,
            "sample_count": self.sample_count,
            "excluded": [a.key for a in self.excluded],
        }


def align_by_video(preds: Mapping[str, AspectReport], truths: Sequence[EvalRecord]) -> list[tuple[AspectReport, EvalRecord]]:
    truth_ids = {t.video_id for t in truths}
    missing = (truth_ids - set(preds)) | (set(preds) - truth_ids)
    if missing:
        raise AlignmentError(sorted(missing))
    return [(preds[t.video_id], t) for t in truths]


def aspect_correlations(preds: Mapping[str, AspectReport], truths: Sequence[EvalRecord]) -> CorrelationReport:
    """
    Nine per-aspect Spearman correlations (x100) and their mean.

    Inputs:
    preds: predicted reports keyed by video_id
    truths: ground-truth records; their order fixes the evaluation order
    """
    pairs = align_by_video(preds, truths)
    if len(pairs) < 2:
        raise MetricError("at least two aligned videos are required")

    per_aspect: dict[Aspect, float | None] = {}
    excluded = []
    for aspect in CANONICAL_ORDER:
        predicted = [report.score(aspect) for report, _ in pairs]
        observed = [record.scores[aspect.key] for _, record in pairs]
        try:
            per_aspect[aspect] = round(100.0 * spearman(predicted, observed), 2)
        except DegenerateInput:
            logger.warning("Aspect %s has constant scores; excluded from the average", aspect.key)
            per_aspect[aspect] = None
            excluded.append(aspect)
    return CorrelationReport(per_aspect, len(pairs), tuple(excluded))


class Preference(Enum):
    A = "A"
    B = "B"
    TIE = "Tie"


@dataclass(frozen=True)
class PreferenceOutcome:
    pair_id: int
    winner: Preference
    label: Preference
    average_a: float
    average_b: float
    credit: float = field(default=0.0)


def _credit(winner: Preference, label: Preference) -> float:
    if winner is Preference.TIE:
        # score tie: full credit against a tie label, half against a decisive one
        return 1.0 if label is Preference.TIE else 0.5
    return 1.0 if winner is label else 0.0


def pairwise_outcomes(pairs: Sequence[tuple[AspectReport, AspectReport, Preference | str]],
                      aspects: Sequence[Aspect] | None = None) -> list[PreferenceOutcome]:
    outcomes = []
    for pair_id, (report_a, report_b, label) in enumerate(pairs):
        label = Preference(label)
        avg_a = report_a.mean_score(aspects)
        avg_b = report_b.mean_score(aspects)
        if avg_a > avg_b:
            winner = Preference.A
        elif avg_b > avg_a:
            winner = Preference.B
        else:
            winner = Preference.TIE
        outcome = PreferenceOutcome(pair_id, winner, label, avg_a, avg_b, _credit(winner, label))
        if winner is Preference.TIE:
            logger.debug("Pair %d tied at %.4f (label %s, credit %.1f)", pair_id, avg_a, label.value, outcome.credit)
        outcomes.append(outcome)
    return outcomes


def pairwise_accuracy(pairs: Sequence[tuple[AspectReport, AspectReport, Preference | str]],
                      aspects: Sequence[Aspect] | None = None) -> float:
    """Share of pairs whose averaged-score preference matches the human label."""
    if not pairs:
        raise MetricError("no preference pairs")
    outcomes = pairwise_outcomes(pairs, aspects)
    return math.fsum(o.credit for o in outcomes) / len(outcomes)
