# =====================================================
# Token-wise weighted loss: token classification, weight masks, loss, ratios
# =====================================================

# Loading modules
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np  # array operations

from aspect_report import SpanKind, SpanMap

DEFAULT_ALPHA = 50.0


class WeightingError(ValueError):
    pass


class OffsetOutOfBounds(WeightingError):
    def __init__(self, token_index: int, start: int, end: int, limit: int):
        self.token_index = token_index
        super().__init__(f"token {token_index} offsets [{start}, {end}) fall outside [0, {limit}]")


class LengthMismatch(WeightingError):
    def __init__(self, *lengths: int):
        super().__init__(f"sequence lengths differ: {lengths}")


class PositiveLogProb(WeightingError):
    def __init__(self, position: int, value: float):
        self.position = position
        super().__init__(f"log-probability {value} at position {position} is positive")


class TokenCategory(Enum):
    SYSTEM_PROMPT = "system_prompt"
    VISUAL = "visual"
    STRUCTURE = "structure"
    COMMENT = "comment"
    SCORE = "score"


WEIGHTED_CATEGORIES = frozenset({TokenCategory.COMMENT, TokenCategory.SCORE})


@dataclass(frozen=True)
class TokenSpan:
    token_index: int
    char_start: int  # byte offsets, the "char" naming follows tokenizer offset mappings
    char_end: int
    category: TokenCategory


@dataclass(frozen=True)
class TokenWeightMask:
    weights: np.ndarray
    alpha: float

    def __len__(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True)
class LossSummary:
    total: float  # canonical summed loss
    token_count: int  # loss-bearing positions
    weight_mass: float  # sum of weights over loss-bearing positions

    @property
    def mean(self) -> float:
        return self.total / self.weight_mass if self.weight_mass else 0.0

    def __float__(self) -> float:
        return self.total


def classify_tokens(tokens: Sequence[tuple[int, int, int]], spans: SpanMap,
                    prefix_categories: Mapping[TokenCategory, Sequence[tuple[int, int]]] | None = None,
                    target_offset: int = 0) -> list[TokenSpan]:
    """
    Assign each token exactly one category.

    Inputs:
    tokens: (token_index, byte_start, byte_end) triples over prompt + target text
    spans: SpanMap of the target text
    prefix_categories: caller-supplied byte ranges for system-prompt and visual regions
    target_offset: byte position where the target text starts

    Overlap of one byte with a comment span makes a Comment token; otherwise with a
    score span a Score token; otherwise the prefix region it overlaps; otherwise Structure.
    """
    limit = target_offset + spans.length
    labeled = spans.shifted(target_offset).labeled
    starts = np.array([s.start for s in labeled], dtype=np.int64)
    ends = np.array([s.end for s in labeled], dtype=np.int64)
    is_comment = np.array([s.kind is SpanKind.COMMENT for s in labeled], dtype=bool)
    regions = [(cat, lo, hi) for cat, ranges in (prefix_categories or {}).items() for lo, hi in ranges]

    classified = []
    for token_index, start, end in tokens:
        if start < 0 or end < start or end > limit:
            raise OffsetOutOfBounds(token_index, start, end, limit)
        category = TokenCategory.STRUCTURE
        if end > start:
            hits = (starts < end) & (ends > start)
            if (hits & is_comment).any():
                category = TokenCategory.COMMENT
            elif hits.any():
                category = TokenCategory.SCORE
            else:
                for region, lo, hi in regions:
                    if lo < end and hi > start:
                        category = region
                        break
        classified.append(TokenSpan(token_index, start, end, category))
    return classified


def build_mask(classified: Sequence[TokenSpan], alpha: float = DEFAULT_ALPHA) -> TokenWeightMask:
    if alpha < 1:
        raise WeightingError(f"alpha must be >= 1, got {alpha}")
    if not classified:
        raise WeightingError("cannot build a mask for an empty token sequence")
    weighted = np.array([t.category in WEIGHTED_CATEGORIES for t in classified], dtype=bool)
    return TokenWeightMask(np.where(weighted, float(alpha), 1.0), float(alpha))


def weighted_loss(logp: Sequence[float], mask: TokenWeightMask, target_flags: Sequence[bool]) -> LossSummary:
    """-sum over loss-bearing positions of w_t * log p_t; an all-ones mask gives plain NLL."""
    logp = np.asarray(logp, dtype=np.float64)
    flags = np.asarray(target_flags, dtype=bool)
    if not (logp.size == len(mask) == flags.size):
        raise LengthMismatch(logp.size, len(mask), flags.size)
    positive = np.flatnonzero(logp > 0)
    if positive.size:
        raise PositiveLogProb(int(positive[0]), float(logp[positive[0]]))
    w = mask.weights[flags]
    total = -float(np.dot(w, logp[flags])) + 0.0  # no negative zero
    return LossSummary(total=total, token_count=int(flags.sum()), weight_mass=float(w.sum()))


def category_ratios(classified: Sequence[TokenSpan]) -> dict[TokenCategory, float]:
    if not classified:
        raise WeightingError("cannot compute ratios of an empty token sequence")
    counts = {cat: 0 for cat in TokenCategory}
    for token in classified:
        counts[token.category] += 1
    return {cat: n / len(classified) for cat, n in counts.items()}


def corpus_category_ratios(sequences: Iterable[Sequence[TokenSpan]]) -> dict[TokenCategory, float]:
    """Per-example macro average of category_ratios."""
    per_example = [category_ratios(seq) for seq in sequences]
    if not per_example:
        raise WeightingError("empty corpus")
    return {cat: math.fsum(r[cat] for r in per_example) / len(per_example) for cat in TokenCategory}


# Whitespace + punctuation tokenizer used for fixtures and offline runs
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def simple_tokenize(text: str, base_offset: int = 0) -> list[tuple[int, int, int]]:
    """(index, byte_start, byte_end) for every word or punctuation character."""
    tokens = []
    byte_pos = 0
    char_pos = 0
    for index, match in enumerate(_TOKEN_RE.finditer(text)):
        byte_pos += len(text[char_pos:match.start()].encode("utf-8"))
        width = len(match.group(0).encode("utf-8"))
        tokens.append((index, base_offset + byte_pos, base_offset + byte_pos + width))
        byte_pos += width
        char_pos = match.end()
    return tokens


def mask_record(example_id: str, classified: Sequence[TokenSpan], mask: TokenWeightMask) -> dict:
    return {
        "example_id": example_id,
        "alpha": mask.alpha,
        "tokens": [[t.char_start, t.char_end, t.category.value, float(w)] for t, w in zip(classified, mask.weights)],
    }


def export_masks(path: Path | str, records: Iterable[dict]) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count
