#!/usr/bin/env python3
"""
Tests for token_weighting.py: token classification against report spans,
weight masks (alpha = 50 by default) checked against span intersection on random
span maps and tokenizations, weighted loss and category ratios.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import json

import numpy as np
import pytest

from aspect_report import (ASPECT_KEYS, Span, SpanKind, SpanMap, compute_span_map, report_from_mapping,
                           serialize_report)
from token_weighting import (DEFAULT_ALPHA, LengthMismatch, OffsetOutOfBounds, PositiveLogProb, TokenCategory,
                             TokenSpan, WeightingError, build_mask, category_ratios, classify_tokens,
                             corpus_category_ratios, export_masks, mask_record, simple_tokenize, weighted_loss)


def target_text():
    report = report_from_mapping({k: 3.5 for k in ASPECT_KEYS}, {k: f"Good {k} overall." for k in ASPECT_KEYS})
    return serialize_report(report)


def random_mask(rng, size, alpha):
    options = list(TokenCategory)
    categories = [options[i] for i in rng.integers(0, len(options), size=size)]
    return build_mask([TokenSpan(i, i, i + 1, c) for i, c in enumerate(categories)], alpha)


def test_classification_of_report_tokens():
    text = target_text()
    spans = compute_span_map(text)
    classified = classify_tokens(simple_tokenize(text), spans)
    data = text.encode("utf-8")
    for token in classified:
        piece = data[token.char_start:token.char_end].decode("utf-8")
        if token.category is TokenCategory.SCORE:
            assert piece in {"3", ".", "5"}
        elif token.category is TokenCategory.COMMENT:
            assert piece in {"Good", "overall", "."} | set(ASPECT_KEYS)
    categories = {t.category for t in classified}
    assert categories == {TokenCategory.STRUCTURE, TokenCategory.COMMENT, TokenCategory.SCORE}
    # keys are structure even though they name aspects
    key_token = next(t for t in classified if data[t.char_start:t.char_end] == b"comment")
    assert key_token.category is TokenCategory.STRUCTURE


def test_straddling_token_counts_as_comment():
    text = target_text()
    spans = compute_span_map(text)
    comment = spans.of_kind(SpanKind.COMMENT)[0]
    # one token covering the opening quote and the first comment byte
    classified = classify_tokens([(0, comment.start - 1, comment.start + 1), (1, 0, 0)], spans)
    assert classified[0].category is TokenCategory.COMMENT
    assert classified[1].category is TokenCategory.STRUCTURE


def test_prefix_regions_and_offset():
    prompt = "System rules.\n<video>\n"
    target = target_text()
    text = prompt + target
    offset = len(prompt.encode("utf-8"))
    prefix = {TokenCategory.SYSTEM_PROMPT: [(0, 13)], TokenCategory.VISUAL: [(14, 21)]}
    classified = classify_tokens(simple_tokenize(text), compute_span_map(target), prefix, offset)
    assert classified[0].category is TokenCategory.SYSTEM_PROMPT
    visual = [t for t in classified if t.category is TokenCategory.VISUAL]
    assert [text.encode()[t.char_start:t.char_end] for t in visual] == [b"<", b"video", b">"]
    with pytest.raises(OffsetOutOfBounds):
        classify_tokens([(0, 0, len(text.encode()) + 1)], compute_span_map(target), prefix, offset)


def test_default_mask_uses_alpha_50():
    text = target_text()
    classified = classify_tokens(simple_tokenize(text), compute_span_map(text))
    mask = build_mask(classified)
    assert DEFAULT_ALPHA == 50.0
    assert set(np.unique(mask.weights).tolist()) == {1.0, 50.0}
    for token, weight in zip(classified, mask.weights):
        assert weight == (50.0 if token.category in (TokenCategory.COMMENT, TokenCategory.SCORE) else 1.0)
    with pytest.raises(WeightingError):
        build_mask(classified, alpha=0.5)
    with pytest.raises(WeightingError):
        build_mask([])


def random_span_map(rng):
    length = int(rng.integers(1, 120))
    cuts = sorted(set(rng.integers(0, length + 1, size=int(rng.integers(0, 12))).tolist()))
    labeled = []
    for start, end in zip(cuts[::2], cuts[1::2]):
        if end > start:
            labeled.append(Span(start, end, SpanKind.COMMENT if rng.random() < 0.5 else SpanKind.SCORE))
    return SpanMap(length, tuple(labeled))


def random_tokens(rng, length):
    cuts = sorted(set([0, length, *rng.integers(0, length + 1, size=int(rng.integers(0, length + 1))).tolist()]))
    tokens = [(i, s, e) for i, (s, e) in enumerate(zip(cuts, cuts[1:]))]
    for _ in range(int(rng.integers(0, 4))):  # overlapping and empty tokens
        s = int(rng.integers(0, length + 1))
        tokens.append((len(tokens), s, int(rng.integers(s, length + 1))))
    return tokens


def weighted_bytes(spans):
    return {b for s in spans.labeled if s.kind in (SpanKind.COMMENT, SpanKind.SCORE) for b in range(s.start, s.end)}


def assert_mask_follows_spans(tokens, spans, alpha):
    marked = weighted_bytes(spans)
    mask = build_mask(classify_tokens(tokens, spans), alpha)
    for (_, start, end), weight in zip(tokens, mask.weights):
        assert (weight == alpha) == any(b in marked for b in range(start, end))


def test_mask_matches_span_intersection_on_random_span_maps():
    rng = np.random.default_rng(31)
    for _ in range(500):
        spans = random_span_map(rng)
        assert_mask_follows_spans(random_tokens(rng, spans.length), spans, float(rng.uniform(1.5, 100)))


def test_mask_matches_span_intersection_on_random_reports():
    rng = np.random.default_rng(32)
    words = ["smooth", "blur", "é", "☕", "fox", "\"quoted\"", "3.5", "{x}", "```"]
    for _ in range(200):
        scores = {k: float(rng.integers(0, 11)) / 2 for k in ASPECT_KEYS}
        comments = {k: " ".join(rng.choice(words, size=int(rng.integers(1, 6)))) for k in ASPECT_KEYS}
        text = serialize_report(report_from_mapping(scores, comments))
        spans = compute_span_map(text)
        assert_mask_follows_spans(random_tokens(rng, spans.length), spans, DEFAULT_ALPHA)
        assert_mask_follows_spans(simple_tokenize(text), spans, DEFAULT_ALPHA)


def test_alpha_one_reduces_to_plain_nll():
    rng = np.random.default_rng(3)
    for _ in range(200):
        size = int(rng.integers(1, 60))
        logp = np.log(rng.uniform(1e-6, 1.0, size))
        flags = rng.random(size) < 0.7
        mask = random_mask(rng, size, 1.0)
        expected = -sum(float(lp) for lp, f in zip(logp, flags) if f)
        assert abs(weighted_loss(logp, mask, flags).total - expected) <= 1e-12 * max(1.0, abs(expected))


def test_loss_is_linear_with_coefficient_minus_weight():
    rng = np.random.default_rng(4)
    size = 40
    logp = np.log(rng.uniform(0.05, 0.9, size))
    flags = np.ones(size, dtype=bool)
    mask = random_mask(rng, size, DEFAULT_ALPHA)
    base = weighted_loss(logp, mask, flags).total
    h = 1e-3
    for t in range(size):
        bumped = logp.copy()
        bumped[t] -= h
        slope = (weighted_loss(bumped, mask, flags).total - base) / -h
        assert slope == pytest.approx(-mask.weights[t], rel=1e-6)


def test_loss_summary_and_errors():
    mask = build_mask([TokenSpan(0, 0, 1, TokenCategory.COMMENT), TokenSpan(1, 1, 2, TokenCategory.STRUCTURE)])
    summary = weighted_loss([-1.0, -2.0], mask, [True, True])
    assert summary.total == 52.0 and summary.token_count == 2 and summary.weight_mass == 51.0
    assert float(summary) == 52.0
    assert summary.mean == pytest.approx(52.0 / 51.0)
    assert weighted_loss([-1.0, -2.0], mask, [False, False]).total == 0.0
    with pytest.raises(LengthMismatch):
        weighted_loss([-1.0], mask, [True, True])
    with pytest.raises(PositiveLogProb) as err:
        weighted_loss([-1.0, 0.5], mask, [True, True])
    assert err.value.position == 1


def test_ratios_sum_to_one():
    text = target_text()
    classified = classify_tokens(simple_tokenize(text), compute_span_map(text))
    ratios = category_ratios(classified)
    assert sum(ratios.values()) == pytest.approx(1.0)
    assert ratios[TokenCategory.VISUAL] == 0.0
    corpus = corpus_category_ratios([classified, classified[:10]])
    assert sum(corpus.values()) == pytest.approx(1.0)
    with pytest.raises(WeightingError):
        corpus_category_ratios([])


def test_simple_tokenize_uses_byte_offsets():
    assert simple_tokenize("é a,b") == [(0, 0, 2), (1, 3, 4), (2, 4, 5), (3, 5, 6)]
    assert simple_tokenize("x", base_offset=10) == [(0, 10, 11)]


def test_export_masks(tmp_path):
    text = target_text()
    classified = classify_tokens(simple_tokenize(text), compute_span_map(text))
    record = mask_record("v1", classified, build_mask(classified, 2.0))
    path = tmp_path / "masks.jsonl"
    assert export_masks(path, [record, record]) == 2
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows[0]["alpha"] == 2.0
    assert len(rows[0]["tokens"]) == len(classified)
    assert {row[3] for row in rows[0]["tokens"]} == {1.0, 2.0}


if __name__ == "__main__":
    print("🧪 Testing token-wise weighting")
    print("=" * 60)
    code = pytest.main([__file__, "-q"])
    print("\n🎉 All tests passed!" if code == 0 else "\n❌ Some tests failed. Please check the output above.")
    sys.exit(code)
