#!/usr/bin/env python3
"""
Tests for aspect_report.py: parsing and repairing evaluator output, canonical
serialization, byte span maps and dataset record validation.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import json

import numpy as np
import pytest

from aspect_report import (ASPECT_KEYS, CANONICAL_ORDER, Aspect, EmptyComment, EvalRecord, MalformedStructure,
                           MissingAspect, RecordFileError, ScoreBounds, ScoreOutOfRange, SpanKind, ViolationKind,
                           load_records, parse_report, report_from_mapping, report_from_record, serialize_report,
                           validate_record, write_records)

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")
WORDS = ["sharp", "blurry", "motion", "camera", "the", "fox", "runs", "smoothly", "flicker", "light", "water", "é",
         "```", "`frame`", "{}"]


def make_report(scores=None, comments=None):
    scores = scores or {k: 3.0 for k in ASPECT_KEYS}
    comments = comments or {k: f"Comment on {k}." for k in ASPECT_KEYS}
    return report_from_mapping(scores, comments)


def report_payload(**changes):
    payload = {k: {"comment": f"Comment on {k}.", "score": 3.0} for k in ASPECT_KEYS}
    payload.update(changes)
    return payload


def test_aspect_metadata():
    assert [a.abbreviation for a in CANONICAL_ORDER] == ["TQ", "DY", "CO", "PH", "EP", "EQ", "AP", "AQ", "OR"]
    assert CANONICAL_ORDER[-1] is Aspect.OVERALL
    assert Aspect.from_key("physics") is Aspect.PHYSICS
    assert all(a.description for a in Aspect)


def test_parse_canonical_report():
    raw = serialize_report(make_report())
    report, spans = parse_report(raw)
    assert report.overall == 3.0
    assert report.comment(Aspect.DYNAMICS) == "Comment on dynamics."
    assert len(spans.labeled) == 18
    assert report.raw_text == raw


def test_round_trip_randomized_reports():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        scores = {k: float(rng.uniform(0, 5)) for k in ASPECT_KEYS}
        comments = {k: " ".join(rng.choice(WORDS, size=rng.integers(1, 12))) for k in ASPECT_KEYS}
        report = make_report(scores, comments)
        parsed, spans = parse_report(serialize_report(report))
        assert parsed == report
        partition = spans.spans()
        assert partition[0].start == 0 and partition[-1].end == spans.length
        assert all(a.end == b.start for a, b in zip(partition, partition[1:]))
        assert all(s.length > 0 for s in partition)


def test_span_bytes_match_values_with_multibyte_text():
    comments = {k: f"café ☕ {k}" for k in ASPECT_KEYS}
    scores = {k: 4.5 for k in ASPECT_KEYS}
    raw = serialize_report(make_report(scores, comments))
    data = raw.encode("utf-8")
    _, spans = parse_report(raw)
    assert spans.length == len(data)
    for span in spans.of_kind(SpanKind.COMMENT):
        assert data[span.start:span.end].decode("utf-8") == comments[span.aspect.key]
    for span in spans.of_kind(SpanKind.SCORE):
        assert data[span.start:span.end] == b"4.5"


def test_fence_and_prose_are_repaired():
    body = serialize_report(make_report())
    clean, _ = parse_report(body)
    fenced, fenced_spans = parse_report(f"Here is my rating:\n```json\n{body}\n```\nThanks!")
    prose, _ = parse_report(f"Sure. {body} Hope this helps.")
    assert fenced == clean and prose == clean
    prefix = len("Here is my rating:\n```json\n".encode("utf-8"))
    assert fenced_spans.labeled[0].start > prefix


def test_backticks_inside_comments_are_content():
    comments = {k: f"Comment on {k}." for k in ASPECT_KEYS}
    comments["dynamics"] = "jerky ``` motion"
    comments["physics"] = "uses ``` marks"
    report = make_report(comments=comments)
    body = serialize_report(report)
    assert parse_report(body)[0] == report
    fenced, _ = parse_report(f"```json\n{body}\n```")
    assert fenced == report
    wrapped, _ = parse_report(f"Rating below.\n```\n{body}\n```\nDone.")
    assert wrapped == report
    assert wrapped.comment(Aspect.PHYSICS) == "uses ``` marks"


def test_mean_score_is_order_independent():
    scores = {k: v for k, v in zip(ASPECT_KEYS, [0.1, 0.2, 0.3, 1e-16, 4.9, 0.7, 2.2, 3.3, 1.1])}
    forward = make_report(scores)
    backward = make_report(dict(zip(ASPECT_KEYS, reversed(list(scores.values())))))
    assert forward.mean_score() == backward.mean_score()


def test_missing_aspect_is_named():
    payload = report_payload()
    del payload["physics"]
    with pytest.raises(MissingAspect) as err:
        parse_report(json.dumps(payload))
    assert err.value.name == "physics"


def test_score_out_of_range():
    payload = report_payload(dynamics={"comment": "Fast.", "score": 5.5})
    with pytest.raises(ScoreOutOfRange) as err:
        parse_report(json.dumps(payload))
    assert err.value.aspect == "dynamics" and err.value.value == 5.5
    # custom bounds admit it
    report, _ = parse_report(json.dumps(payload), ScoreBounds(1.0, 10.0))
    assert report.score(Aspect.DYNAMICS) == 5.5


def test_empty_comment_and_bad_types():
    with pytest.raises(EmptyComment):
        parse_report(json.dumps(report_payload(physics={"comment": "   ", "score": 2})))
    with pytest.raises(MalformedStructure):
        parse_report(json.dumps(report_payload(physics={"comment": "ok", "score": True})))
    with pytest.raises(MalformedStructure):
        parse_report(json.dumps(report_payload(physics={"comment": "ok", "score": "3"})))


def test_malformed_position_points_at_the_fault():
    raw = '{"technical_quality": {"comment": "ok" "score": 3}}'
    with pytest.raises(MalformedStructure) as err:
        parse_report(raw)
    assert err.value.position == raw.index('"score"')
    with pytest.raises(MalformedStructure):
        parse_report("no json here")


def test_duplicate_aspect_last_wins_and_unknown_keys_ignored():
    base = serialize_report(make_report())
    raw = base[:-2] + ',\n  "physics": {"comment": "Second.", "score": 1.0},\n  "mood": "calm"\n}'
    report, spans = parse_report(raw)
    assert report.comment(Aspect.PHYSICS) == "Second."
    assert report.score(Aspect.PHYSICS) == 1.0
    assert any("duplicate" in w for w in report.warnings)
    assert any("mood" in w for w in report.warnings)
    assert len(spans.labeled) == 18


def test_equality_ignores_raw_text():
    report = make_report()
    assert parse_report("  " + serialize_report(report))[0] == report
    assert report.mean_score() == 3.0
    assert report.mean_score([Aspect.OVERALL]) == 3.0


def test_record_validation():
    rec = EvalRecord(video_id="x", instruction="  ", scores={k: 3.0 for k in ASPECT_KEYS},
                     comments={k: "fine" for k in ASPECT_KEYS}, video_path="missing/video.mp4")
    rec.scores["dynamics"] = 7.0
    rec.comments["physics"] = ""
    del rec.scores["overall"]
    kinds = {(v.kind, v.aspect) for v in validate_record(rec)}
    assert (ViolationKind.EMPTY_INSTRUCTION, None) in kinds
    assert (ViolationKind.SCORE_OUT_OF_RANGE, "dynamics") in kinds
    assert (ViolationKind.EMPTY_COMMENT, "physics") in kinds
    assert (ViolationKind.MISSING_ASPECT, "overall") in kinds
    assert (ViolationKind.UNRESOLVABLE_VIDEO, None) in kinds


def test_bundled_records_are_valid():
    records = load_records(os.path.join(FIXTURES, "bench_sample.jsonl"))
    assert len(records) == 5
    for rec in records:
        assert validate_record(rec) == []
        assert report_from_record(rec).overall == rec.overall


def test_record_file_round_trip_and_errors(tmp_path):
    records = load_records(os.path.join(FIXTURES, "bench_sample.jsonl"))
    out = tmp_path / "copy.jsonl"
    write_records(out, records)
    assert load_records(out) == records

    bad = tmp_path / "bad.jsonl"
    bad.write_text(out.read_text().splitlines()[0] + "\n{\"video_id\": 3}\n")
    with pytest.raises(RecordFileError) as err:
        load_records(bad)
    assert err.value.line == 2


if __name__ == "__main__":
    print("🧪 Testing aspect report parsing and records")
    print("=" * 60)
    code = pytest.main([__file__, "-q"])
    print("\n🎉 All tests passed!" if code == 0 else "\n❌ Some tests failed. Please check the output above.")
    sys.exit(code)
