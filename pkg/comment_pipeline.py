# =====================================================
# Comment curation: revise -> validate -> human review queue
# =====================================================

# Loading modules
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from pydantic import BaseModel, Field, ValidationError

from aspect_report import ASPECT_KEYS, EvalRecord
from comment_metrics import UnparseableVerdict
from model_gateway import GatewayError, ModelGateway

logger = logging.getLogger(__name__)


class ReviewQueueError(ValueError):
    pass


class QueueEntry(BaseModel):
    record_id: str
    aspect: str
    original: str
    revised: str = ""  # the human reviewer edits this field
    issues: list[str] = Field(default_factory=list)


@dataclass
class CurationResult:
    records: list[EvalRecord]
    queue: list[QueueEntry]
    accepted: int = 0


def _curate_one(record: EvalRecord, aspect: str, revisor: ModelGateway, validator: ModelGateway) -> tuple[str, str, list[str], bool]:
    original = record.comments[aspect]
    try:
        revised = revisor.revise_comment(original, record.instruction, record.scores, aspect)
        verdict = validator.validate_comment(original, revised, record.instruction)
    except (GatewayError, UnparseableVerdict) as err:
        logger.warning("Record %s/%s quarantined: %s", record.video_id, aspect, err)
        return aspect, "", [f"agent error: {err}"], False
    return aspect, revised, list(verdict.issues), verdict.passed


def comment_pipeline(records: Sequence[EvalRecord], revisor: ModelGateway, validator: ModelGateway,
                     parallel: int = 1) -> CurationResult:
    """
    Revises every aspect comment and keeps the revisions the validator accepts.

    Inputs:
    records: dataset rows with ground-truth comments
    revisor: gateway bound to the comment-revisor endpoint
    validator: gateway bound to the validator endpoint
    parallel: number of comments processed concurrently

    Accepted revisions replace the comment and record {original, revised} under
    provenance; rejected ones and agent errors keep the original comment and go
    to the review queue.
    """
    jobs = [(record, aspect) for record in records for aspect in ASPECT_KEYS if aspect in record.comments]
    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        outcomes = list(pool.map(lambda job: _curate_one(job[0], job[1], revisor, validator), jobs))

    curated, queue = [], []
    accepted = 0
    position = 0
    for record in records:
        comments = dict(record.comments)
        provenance = {k: dict(v) for k, v in record.provenance.items()}
        pending = list(record.pending_review)
        for aspect in ASPECT_KEYS:
            if aspect not in record.comments:
                continue
            _, revised, issues, passed = outcomes[position]
            position += 1
            if passed:
                accepted += 1
                comments[aspect] = revised
                provenance[aspect] = {"original": record.comments[aspect], "revised": revised, "reviewer": "validator"}
            else:
                queue.append(QueueEntry(record_id=record.video_id, aspect=aspect, original=record.comments[aspect],
                                        revised=revised, issues=issues))
                if aspect not in pending:
                    pending.append(aspect)
        curated.append(record.model_copy(update={"comments": comments, "provenance": provenance,
                                                 "pending_review": pending}))
        logger.info("Record %s done", record.video_id)
    return CurationResult(curated, queue, accepted)


def export_review_queue(path: Path | str, entries: Iterable[QueueEntry]) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8") as handle:
        for entry in entries:
            handle.write(entry.model_dump_json() + "\n")
            count += 1
    return count


def load_review_queue(path: Path | str) -> list[QueueEntry]:
    entries = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(QueueEntry.model_validate_json(line))
        except ValidationError as err:
            raise ReviewQueueError(f"{path}:{number}: {err.errors()[0]['msg']}") from err
    return entries


def merge_review_queue(records: Sequence[EvalRecord], entries: Sequence[QueueEntry]) -> list[EvalRecord]:
    """Applies human-edited queue entries; an entry left with an empty revision keeps the original comment."""
    by_id = {r.video_id: r for r in records}
    unknown = sorted({e.record_id for e in entries} - set(by_id))
    if unknown:
        raise ReviewQueueError(f"queue entries reference unknown records: {', '.join(unknown)}")

    updates: dict[str, dict] = {}
    for entry in entries:
        if entry.aspect not in ASPECT_KEYS:
            raise ReviewQueueError(f"unknown aspect {entry.aspect!r} for record {entry.record_id}")
        record = by_id[entry.record_id]
        state = updates.setdefault(entry.record_id, {
            "comments": dict(record.comments),
            "provenance": {k: dict(v) for k, v in record.provenance.items()},
            "pending_review": list(record.pending_review),
            "human_reviewed": True,
        })
        final = entry.revised.strip() or entry.original
        state["comments"][entry.aspect] = final
        state["provenance"][entry.aspect] = {"original": entry.original, "revised": final, "reviewer": "human"}
        if entry.aspect in state["pending_review"]:
            state["pending_review"].remove(entry.aspect)

    return [r.model_copy(update=updates[r.video_id]) if r.video_id in updates else r for r in records]
