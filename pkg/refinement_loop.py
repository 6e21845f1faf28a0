# =====================================================
# Multi-agent iterative refinement: generate -> sample -> evaluate -> revise
# =====================================================

# Loading modules
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Literal, Sequence

import pandas as pd  # summary tables
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from aspect_report import (CANONICAL_ORDER, DEFAULT_BOUNDS, Aspect, AspectReport, EvalRecord, ScoreBounds,
                           report_from_mapping)
from frame_io import DEFAULT_DECODER_TEMPLATE, FrameSourceError, encode_png, load_video_reference, write_selection
from frame_sampling import SamplerConfig, SamplerError, select_frames
from model_gateway import EvalRequest, GatewayError, ModelGateway

logger = logging.getLogger(__name__)

Clock = Callable[[], str]


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------
class RefineError(RuntimeError):
    pass


class AgentFailure(RefineError):
    def __init__(self, role: str, iteration: int, trace: RefineTrace | None = None, cause: Exception | None = None):
        self.role = role
        self.iteration = iteration
        self.trace = trace
        self.cause = cause
        super().__init__(f"{role} failed at iteration {iteration}: {cause}")


class LineageError(RefineError):
    pass


class RecordIdCollision(RefineError):
    def __init__(self, first: str, second: str):
        self.ids = (first, second)
        super().__init__(f"record ids {first!r} and {second!r} map to the same trace file")


class TraceFileError(RefineError):
    pass


# ---------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------
class RefineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iterations: int = Field(4, ge=1)
    stop_threshold: float = 4.0
    selection_threshold: float = 3.0
    inclusive_stop: bool = False  # True: stop at overall >= threshold
    sampler: SamplerConfig = SamplerConfig()
    parallel: int = Field(1, ge=1)
    decoder_template: str = DEFAULT_DECODER_TEMPLATE
    bounds: ScoreBounds = DEFAULT_BOUNDS

    @model_validator(mode="after")
    def _threshold_in_bounds(self):
        if not self.bounds.contains(self.stop_threshold):
            raise ValueError(f"stop_threshold {self.stop_threshold} outside the score bounds "
                             f"[{self.bounds.low:g}, {self.bounds.high:g}]")
        return self

    def threshold_met(self, overall: float) -> bool:
        return overall >= self.stop_threshold if self.inclusive_stop else overall > self.stop_threshold


@dataclass(frozen=True)
class RefineAgents:
    generator: ModelGateway
    evaluator: ModelGateway
    revisor: ModelGateway


# ---------------------------------------------------------------------
# Trace records (one JSON line each)
# ---------------------------------------------------------------------
class StopReason(Enum):
    THRESHOLD_MET = "ThresholdMet"
    ITERATION_LIMIT = "IterationLimit"
    ERROR = "Error"


class IterationRecord(BaseModel):
    kind: Literal["iteration"] = "iteration"
    iteration: int
    instruction: str
    instruction_sha256: str
    parent_digest: str | None = None  # digest of the previous iteration line
    video: str
    video_metadata: dict = Field(default_factory=dict)
    frame_indices: list[int]
    sampling_mode: str
    scores: dict[str, float]
    comments: dict[str, str]
    revised_instruction: str | None = None
    revision_noop: bool = False
    started_at: str
    finished_at: str

    @property
    def digest(self) -> str:
        return sha256_text(self.model_dump_json())

    @property
    def overall(self) -> float:
        return self.scores[Aspect.OVERALL.key]

    def report(self) -> AspectReport:
        return report_from_mapping(self.scores, self.comments)


class StopRecord(BaseModel):
    kind: Literal["stop"] = "stop"
    stop_reason: StopReason
    failed_role: str | None = None
    error: str | None = None
    finished_at: str


@dataclass
class RefineTrace:
    record_id: str
    iterations: list[IterationRecord] = field(default_factory=list)
    stop: StopRecord | None = None

    @property
    def stop_reason(self) -> StopReason | None:
        return self.stop.stop_reason if self.stop else None

    @property
    def completed(self) -> bool:
        return self.stop is not None and self.stop.stop_reason is not StopReason.ERROR

    @property
    def initial_report(self) -> AspectReport:
        return self.iterations[0].report()

    @property
    def final_report(self) -> AspectReport:
        return self.iterations[-1].report()

    def __len__(self) -> int:
        return len(self.iterations)


def verify_lineage(trace: RefineTrace) -> None:
    """Each instruction must be the revisor output recorded one iteration earlier."""
    previous = None
    for record in trace.iterations:
        if record.instruction_sha256 != sha256_text(record.instruction):
            raise LineageError(f"{trace.record_id}: instruction hash mismatch at iteration {record.iteration}")
        if previous is None:
            if record.parent_digest is not None:
                raise LineageError(f"{trace.record_id}: first iteration has a parent")
        else:
            if record.parent_digest != previous.digest:
                raise LineageError(f"{trace.record_id}: broken chain at iteration {record.iteration}")
            if record.instruction != previous.revised_instruction:
                raise LineageError(f"{trace.record_id}: iteration {record.iteration} does not use the revision")
        previous = record


class TraceWriter:
    """Single writer of traces/<record_id>.jsonl; every line is flushed as soon as it is complete."""

    def __init__(self, path: Path):
        self.path = path

    def rewrite(self, records: Sequence[IterationRecord]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(r.model_dump_json() + "\n" for r in records), encoding="utf-8")

    def append(self, record: IterationRecord | StopRecord) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(record.model_dump_json() + "\n")
            handle.flush()


def safe_record_id(record_id: str) -> str:
    return re.sub(r"[^\w.-]", "_", record_id)


def trace_path(run_dir: Path, record_id: str) -> Path:
    return Path(run_dir) / "traces" / f"{safe_record_id(record_id)}.jsonl"


def read_trace(path: Path, record_id: str | None = None) -> RefineTrace:
    trace = RefineTrace(record_id or path.stem)
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            if json.loads(line).get("kind") == "stop":
                trace.stop = StopRecord.model_validate_json(line)
            else:
                trace.iterations.append(IterationRecord.model_validate_json(line))
        except (ValueError, ValidationError) as err:
            raise TraceFileError(f"{path}:{number}: unreadable trace line") from err
    return trace


# ---------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------
def _portable(reference: str, run_dir: Path) -> str:
    path = Path(reference)
    try:
        return path.resolve().relative_to(run_dir.resolve()).as_posix()
    except (ValueError, OSError):
        return reference


def _run_iteration(k: int, instruction: str, parent: IterationRecord | None, cfg: RefineConfig,
                   agents: RefineAgents, run_dir: Path, record_id: str, clock: Clock) -> IterationRecord:
    started = clock()
    instruction_sha = sha256_text(instruction)
    # one directory per record and iteration; earlier iterations stay untouched
    artifact_dir = run_dir / "artifacts" / safe_record_id(record_id) / f"{k}-{instruction_sha[:16]}"
    if artifact_dir.exists():
        shutil.rmtree(artifact_dir)

    stage = "generator"
    try:
        artifact = agents.generator.generate_video(instruction, artifact_dir / "video")
        stage = "sampler"
        reference = artifact.reference
        if not Path(reference).is_absolute() and not Path(reference).exists():
            reference = str(run_dir / reference)
        stream = load_video_reference(reference, artifact_dir / "decoded", cfg.decoder_template)
        sampled = select_frames(stream, cfg.sampler)
        write_selection(stream, sampled, artifact_dir / "frames", cfg.sampler)
        frames = tuple(encode_png(stream[i]) for i in sampled.indices)
        stage = "evaluator"
        report = agents.evaluator.evaluate(EvalRequest(instruction, frames, agents.evaluator.endpoint.template_version))
        revision = None
        if not cfg.threshold_met(report.overall) and k < cfg.max_iterations:
            stage = "revisor"
            revision = agents.revisor.revise_instruction(instruction, report)
    except (GatewayError, SamplerError, FrameSourceError) as err:
        raise AgentFailure(stage, k, cause=err) from err

    return IterationRecord(
        iteration=k,
        instruction=instruction,
        instruction_sha256=instruction_sha,
        parent_digest=parent.digest if parent else None,
        video=_portable(artifact.reference, run_dir),
        video_metadata=dict(artifact.metadata),
        frame_indices=list(sampled.indices),
        sampling_mode=sampled.mode.value,
        scores=report.scores(),
        comments=report.comments(),
        revised_instruction=revision.text if revision else None,
        revision_noop=revision.is_noop if revision else False,
        started_at=started,
        finished_at=clock(),
    )


def _stop_for(record: IterationRecord, cfg: RefineConfig) -> StopReason | None:
    if cfg.threshold_met(record.overall):
        return StopReason.THRESHOLD_MET
    if record.iteration >= cfg.max_iterations or record.revised_instruction is None:
        return StopReason.ITERATION_LIMIT
    return None


def refine_one(initial_instruction: str, cfg: RefineConfig, agents: RefineAgents, run_dir: Path | str,
               record_id: str = "trace", resume: bool = False, clock: Clock = utc_timestamp) -> RefineTrace:
    """
    Refines one instruction until the overall score passes the stop threshold
    or the iteration limit is reached.

    Inputs:
    initial_instruction: instruction of iteration 1
    cfg: loop limits and the sampler configuration fixed for every iteration
    agents: generator, evaluator and instruction-revisor gateways
    run_dir: run directory holding traces/ and artifacts/
    record_id: trace file name
    resume: continue an existing trace file instead of starting over
    clock: timestamp source
    """
    run_dir = Path(run_dir)
    path = trace_path(run_dir, record_id)
    writer = TraceWriter(path)
    trace = RefineTrace(record_id)

    if resume and path.is_file():
        trace = read_trace(path, record_id)
        if trace.completed:
            logger.info("Trace %s already complete (%s); skipping", record_id, trace.stop_reason.value)
            return trace
        trace.stop = None
        writer.rewrite(trace.iterations)
        logger.info("Resuming trace %s after %d completed iterations", record_id, len(trace))
    else:
        writer.rewrite([])

    if trace.iterations:
        reason = _stop_for(trace.iterations[-1], cfg)
        if reason is not None:
            trace.stop = StopRecord(stop_reason=reason, finished_at=clock())
            writer.append(trace.stop)
            return trace
        instruction = trace.iterations[-1].revised_instruction
    else:
        instruction = initial_instruction

    for k in range(len(trace) + 1, cfg.max_iterations + 1):
        logger.info("Trace %s: iteration %d", record_id, k)
        parent = trace.iterations[-1] if trace.iterations else None
        try:
            record = _run_iteration(k, instruction, parent, cfg, agents, run_dir, record_id, clock)
        except AgentFailure as failure:
            trace.stop = StopRecord(stop_reason=StopReason.ERROR, failed_role=failure.role,
                                    error=str(failure.cause), finished_at=clock())
            writer.append(trace.stop)
            failure.trace = trace
            raise
        trace.iterations.append(record)
        writer.append(record)
        logger.debug("Trace %s: iteration %d overall %.2f", record_id, k, record.overall)

        reason = _stop_for(record, cfg)
        if reason is not None:
            trace.stop = StopRecord(stop_reason=reason, finished_at=clock())
            writer.append(trace.stop)
            break
        instruction = record.revised_instruction

    logger.info("Trace %s done: %s after %d iterations", record_id, trace.stop_reason.value, len(trace))
    return trace


# ---------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class ImprovementStats:
    relative: dict[Aspect, float | None]  # percent, mean of (final - initial) / initial
    absolute: dict[Aspect, float | None]  # mean of final - initial
    zero_initial: dict[Aspect, tuple[str, ...]]
    curves: dict[Aspect, list[float]]  # mean score per iteration, stopped traces carried forward
    trace_count: int

    def to_dict(self) -> dict:
        def rounded(value):
            return None if value is None else round(value, 4)
        return {
            "trace_count": self.trace_count,
            "relative_percent": {a.key: rounded(self.relative[a]) for a in CANONICAL_ORDER},
            "absolute": {a.key: rounded(self.absolute[a]) for a in CANONICAL_ORDER},
            "zero_initial": {a.key: list(self.zero_initial[a]) for a in CANONICAL_ORDER if self.zero_initial[a]},
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"aspect": a.key, "relative_percent": self.relative[a], "absolute": self.absolute[a],
             "zero_initial": len(self.zero_initial[a])}
            for a in CANONICAL_ORDER
        ])

    def plot_data(self) -> dict:
        length = len(self.curves[Aspect.OVERALL])
        return {
            "quantity": "mean score per aspect per iteration",
            "iterations": list(range(1, length + 1)),
            "series": {a.key: [round(v, 4) for v in self.curves[a]] for a in CANONICAL_ORDER},
        }


def improvement_stats(traces: Sequence[RefineTrace]) -> ImprovementStats:
    """Per-aspect change from the first to the last iteration of every trace."""
    traces = [t for t in traces if t.iterations]
    relative, absolute, zero_initial, curves = {}, {}, {}, {}
    longest = max((len(t) for t in traces), default=0)
    for aspect in CANONICAL_ORDER:
        rel, deltas, zeros = [], [], []
        for trace in traces:
            initial = trace.iterations[0].scores[aspect.key]
            final = trace.iterations[-1].scores[aspect.key]
            deltas.append(final - initial)
            if initial > 0:
                rel.append((final - initial) / initial)
            else:
                zeros.append(trace.record_id)
        relative[aspect] = 100.0 * math.fsum(rel) / len(rel) if rel else None
        absolute[aspect] = math.fsum(deltas) / len(deltas) if deltas else None
        zero_initial[aspect] = tuple(sorted(zeros))
        curves[aspect] = [
            math.fsum(t.iterations[min(k, len(t) - 1)].scores[aspect.key] for t in traces) / len(traces)
            for k in range(longest)
        ]
    return ImprovementStats(relative, absolute, zero_initial, curves, len(traces))


# ---------------------------------------------------------------------
# Batch
# ---------------------------------------------------------------------
@dataclass
class BatchSummary:
    selected: list[str]
    traces: dict[str, RefineTrace]
    failures: dict[str, str]
    stats: ImprovementStats | None

    def to_dict(self) -> dict:
        return {
            "selected": self.selected,
            "stop_reasons": {rid: t.stop_reason.value if t.stop_reason else None for rid, t in self.traces.items()},
            "iterations": {rid: len(t) for rid, t in self.traces.items()},
            "failures": self.failures,
            "improvement": self.stats.to_dict() if self.stats else None,
        }


def refine_batch(records: Sequence[EvalRecord], cfg: RefineConfig, agents: RefineAgents, run_dir: Path | str,
                 resume: bool = False, clock: Clock = utc_timestamp) -> BatchSummary:
    """Refines every record whose initial overall score is below the selection threshold."""
    unscored = [r.video_id for r in records if Aspect.OVERALL.key not in r.scores]
    if unscored:
        raise RefineError(f"records without an overall score: {', '.join(unscored)}")
    selected = [r for r in records if r.overall < cfg.selection_threshold]
    owners: dict[str, str] = {}
    for record in selected:
        safe = safe_record_id(record.video_id)
        if safe in owners:
            raise RecordIdCollision(owners[safe], record.video_id)
        owners[safe] = record.video_id
    if not selected:
        logger.warning("No record has an overall score below %g; nothing to refine", cfg.selection_threshold)
        return BatchSummary([], {}, {}, None)
    logger.info("Refining %d of %d records", len(selected), len(records))

    def work(record: EvalRecord) -> tuple[str, RefineTrace | None, str | None]:
        try:
            return record.video_id, refine_one(record.instruction, cfg, agents, run_dir, record.video_id, resume, clock), None
        except AgentFailure as failure:
            logger.error("Record %s: %s", record.video_id, failure)
            return record.video_id, failure.trace, str(failure)

    with ThreadPoolExecutor(max_workers=cfg.parallel) as pool:
        results = list(pool.map(work, selected))

    traces = {rid: trace for rid, trace, _ in results if trace is not None}
    failures = {rid: message for rid, _, message in results if message is not None}
    finished = [t for t in traces.values() if t.completed]
    stats = improvement_stats(finished) if finished else None
    return BatchSummary([r.video_id for r in selected], traces, failures, stats)
