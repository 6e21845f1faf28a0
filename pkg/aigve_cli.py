# =====================================================
# Command-line interface: sample, score, eval, refine, weigh, curate, merge-review
# Exit codes: 0 ok, 2 input/config, 3 network, 4 parse, 5 partial failure
# =====================================================

# Loading modules
from __future__ import annotations

import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import click  # command line surface
import pandas as pd
from termcolor import colored  # colored warnings

from alignment_metrics import MetricError, Preference, aspect_correlations, pairwise_outcomes
from aspect_report import (CANONICAL_ORDER, Aspect, EvalRecord, ReportError, compute_span_map, load_records,
                           report_from_record, serialize_report, validate_record, write_records)
from comment_metrics import UnparseableVerdict, comment_length_stats, comment_overlap, judge_comment
from comment_pipeline import (ReviewQueueError, comment_pipeline, export_review_queue, load_review_queue,
                              merge_review_queue)
from frame_io import decode_video, load_frame_directory, read_raw_stream, read_selection, write_selection
from frame_sampling import SamplerError, select_frames
from model_gateway import (EvalRequest, GatewayError, InvalidRequest, MissingCredential, ModelGateway,
                           ParseFailedTwice, evaluator_system_prompt)
from refinement_loop import RefineAgents, RefineError, refine_batch
from report_export import write_json, write_plot_data, write_table
from run_config import ConfigError, RunSettings, finish_manifest, load_settings, start_manifest
from token_weighting import (TokenCategory, WeightingError, build_mask, classify_tokens, corpus_category_ratios,
                             export_masks, mask_record, simple_tokenize)

logger = logging.getLogger("aigve")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NETWORK = 3
EXIT_PARSE = 4
EXIT_PARTIAL = 5

VISUAL_PLACEHOLDER = "<video>"


class ColourFormatter(logging.Formatter):
    COLOURS = {logging.WARNING: "blue", logging.ERROR: "red", logging.CRITICAL: "red"}

    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        colour = self.COLOURS.get(record.levelno)
        return colored(message, colour) if colour else message


def setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ColourFormatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, handlers=[handler], force=True)


def exit_code_for(err: Exception) -> int:
    if isinstance(err, (ParseFailedTwice, UnparseableVerdict)):
        return EXIT_PARSE
    if isinstance(err, (MissingCredential, InvalidRequest)):
        return EXIT_INPUT
    if isinstance(err, GatewayError):
        return EXIT_NETWORK
    return EXIT_INPUT


@contextmanager
def guarded(ctx: click.Context):
    """Logs a failure and leaves with its documented exit code."""
    try:
        yield
    except (ConfigError, ReportError, SamplerError, WeightingError, MetricError, GatewayError,
            ReviewQueueError, RefineError, OSError) as err:
        logger.error("%s", err)
        ctx.exit(exit_code_for(err))


def _settings(ctx: click.Context, **overrides) -> RunSettings:
    base = ctx.obj["overrides"]
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    return load_settings(ctx.obj["config"], overrides=merged)


def _gateway(settings: RunSettings, role: str, capture_dir: Path | None = None) -> ModelGateway:
    return ModelGateway(settings.endpoint(role), capture_dir=capture_dir, bounds=settings.score_bounds(),
                        seed=settings.seed)


def _load_valid_records(path: Path, settings: RunSettings) -> list[EvalRecord]:
    """Loads a dataset file and refuses it when any row breaks the record rules."""
    records = load_records(path)
    problems = []
    for rec in records:
        for violation in validate_record(rec, settings.score_bounds(), path.parent):
            detail = ", ".join(part for part in (violation.aspect, violation.detail) if part)
            problems.append(f"{rec.video_id or '<empty id>'} {violation.kind.value}" + (f" ({detail})" if detail else ""))
    if problems:
        shown = "; ".join(problems[:20])
        more = f" and {len(problems) - 20} more" if len(problems) > 20 else ""
        raise ConfigError(f"{path}: {len(problems)} record violations: {shown}{more}")
    return records


def _load_stream(source: Path, width: int | None, height: int | None, work_dir: Path, decoder: str):
    if source.is_dir():
        return load_frame_directory(source)
    if width is not None or height is not None:
        return read_raw_stream(source, width or 0, height or 0)
    return decode_video(source, work_dir, decoder)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="JSON config file.")
@click.option("--parallel", type=click.IntRange(min=1), default=None, help="Worker pool size.")
@click.option("--seed", type=int, default=None, help="Seed recorded in the manifest.")
@click.option("--fixed-timestamp", default=None, help="Pin every written timestamp (reproducible reruns).")
@click.option("--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx, config_path, parallel, seed, fixed_timestamp, verbose):
    """Evaluate AI-generated videos, measure alignment with human ratings and refine generation instructions."""
    setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path
    ctx.obj["overrides"] = {"parallel": parallel, "seed": seed, "fixed_timestamp": fixed_timestamp}


# ---------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------
@cli.command()
@click.argument("source", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--width", type=int, default=None, help="Raw stream frame width.")
@click.option("--height", type=int, default=None, help="Raw stream frame height.")
@click.option("--theta", type=float, default=None, help="Frame-difference threshold.")
@click.option("--gamma", type=int, default=None, help="Minimum index gap between kept frames.")
@click.option("--n", "target_n", type=int, default=None, help="Maximum number of frames.")
@click.option("--delta", type=int, default=None, help="Pixel tolerance.")
@click.option("--downscale", type=int, default=None, help="Integer downscale before differencing.")
@click.pass_context
def sample(ctx, source, out_dir, width, height, theta, gamma, target_n, delta, downscale):
    """Select frames from a frame directory, a raw grayscale stream or a video file."""
    with guarded(ctx):
        sampler = {"theta": theta, "gamma": gamma, "target_n": target_n, "delta": delta, "downscale": downscale}
        settings = _settings(ctx, sampler=sampler)
        manifest = start_manifest("sample", settings, [source], out_dir)
        stream = _load_stream(source, width, height, out_dir / "decoded", settings.decoder)
        sampled = select_frames(stream, settings.sampler)
        write_selection(stream, sampled, out_dir, settings.sampler)
        logger.info("Selected %d of %d frames (%s)", len(sampled.indices), len(stream), sampled.mode.value)
        finish_manifest(manifest, settings, out_dir)


# ---------------------------------------------------------------------
# score
# ---------------------------------------------------------------------
@cli.command()
@click.option("--instruction", required=True, help="Instruction the video was generated from.")
@click.option("--video", type=click.Path(exists=True, path_type=Path), default=None,
              help="Frame directory or video file to sample.")
@click.option("--frames-from", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None,
              help="Reuse the output directory of a previous sample run.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--capture-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Write redacted request/response captures here.")
@click.pass_context
def score(ctx, instruction, video, frames_from, out_dir, capture_dir):
    """Score one video on the nine aspects."""
    with guarded(ctx):
        if (video is None) == (frames_from is None):
            raise ConfigError("give exactly one of --video and --frames-from")
        settings = _settings(ctx)
        manifest = start_manifest("score", settings, [video or frames_from], out_dir,
                                  {"instruction": instruction})
        evaluator = _gateway(settings, "evaluator", capture_dir)
        if frames_from is not None:
            _, frames = read_selection(frames_from)
        else:
            stream = _load_stream(video, None, None, out_dir / "decoded", settings.decoder)
            sampled = select_frames(stream, settings.sampler)
            write_selection(stream, sampled, out_dir / "frames", settings.sampler)
            _, frames = read_selection(out_dir / "frames")
        report = evaluator.evaluate(EvalRequest(instruction, tuple(frames), evaluator.endpoint.template_version))
        (out_dir / "report.json").write_text(serialize_report(report) + "\n", encoding="utf-8")
        (out_dir / "completion.txt").write_text(report.raw_text, encoding="utf-8")
        logger.info("Overall score %.2f", report.overall)
        finish_manifest(manifest, settings, out_dir)


# ---------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------
def _parse_aspects(value: str | None):
    if not value:
        return None
    try:
        return [Aspect.from_key(key.strip()) for key in value.split(",") if key.strip()]
    except ValueError as err:
        raise ConfigError(f"unknown aspect in --pair-aspects: {value}") from err


def _load_pairs(path: Path, preds: dict):
    pairs = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            pairs.append((preds[row["a"]], preds[row["b"]], Preference(row["label"])))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as err:
            raise ConfigError(f"{path}:{number}: pair needs known ids 'a', 'b' and a label A/B/Tie") from err
    return pairs


@cli.command(name="eval")
@click.option("--predictions", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--truth", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--pairs", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="JSONL of {a, b, label} preference pairs over prediction ids.")
@click.option("--pair-aspects", default=None, help="Comma-separated aspect subset for pairwise accuracy.")
@click.option("--judge", "use_judge", is_flag=True, help="Rate predicted comments with the judge endpoint.")
@click.pass_context
def evaluate(ctx, predictions, truth, out_dir, pairs, pair_aspects, use_judge):
    """Correlation, comment-overlap and preference metrics against ground truth."""
    with guarded(ctx):
        settings = _settings(ctx)
        manifest = start_manifest("eval", settings, [p for p in (predictions, truth, pairs) if p], out_dir)
        truths = _load_valid_records(truth, settings)
        preds = {rec.video_id: report_from_record(rec) for rec in _load_valid_records(predictions, settings)}

        correlations = aspect_correlations(preds, truths)
        write_table(out_dir / "correlations", correlations.to_dict(), correlations.to_frame())
        logger.info("Average Spearman x100: %s", correlations.average)

        overlap = comment_overlap(preds, truths)
        write_table(out_dir / "comments", overlap.to_dict(), overlap.to_frame())
        write_json(out_dir / "comment_lengths.json", comment_length_stats(truths).to_dict())

        if pairs is not None:
            outcomes = pairwise_outcomes(_load_pairs(pairs, preds), _parse_aspects(pair_aspects))
            if not outcomes:
                raise MetricError("no preference pairs")
            accuracy = math.fsum(o.credit for o in outcomes) / len(outcomes)
            frame = pd.DataFrame([{"pair_id": o.pair_id, "winner": o.winner.value, "label": o.label.value,
                                   "average_a": o.average_a, "average_b": o.average_b, "credit": o.credit}
                                  for o in outcomes])
            write_table(out_dir / "pairwise", {"accuracy": accuracy, "pair_count": len(outcomes)}, frame)

        if use_judge:
            judge = _gateway(settings, "judge")
            jobs = [(rec, aspect) for rec in truths for aspect in CANONICAL_ORDER]

            def rate(job):
                rec, aspect = job
                return judge_comment(preds[rec.video_id].comment(aspect), rec.comments[aspect.key],
                                     rec.instruction, judge)

            with ThreadPoolExecutor(max_workers=settings.parallel) as pool:
                ratings = list(pool.map(rate, jobs))
            frame = pd.DataFrame([{"video_id": rec.video_id, "aspect": aspect.key, "judge_score": value}
                                  for (rec, aspect), value in zip(jobs, ratings)])
            means = frame.groupby("aspect", sort=False)["judge_score"].mean()
            write_table(out_dir / "judge", {"mean_by_aspect": {k: round(float(v), 4) for k, v in means.items()},
                                            "mean": round(float(frame["judge_score"].mean()), 4)}, frame)
        finish_manifest(manifest, settings, out_dir)


# ---------------------------------------------------------------------
# refine
# ---------------------------------------------------------------------
@cli.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--resume", is_flag=True, help="Skip completed traces and continue interrupted ones.")
@click.option("--max-iterations", type=int, default=None)
@click.option("--stop-threshold", type=float, default=None)
@click.option("--selection-threshold", type=float, default=None)
@click.pass_context
def refine(ctx, dataset, out_dir, resume, max_iterations, stop_threshold, selection_threshold):
    """Iteratively refine the instructions of low-scoring records."""
    with guarded(ctx):
        settings = _settings(ctx, refine={"max_iterations": max_iterations, "stop_threshold": stop_threshold,
                                          "selection_threshold": selection_threshold})
        cfg = settings.refine_config()
        manifest = start_manifest("refine", settings, [dataset], out_dir, {"resume": resume})
        agents = RefineAgents(generator=_gateway(settings, "generator"), evaluator=_gateway(settings, "evaluator"),
                              revisor=_gateway(settings, "revisor"))
        records = _load_valid_records(dataset, settings)
        summary = refine_batch(records, cfg, agents, out_dir, resume=resume, clock=settings.clock())

        reports = out_dir / "reports"
        write_json(reports / "summary.json", summary.to_dict())
        if summary.stats is not None:
            write_table(reports / "improvement", summary.stats.to_dict(), summary.stats.to_frame())
            write_plot_data(reports / "curves.json", summary.stats.plot_data())
            overall = summary.stats.relative[Aspect.OVERALL]
            if overall is not None:
                logger.info("Overall relative improvement %.1f%%", overall)
        finish_manifest(manifest, settings, out_dir)
        if summary.failures:
            logger.error("%d of %d traces failed: %s", len(summary.failures), len(summary.selected),
                         ", ".join(sorted(summary.failures)))
            ctx.exit(EXIT_PARTIAL)


# ---------------------------------------------------------------------
# weigh
# ---------------------------------------------------------------------
def _load_offsets(path: Path) -> dict[str, list[tuple[int, int, int]]]:
    offsets = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            offsets[row["example_id"]] = [(i, int(s), int(e)) for i, (s, e) in enumerate(row["tokens"])]
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as err:
            raise WeightingError(f"{path}:{number}: expected {{example_id, tokens: [[start, end], ...]}}") from err
    return offsets


@cli.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--alpha", type=float, default=50.0, show_default=True, help="Weight of comment and score tokens.")
@click.option("--offsets", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Tokenizer byte offsets over the texts in sequences.jsonl; defaults to the bundled tokenizer.")
@click.pass_context
def weigh(ctx, dataset, out_dir, alpha, offsets):
    """Token weight masks and category ratios for the training targets of a dataset."""
    with guarded(ctx):
        settings = _settings(ctx)
        manifest = start_manifest("weigh", settings, [p for p in (dataset, offsets) if p], out_dir, {"alpha": alpha})
        external = _load_offsets(offsets) if offsets else None
        system = evaluator_system_prompt("v1", settings.score_bounds())
        system_end = len(system.encode("utf-8"))
        visual_end = system_end + 1 + len(VISUAL_PLACEHOLDER.encode("utf-8"))

        masks, sequences, classified_all = [], [], []
        for rec in _load_valid_records(dataset, settings):
            prompt = f"{system}\n{VISUAL_PLACEHOLDER}\nInstruction: {rec.instruction}\n"
            target = serialize_report(report_from_record(rec))
            text = prompt + target
            offset = len(prompt.encode("utf-8"))
            prefix = {TokenCategory.SYSTEM_PROMPT: [(0, system_end), (visual_end, offset)],
                      TokenCategory.VISUAL: [(system_end + 1, visual_end)]}
            if external is None:
                tokens = simple_tokenize(text)
            elif rec.video_id in external:
                tokens = external[rec.video_id]
            else:
                raise WeightingError(f"no tokenizer offsets for {rec.video_id}")
            classified = classify_tokens(tokens, compute_span_map(target, settings.score_bounds()), prefix, offset)
            masks.append(mask_record(rec.video_id, classified, build_mask(classified, alpha)))
            sequences.append({"example_id": rec.video_id, "text": text})
            classified_all.append(classified)

        out_dir.mkdir(parents=True, exist_ok=True)
        export_masks(out_dir / "masks.jsonl", masks)
        export_masks(out_dir / "sequences.jsonl", sequences)
        ratios = corpus_category_ratios(classified_all)
        frame = pd.DataFrame([{"category": c.value, "ratio": r} for c, r in ratios.items()])
        write_table(out_dir / "ratios", {c.value: r for c, r in ratios.items()}, frame)
        logger.info("Wrote %d masks", len(masks))
        finish_manifest(manifest, settings, out_dir)


# ---------------------------------------------------------------------
# curate / merge-review
# ---------------------------------------------------------------------
@cli.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.pass_context
def curate(ctx, dataset, out_dir):
    """Revise and validate dataset comments; rejected items go to queue.jsonl for human review."""
    with guarded(ctx):
        settings = _settings(ctx)
        manifest = start_manifest("curate", settings, [dataset], out_dir)
        result = comment_pipeline(_load_valid_records(dataset, settings), _gateway(settings, "revisor"),
                                  _gateway(settings, "validator"), settings.parallel)
        write_records(out_dir / "curated.jsonl", result.records)
        export_review_queue(out_dir / "queue.jsonl", result.queue)
        write_json(out_dir / "curation.json", {"accepted": result.accepted, "queued": len(result.queue)})
        if result.queue:
            logger.warning("%d comments queued for human review", len(result.queue))
        finish_manifest(manifest, settings, out_dir)


@cli.command(name="merge-review")
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--queue", "queue_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.pass_context
def merge_review(ctx, dataset, queue_path, out_dir):
    """Merge a human-edited review queue back into a curated dataset."""
    with guarded(ctx):
        settings = _settings(ctx)
        manifest = start_manifest("merge-review", settings, [dataset, queue_path], out_dir)
        merged = merge_review_queue(load_records(dataset), load_review_queue(queue_path))
        write_records(out_dir / "merged.jsonl", merged)
        finish_manifest(manifest, settings, out_dir)


if __name__ == "__main__":
    cli()
