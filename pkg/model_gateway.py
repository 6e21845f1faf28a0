# =====================================================
# Chat-completion gateway for every model role
# (evaluator, video generator, instruction revisor, comment revisor/validator, judge)
# =====================================================

# Loading modules
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from string import Template
from typing import Any, Mapping, Sequence

import openai
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from aspect_report import (CANONICAL_ORDER, AspectReport, ReportError, ScoreBounds, DEFAULT_BOUNDS,
                           parse_report)
from comment_metrics import UnparseableVerdict, parse_verdict

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent / "prompt_templates"
MOCK_SCHEME = "mock://"

# decoding defaults per role: deterministic when judging, sampled when rewriting
ROLE_TEMPERATURE = {
    "evaluator": 0.0,
    "validator": 0.0,
    "judge": 0.0,
    "generator": 0.0,
    "instruction_revisor": 0.7,
    "comment_revisor": 0.7,
}


# ---------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------
class GatewayError(RuntimeError):
    pass


class MissingCredential(GatewayError):
    def __init__(self, variable: str):
        self.variable = variable
        super().__init__(f"environment variable {variable} is not set")


class InvalidRequest(GatewayError):
    pass


class EndpointError(GatewayError):
    def __init__(self, status: int | None, detail: str = ""):
        self.status = status
        super().__init__(f"endpoint error (status {status}): {detail}" if detail else f"endpoint error (status {status})")


class EndpointTimeout(EndpointError):
    def __init__(self, seconds: float):
        self.seconds = seconds
        super().__init__(None, f"no response within {seconds:g} s")


class GenerationTimeout(EndpointTimeout):
    pass


class JudgeUnavailable(EndpointError):
    pass


class ParseFailedTwice(GatewayError):
    def __init__(self, raw: str, cause: Exception):
        self.raw = raw
        self.cause = cause
        super().__init__(f"evaluator output unreadable after a re-prompt: {cause}")


class EmptyRevision(GatewayError):
    pass


# ---------------------------------------------------------------------
# Configuration and request types
# ---------------------------------------------------------------------
class EndpointConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    base_url: str
    model: str
    api_key_env: str | None = None  # name of the variable holding the token, never the token
    timeout: float = Field(60.0, gt=0)
    max_retries: int = Field(2, ge=0)
    max_parallel: int = Field(4, ge=1)
    temperature: float | None = None  # None: role default
    top_p: float = Field(1.0, gt=0, le=1)
    backoff_seconds: float = Field(1.0, ge=0)
    max_frames: int = Field(16, ge=1)
    template_version: str = "v1"

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith(MOCK_SCHEME)


@dataclass(frozen=True)
class EvalRequest:
    instruction: str
    frames: tuple[bytes, ...]  # PNG-encoded
    template_version: str = "v1"


@dataclass(frozen=True)
class VideoArtifact:
    reference: str
    metadata: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Revision:
    text: str
    is_noop: bool


@dataclass(frozen=True)
class CommentVerdict:
    passed: bool
    issues: tuple[str, ...] = ()


class _VerdictPayload(BaseModel):
    passed: bool = Field(alias="pass")
    issues: list[str] = Field(default_factory=list)


# ---------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: str
    text: str

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def render(self, **values: Any) -> str:
        return Template(self.text).substitute(**values)


def load_template(name: str, version: str = "v1") -> PromptTemplate:
    path = TEMPLATE_DIR / f"{name}_{version}.txt"
    if not path.is_file():
        raise InvalidRequest(f"unknown prompt template {name}/{version}")
    return PromptTemplate(name, version, path.read_text(encoding="utf-8"))


def template_checksums() -> dict[str, str]:
    """SHA-256 of every bundled template, recorded in run manifests."""
    return {p.stem: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(TEMPLATE_DIR.glob("*.txt"))}


def evaluator_system_prompt(version: str, bounds: ScoreBounds) -> str:
    aspect_list = "\n".join(f"- {a.key} ({a.abbreviation}): {a.description}" for a in CANONICAL_ORDER)
    skeleton = json.dumps({a.key: {"comment": "...", "score": 0.0} for a in CANONICAL_ORDER}, indent=2)
    return load_template("evaluator", version).render(aspect_list=aspect_list, skeleton=skeleton,
                                                      low=f"{bounds.low:g}", high=f"{bounds.high:g}")


def image_part(png: bytes) -> dict:
    encoded = base64.b64encode(png).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}}


def _is_transient(exc: BaseException) -> bool:
    if isinstance(exc, (openai.APIConnectionError, openai.RateLimitError)):  # timeouts included
        return True
    return isinstance(exc, openai.APIStatusError) and exc.status_code >= 500


def _extract_object(text: str) -> dict:
    match = re.search(r"\{.*\}", text, re.DOTALL)
    if not match:
        raise UnparseableVerdict(text)
    try:
        return json.loads(match.group(0))
    except json.JSONDecodeError as err:
        raise UnparseableVerdict(text) from err


# ---------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------
class ModelGateway:
    """
    One endpoint, one shared client. Calls are bounded by a semaphore of
    max_parallel permits, retried on transient failures with the same
    idempotency key, and optionally captured (redacted) for offline replay.
    """

    def __init__(self, endpoint: EndpointConfig, client: Any = None, capture_dir: Path | None = None,
                 bounds: ScoreBounds = DEFAULT_BOUNDS, seed: int = 0):
        self.endpoint = endpoint
        self.seed = seed  # offline backend only
        self.bounds = bounds
        self.capture_dir = Path(capture_dir) if capture_dir else None
        self._secret = self._credential()
        self._client = client if client is not None else self._make_client()
        self._permits = threading.BoundedSemaphore(endpoint.max_parallel)

    def _credential(self) -> str | None:
        if self.endpoint.is_mock or not self.endpoint.api_key_env:
            return None
        value = os.environ.get(self.endpoint.api_key_env, "")
        if not value:
            raise MissingCredential(self.endpoint.api_key_env)
        return value

    def _make_client(self):
        if self.endpoint.is_mock:
            from mock_endpoints import OfflineChatClient
            return OfflineChatClient(self.endpoint, seed=self.seed)
        return openai.OpenAI(api_key=self._secret or "unused", base_url=self.endpoint.base_url,
                             timeout=self.endpoint.timeout, max_retries=0)

    # -- transport -----------------------------------------------------
    def request_body(self, role: str, messages: Sequence[dict], extra: Mapping[str, Any] | None = None) -> dict:
        temperature = self.endpoint.temperature
        if temperature is None:
            temperature = ROLE_TEMPERATURE[role]
        body = {"model": self.endpoint.model, "messages": list(messages),
                "temperature": temperature, "top_p": self.endpoint.top_p}
        if extra:
            body["extra_body"] = dict(extra)
        return body

    @staticmethod
    def idempotency_key(body: Mapping[str, Any]) -> str:
        canonical = json.dumps(body, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def complete(self, role: str, messages: Sequence[dict], extra: Mapping[str, Any] | None = None) -> str:
        body = self.request_body(role, messages, extra)
        key = self.idempotency_key(body)
        retrying = Retrying(
            stop=stop_after_attempt(self.endpoint.max_retries + 1),
            wait=wait_exponential(multiplier=self.endpoint.backoff_seconds, max=30),
            retry=retry_if_exception(_is_transient),
            reraise=True,
        )
        with self._permits:
            try:
                for attempt in retrying:
                    with attempt:
                        if attempt.retry_state.attempt_number > 1:
                            logger.info("Retrying %s request (attempt %d)", role, attempt.retry_state.attempt_number)
                        response = self._client.chat.completions.create(
                            **body, timeout=self.endpoint.timeout, extra_headers={"Idempotency-Key": key})
            except openai.APITimeoutError as err:
                raise EndpointTimeout(self.endpoint.timeout) from err
            except openai.APIStatusError as err:
                raise EndpointError(err.status_code, err.message) from err
            except openai.APIConnectionError as err:
                raise EndpointError(None, str(err)) from err
        content = response.choices[0].message.content or ""
        self._capture(key, role, body, content)
        return content

    def _redact(self, text: str) -> str:
        return text.replace(self._secret, "[REDACTED]") if self._secret else text

    def _capture(self, key: str, role: str, body: Mapping[str, Any], content: str) -> None:
        if self.capture_dir is None:
            return
        self.capture_dir.mkdir(parents=True, exist_ok=True)
        record = {"idempotency_key": key, "role": role, "request": body, "response": content}
        text = self._redact(json.dumps(record, ensure_ascii=False, sort_keys=True, indent=2))
        (self.capture_dir / f"{role}_{key[:16]}.json").write_text(text + "\n", encoding="utf-8")

    # -- roles ---------------------------------------------------------
    def evaluate(self, req: EvalRequest) -> AspectReport:
        """Scores sampled frames against the instruction; one format re-prompt before giving up."""
        if not 1 <= len(req.frames) <= self.endpoint.max_frames:
            raise InvalidRequest(f"{len(req.frames)} frames; expected 1..{self.endpoint.max_frames}")
        messages = [
            {"role": "system", "content": evaluator_system_prompt(req.template_version, self.bounds)},
            {"role": "user", "content": [{"type": "text", "text": f"Instruction: {req.instruction}"},
                                         *(image_part(png) for png in req.frames)]},
        ]
        raw = self.complete("evaluator", messages)
        try:
            return parse_report(raw, self.bounds)[0]
        except ReportError as first:
            logger.warning("Evaluator output rejected (%s); re-prompting once", first)
            reminder = load_template("format_reminder", req.template_version).render(
                problem=str(first), low=f"{self.bounds.low:g}", high=f"{self.bounds.high:g}")
            messages += [{"role": "assistant", "content": raw}, {"role": "user", "content": reminder}]
            raw = self.complete("evaluator", messages)
            try:
                return parse_report(raw, self.bounds)[0]
            except ReportError as second:
                raise ParseFailedTwice(raw, second) from second

    def generate_video(self, instruction: str, output_dir: Path | str) -> VideoArtifact:
        messages = [
            {"role": "system", "content": load_template("video_generator", self.endpoint.template_version).text},
            {"role": "user", "content": instruction},
        ]
        try:
            raw = self.complete("generator", messages, extra={"output_dir": str(output_dir)})
        except EndpointTimeout as err:
            raise GenerationTimeout(self.endpoint.timeout) from err
        try:
            payload = json.loads(raw)
            reference = str(payload.pop("video"))
        except (json.JSONDecodeError, KeyError, AttributeError, TypeError) as err:
            raise EndpointError(None, f"generator reply has no video reference: {raw[:120]!r}") from err
        return VideoArtifact(reference, payload)

    def revise_instruction(self, instruction: str, report: AspectReport) -> Revision:
        feedback = "\n".join(
            f"- {a.key} (score {report.score(a):g}): {report.comment(a)}" for a in CANONICAL_ORDER)
        messages = [
            {"role": "system", "content": load_template("instruction_revisor", self.endpoint.template_version).text},
            {"role": "user", "content": f"Instruction:\n{instruction}\n\nEvaluation:\n{feedback}"},
        ]
        revised = self.complete("instruction_revisor", messages).strip()
        if not revised:
            raise EmptyRevision("instruction revisor returned an empty instruction")
        noop = revised == instruction.strip()
        if noop:
            logger.warning("Instruction revisor returned the instruction unchanged")
        return Revision(revised, noop)

    def revise_comment(self, original: str, instruction: str, scores: Mapping[str, float], aspect: str = "") -> str:
        if not original.strip() or not instruction.strip():
            raise InvalidRequest("comment revision needs a non-empty comment and instruction")
        score_lines = "\n".join(f"- {k}: {v:g}" for k, v in scores.items())
        messages = [
            {"role": "system", "content": load_template("comment_revisor", self.endpoint.template_version).text},
            {"role": "user", "content": f"Aspect: {aspect}\nInstruction: {instruction}\nScores:\n{score_lines}\n\n"
                                        f"Original comment:\n{original}"},
        ]
        revised = self.complete("comment_revisor", messages).strip()
        if not revised:
            raise EmptyRevision("comment revisor returned an empty comment")
        return revised

    def validate_comment(self, original: str, revised: str, instruction: str) -> CommentVerdict:
        if not original.strip() or not revised.strip():
            raise InvalidRequest("comment validation needs both comments")
        if revised.strip() == original.strip():
            return CommentVerdict(True)
        messages = [
            {"role": "system", "content": load_template("comment_validator", self.endpoint.template_version).text},
            {"role": "user", "content": f"Instruction: {instruction}\n\nOriginal comment:\n{original}\n\n"
                                        f"Revised comment:\n{revised}"},
        ]
        raw = self.complete("validator", messages)
        try:
            payload = _VerdictPayload.model_validate(_extract_object(raw))
        except ValidationError as err:
            raise UnparseableVerdict(raw) from err
        return CommentVerdict(payload.passed, tuple(payload.issues))

    def judge_comment(self, candidate: str, reference: str, context: str) -> float:
        """1-5 rating; one re-ask on an unreadable verdict, then UnparseableVerdict."""
        messages = [
            {"role": "system", "content": load_template("comment_judge", self.endpoint.template_version).text},
            {"role": "user", "content": f"Video instruction: {context}\n\nReference comment:\n{reference}\n\n"
                                        f"Comment to grade:\n{candidate}"},
        ]
        try:
            raw = self.complete("judge", messages)
            try:
                return parse_verdict(raw)
            except UnparseableVerdict:
                logger.warning("Judge verdict unreadable; asking once more")
                messages += [{"role": "assistant", "content": raw},
                             {"role": "user", "content": 'Reply with the final line "Score: <n>" only.'}]
                return parse_verdict(self.complete("judge", messages))
        except EndpointError as err:
            raise JudgeUnavailable(err.status, str(err)) from err
