# =====================================================
# Offline chat-completion backends: scripted fakes for tests and the
# deterministic mock:// backend for network-free runs
# =====================================================

# Loading modules
from __future__ import annotations

import hashlib
import json
import re
import threading
from collections import deque
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Callable, Iterable

import cv2
import httpx
import numpy as np
import openai
from openai.types.chat import ChatCompletion, ChatCompletionMessage
from openai.types.chat.chat_completion import Choice

from aspect_report import CANONICAL_ORDER, DEFAULT_BOUNDS, Aspect, report_from_mapping, serialize_report
from comment_metrics import rouge1, tokenize

_HEADER_RE = re.compile(r"^# template: (\w+)/(\w+)")

Reply = str | Exception | Callable[[dict], str]


def completion(content: str, model: str = "mock") -> ChatCompletion:
    message = ChatCompletionMessage(role="assistant", content=content)
    return ChatCompletion(id="mock-completion", object="chat.completion", created=0, model=model,
                          choices=[Choice(index=0, finish_reason="stop", message=message)])


def http_error(status: int, message: str = "mock failure") -> openai.APIStatusError:
    """The openai exception a real endpoint answering with this status would raise."""
    response = httpx.Response(status, request=httpx.Request("POST", "http://mock.invalid/chat/completions"))
    if status == 429:
        return openai.RateLimitError(message, response=response, body=None)
    if status >= 500:
        return openai.InternalServerError(message, response=response, body=None)
    if status in (401, 403):
        return openai.AuthenticationError(message, response=response, body=None)
    return openai.APIStatusError(message, response=response, body=None)


def timeout_error() -> openai.APITimeoutError:
    return openai.APITimeoutError(request=httpx.Request("POST", "http://mock.invalid/chat/completions"))


class _ChatShim:
    """Gives a create(**body) function the client.chat.completions.create shape."""

    def __init__(self, create: Callable[..., ChatCompletion]):
        self.chat = SimpleNamespace(completions=SimpleNamespace(create=create))


class ScriptedChatClient(_ChatShim):
    """
    Replays queued replies in order. A reply is a completion text, an exception
    to raise, or a callable receiving the request body. Every request is kept
    (body and headers) for inspection.
    """

    def __init__(self, replies: Iterable[Reply] = ()):
        super().__init__(self._create)
        self._replies = deque(replies)
        self._lock = threading.Lock()
        self.requests: list[dict] = []
        self.headers: list[dict] = []

    def push(self, *replies: Reply) -> None:
        with self._lock:
            self._replies.extend(replies)

    @property
    def call_count(self) -> int:
        return len(self.requests)

    def _create(self, timeout: float | None = None, extra_headers: dict | None = None, **body: Any) -> ChatCompletion:
        with self._lock:
            self.requests.append(body)
            self.headers.append(dict(extra_headers or {}))
            if not self._replies:
                raise AssertionError("scripted client ran out of replies")
            reply = self._replies.popleft()
        if isinstance(reply, Exception):
            raise reply
        if callable(reply):
            reply = reply(body)
        return completion(reply, body.get("model", "mock"))


# ---------------------------------------------------------------------
# Deterministic offline backend
# ---------------------------------------------------------------------
STOCK_SENTENCE = "Taken together, these strengths and weaknesses are consistent with the assigned score."
_REVISION_CLAUSES = (
    "with smooth continuous motion, a steady camera and consistent lighting",
    "keeping every named object clearly visible, detailed and physically plausible",
    "showing each described action fully and naturally from start to finish",
    "in sharp focus with natural colours and no visual artifacts",
)
_FRAME_SHAPE = (48, 64)
_FRAME_COUNT = 48


def _digest(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()[:8], "big")


def _section(text: str, label: str, next_label: str | None = None) -> str:
    start = text.find(label)
    if start < 0:
        return ""
    start += len(label)
    end = text.find(next_label, start) if next_label else -1
    return (text[start:end] if end >= 0 else text[start:]).strip()


def _user_text(messages: list[dict]) -> str:
    content = next((m["content"] for m in messages if m["role"] == "user"), "")
    if isinstance(content, list):
        return "\n".join(part["text"] for part in content if part.get("type") == "text")
    return content


class OfflineChatClient(_ChatShim):
    """
    Answers every bundled prompt template without a model. Replies depend
    only on the request text and the seed, so reruns are byte-identical.
    Longer and more explicit instructions score higher, which makes the
    refinement loop converge in a few iterations.
    """

    def __init__(self, endpoint=None, seed: int = 0):
        super().__init__(self._create)
        self.seed = seed
        self.model = endpoint.model if endpoint is not None else "mock"

    def _create(self, messages: list[dict], timeout: float | None = None, extra_headers: dict | None = None,
                extra_body: dict | None = None, **_: Any) -> ChatCompletion:
        system = messages[0]["content"] if messages and messages[0]["role"] == "system" else ""
        match = _HEADER_RE.match(system)
        if not match:
            raise http_error(400, "offline backend only serves bundled templates")
        role = match.group(1)
        handler = getattr(self, f"_{role}", None)
        if handler is None:
            raise http_error(400, f"offline backend has no {role} responder")
        return completion(handler(_user_text(messages), extra_body or {}), self.model)

    def _evaluator(self, user: str, _extra: dict) -> str:
        instruction = _section(user, "Instruction:")
        words = len(tokenize(instruction))
        base = min(DEFAULT_BOUNDS.high, 1.0 + words / 8.0)
        scores, comments = {}, {}
        for aspect in CANONICAL_ORDER:
            offset = 0.0
            if aspect is not Aspect.OVERALL:
                offset = (_digest(str(self.seed), aspect.key, instruction) % 101 - 50) / 100.0
            scores[aspect.key] = round(min(DEFAULT_BOUNDS.high, max(DEFAULT_BOUNDS.low, base + offset)), 2)
            comments[aspect.key] = (f"Regarding {aspect.description}, the video scores {scores[aspect.key]:g}. "
                                    f"The instruction has {words} words; more explicit detail would help.")
        return serialize_report(report_from_mapping(scores, comments))

    def _video_generator(self, user: str, extra: dict) -> str:
        out_dir = Path(extra.get("output_dir") or "offline_video")
        out_dir.mkdir(parents=True, exist_ok=True)
        key = _digest(str(self.seed), user)
        rng = np.random.default_rng(key)
        height, width = _FRAME_SHAPE
        background = rng.integers(0, 120, size=_FRAME_SHAPE, dtype=np.uint8)
        step = 2 + key % 4
        side = 24
        for t in range(_FRAME_COUNT):
            frame = background.copy()
            x = (t * step) % (width - side)
            frame[12:12 + side, x:x + side] = 255
            cv2.imwrite(str(out_dir / f"frame_{t:06d}.pgm"), frame)
        return json.dumps({"video": str(out_dir), "frames": _FRAME_COUNT, "width": width,
                           "height": height, "seed": self.seed})

    def _instruction_revisor(self, user: str, _extra: dict) -> str:
        instruction = _section(user, "Instruction:", "\n\nEvaluation:")
        clause = _REVISION_CLAUSES[_digest(str(self.seed), instruction) % len(_REVISION_CLAUSES)]
        return f"{instruction.rstrip('.')}, {clause}."

    def _comment_revisor(self, user: str, _extra: dict) -> str:
        original = _section(user, "Original comment:")
        return f"{original} {STOCK_SENTENCE}"

    def _comment_validator(self, user: str, _extra: dict) -> str:
        instruction = _section(user, "Instruction:", "\n\nOriginal comment:")
        original = _section(user, "Original comment:", "\n\nRevised comment:")
        revised = _section(user, "Revised comment:")
        known = set(tokenize(instruction)) | set(tokenize(original)) | set(tokenize(STOCK_SENTENCE))
        novel = sorted({w for w in tokenize(revised) if w not in known})
        return json.dumps({"pass": not novel, "issues": novel})

    def _comment_judge(self, user: str, _extra: dict) -> str:
        reference = _section(user, "Reference comment:", "\n\nComment to grade:")
        candidate = _section(user, "Comment to grade:")
        f1 = rouge1(candidate, reference).f1 if tokenize(candidate) and tokenize(reference) else 0.0
        return f"The comment overlaps the reference with F1 {f1:.2f}.\nScore: {1 + round(4 * f1)}"
