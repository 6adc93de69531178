"""Chat-completion clients for the external model roles, with retries and bounded fan-out.

The wire shape is a JSON POST of ``{"model", "messages", "temperature", ...}`` to
``base_url + path``; the reply text is ``choices[0].message.content``. Audio rides
inside the user message as a base64 ``input_audio`` part with its media type.
Tests swap the HTTP transport for :class:`MockTransport`.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
import os
import random
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    """Base class for failures talking to a model endpoint."""


class TransportError(GatewayError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class AuthError(GatewayError):
    pass


class MalformedResponseError(GatewayError):
    pass


class TransientError(GatewayError):
    """A failure worth retrying: timeout, 5xx, rate limit."""


class Role(enum.Enum):
    CAPTIONER = "captioner"
    GENERATOR = "generator"
    ANSWERER_A = "answerer_a"
    ANSWERER_B = "answerer_b"
    JUDGE = "judge"
    QA_READER = "qa_reader"


DEFAULT_TEMPERATURE = {
    Role.ANSWERER_A: 0.7,
    Role.ANSWERER_B: 0.7,
    Role.JUDGE: 0.0,
}


@dataclass(frozen=True)
class ModelEndpoint:
    role: Role
    base_url: str
    model: str
    auth_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float | None = None
    max_tokens: int | None = None
    path: str = "/chat/completions"

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def effective_temperature(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return DEFAULT_TEMPERATURE.get(self.role, 0.0)


@dataclass(frozen=True)
class AudioAttachment:
    data: bytes
    media_type: str = "audio/wav"

    @classmethod
    def from_path(cls, path) -> "AudioAttachment":
        path = Path(path)
        media = {".wav": "audio/wav", ".mp3": "audio/mpeg", ".flac": "audio/flac",
                 ".ogg": "audio/ogg"}.get(path.suffix.lower(), "application/octet-stream")
        return cls(path.read_bytes(), media)


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    audio: AudioAttachment | None = None


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if sum(m.audio is not None for m in self.messages) > 1:
            raise ValueError("at most one audio attachment per request")

    @classmethod
    def user(cls, text: str, audio: AudioAttachment | None = None) -> "ChatRequest":
        return cls((Message("user", text, audio),))

    @property
    def audio(self) -> AudioAttachment | None:
        return next((m.audio for m in self.messages if m.audio is not None), None)


@dataclass
class ChatResponse:
    text: str
    finish_reason: str | None = None
    usage: dict = field(default_factory=dict)
    latency: float = 0.0
    attempts: int = 1
    correlation_id: str = ""


def request_body(endpoint: ModelEndpoint, request: ChatRequest) -> dict:
    messages = []
    for m in request.messages:
        if m.audio is None:
            messages.append({"role": m.role, "content": m.text})
            continue
        messages.append({"role": m.role, "content": [
            {"type": "text", "text": m.text},
            {"type": "input_audio", "input_audio": {
                "data": base64.b64encode(m.audio.data).decode("ascii"),
                "media_type": m.audio.media_type,
            }},
        ]})
    body = {"model": endpoint.model, "messages": messages, "temperature": endpoint.effective_temperature}
    if endpoint.max_tokens is not None:
        body["max_tokens"] = endpoint.max_tokens
    return body


def parse_response(payload) -> tuple[str, str | None, dict]:
    try:
        choice = payload["choices"][0]
        text = choice["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(f"response lacks choices[0].message.content: {exc!r}") from exc
    if not isinstance(text, str):
        raise MalformedResponseError("choices[0].message.content is not a string")
    return text, choice.get("finish_reason"), payload.get("usage") or {}


Transport = Callable[[ModelEndpoint, dict], dict]


class HttpTransport:
    """POSTs the body with httpx and maps failures onto retryable or terminal errors."""

    def __init__(self, client: httpx.Client | None = None):
        self._client = client or httpx.Client()

    def __call__(self, endpoint: ModelEndpoint, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if endpoint.auth_env:
            token = os.environ.get(endpoint.auth_env)
            if not token:
                raise AuthError(f"environment variable {endpoint.auth_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        url = endpoint.base_url.rstrip("/") + endpoint.path
        try:
            resp = self._client.post(url, json=body, headers=headers, timeout=endpoint.timeout)
        except httpx.TimeoutException as exc:
            raise TransientError(f"timeout after {endpoint.timeout}s") from exc
        except httpx.TransportError as exc:
            raise TransientError(f"connection failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponseError("response body is not JSON") from exc


class MockTransport:
    """In-process stand-in for an endpoint.

    ``responder(body)`` returns the reply text (or a full response dict) or raises
    a :class:`GatewayError`. Every body received is kept in ``calls`` and the peak
    number of concurrent calls in ``max_in_flight``.
    """

    def __init__(self, responder: Callable[[dict], str | dict], delay: Callable[[dict], float] | None = None):
        self.responder = responder
        self.delay = delay
        self.calls: list[dict] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def __call__(self, endpoint: ModelEndpoint, body: dict) -> dict:
        with self._lock:
            self.calls.append(json.loads(json.dumps(body)))
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.delay is not None:
                time.sleep(self.delay(body))
            out = self.responder(body)
        finally:
            with self._lock:
                self.in_flight -= 1
        if isinstance(out, dict):
            return out
        return {"choices": [{"message": {"role": "assistant", "content": out}, "finish_reason": "stop"}],
                "usage": {}}


def canned(text: str) -> MockTransport:
    return MockTransport(lambda body: text)


def flaky(failures: int, text: str) -> MockTransport:
    """Fails transiently ``failures`` times, then answers ``text``."""
    state = {"n": 0}

    def responder(body):
        state["n"] += 1
        if state["n"] <= failures:
            raise TransientError(f"simulated failure {state['n']}")
        return text

    return MockTransport(responder)


def last_user_text(body: dict) -> str:
    content = body["messages"][-1]["content"]
    if isinstance(content, str):
        return content
    return "".join(part.get("text", "") for part in content if part.get("type") == "text")


class RequestLog:
    """Line-delimited JSON log of request/response pairs; never records credentials."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock, open(self.path, "a") as fh:
            fh.write(line + "\n")


def _redact_body(body: dict) -> dict:
    out = json.loads(json.dumps(body))
    for m in out.get("messages", []):
        if isinstance(m.get("content"), list):
            for part in m["content"]:
                if part.get("type") == "input_audio":
                    n = len(part["input_audio"]["data"])
                    part["input_audio"]["data"] = f"<{n} base64 chars>"
    return out


class ModelClient:
    """An endpoint bound to a transport; safe to share between threads."""

    def __init__(self, endpoint: ModelEndpoint, transport: Transport | None = None,
                 request_log: RequestLog | None = None, sleep: Callable[[float], None] = time.sleep,
                 backoff_base: float = 0.5, backoff_factor: float = 2.0, jitter: float = 0.2,
                 rng: random.Random | None = None):
        self.endpoint = endpoint
        self.transport = transport or HttpTransport()
        self.request_log = request_log
        self.sleep = sleep
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.jitter = jitter
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()

    @property
    def role(self) -> Role:
        return self.endpoint.role

    def backoff(self, attempt: int) -> float:
        with self._rng_lock:
            j = self._rng.uniform(-self.jitter, self.jitter)
        return self.backoff_base * self.backoff_factor ** (attempt - 1) * (1.0 + j)

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = request_body(self.endpoint, request)
        cid = uuid.uuid4().hex
        attempts = self.endpoint.max_retries + 1
        start = time.perf_counter()
        for attempt in range(1, attempts + 1):
            try:
                payload = self.transport(self.endpoint, body)
                text, finish, usage = parse_response(payload)
            except TransientError as exc:
                logger.warning("%s %s attempt %d/%d failed: %s", self.role.value, cid, attempt, attempts, exc)
                self._log(cid, body, attempt, error=str(exc))
                if attempt == attempts:
                    raise TransportError(f"{self.role.value}: gave up after {attempt} attempts: {exc}",
                                         attempts=attempt) from exc
                self.sleep(self.backoff(attempt))
                continue
            except GatewayError as exc:
                self._log(cid, body, attempt, error=str(exc))
                raise
            resp = ChatResponse(text, finish, usage, time.perf_counter() - start, attempt, cid)
            self._log(cid, body, attempt, response=text)
            return resp
        raise AssertionError("unreachable")

    def complete_many(self, requests: Sequence[ChatRequest], parallelism: int = 4) -> list[ChatResponse | GatewayError]:
        """Responses in input order; a failed request yields its exception in place."""
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")

        def one(req):
            try:
                return self.complete(req)
            except GatewayError as exc:
                return exc

        if parallelism == 1:
            return [one(r) for r in requests]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(one, requests))

    def _log(self, cid: str, body: dict, attempt: int, **extra) -> None:
        if self.request_log is None:
            return
        self.request_log.write({"correlation_id": cid, "role": self.role.value, "model": self.endpoint.model,
                                "attempt": attempt, "request": _redact_body(body), **extra})


def load_endpoints(path) -> dict[Role, ModelEndpoint]:
    """Read ``{role: {base_url, model, auth_env?, timeout?, ...}}`` from a JSON file."""
    raw = json.loads(Path(path).read_text())
    out = {}
    for role_name, cfg in raw.items():
        role = Role(role_name)
        out[role] = ModelEndpoint(role=role, **cfg)
    return out
