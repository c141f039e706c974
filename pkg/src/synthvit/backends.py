"""Clients for the chat-completion and text-to-image services.

Both HTTP clients share one retry loop: HTTP 429, 5xx, timeouts and
connection failures are retried with exponential backoff; any other non-2xx
status or a malformed body fails immediately with BadResponse. Every request
first passes a per-client concurrency semaphore and a sliding-window rate
limiter.
"""

from __future__ import annotations

import base64
import collections
import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, TypeVar

import httpx

from .errors import (
    BadResponse,
    EmptyList,
    Exhausted,
    RateLimited,
    SafetyRejected,
    TransportError,
)

log = logging.getLogger(__name__)

T = TypeVar("T")

GENERATION_TEMPERATURE = 1.0
JUDGE_TEMPERATURE = 0.0


# ---------------------------------------------------------------------------
# Requests and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChatRequest:
    system: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = GENERATION_TEMPERATURE
    max_output_chars: int = 4000
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("ChatRequest needs at least one message")

    @classmethod
    def user(cls, content: str, *, system: str = "", **kwargs: Any) -> ChatRequest:
        return cls(system=system, messages=(("user", content),), **kwargs)

    @property
    def last_user_message(self) -> str:
        for role, content in reversed(self.messages):
            if role == "user":
                return content
        return ""

    def followup(self, assistant_reply: str, user_message: str) -> ChatRequest:
        return ChatRequest(
            self.system,
            self.messages + (("assistant", assistant_reply), ("user", user_message)),
            self.temperature,
            self.max_output_chars,
            self.seed,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "system": self.system,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_output_chars": self.max_output_chars,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class T2IRequest:
    prompt: str
    seed: int
    width: int = 512
    height: int = 512
    steps: int = 30
    negative_prompt: str | None = None

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")

    def to_payload(self) -> dict[str, Any]:
        return {
            "prompt": self.prompt,
            "negative_prompt": self.negative_prompt or "",
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "steps": self.steps,
        }


@dataclass(frozen=True)
class ImageArtifact:
    data: bytes
    prompt: str
    seed: int
    width: int
    height: int
    backend: str = ""

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def metadata(self) -> dict[str, Any]:
        return {
            "prompt": self.prompt,
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "backend": self.backend,
            "sha256": self.sha256,
        }


class ChatBackend(Protocol):
    def chat_complete(self, req: ChatRequest) -> str: ...


class T2IBackend(Protocol):
    def txt2img(self, req: T2IRequest) -> ImageArtifact: ...


# ---------------------------------------------------------------------------
# Policy, rate limiting, bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackendPolicy:
    max_concurrent: int = 4
    requests_per_minute: int = 60
    max_retries: int = 3
    backoff_base: float = 1.0

    def __post_init__(self) -> None:
        if self.max_concurrent < 1 or self.requests_per_minute < 1:
            raise ValueError("max_concurrent and requests_per_minute must be positive")
        if self.max_retries < 0 or self.backoff_base <= 0:
            raise ValueError("max_retries must be >= 0 and backoff_base > 0")

    def backoff(self, attempt: int) -> float:
        return self.backoff_base * (2**attempt)


class RateLimiter:
    """Sliding 60 s window: at most ``rpm`` acquisitions in any window.

    ``clock`` and ``sleep`` are injectable so tests can drive a virtual clock.
    """

    window = 60.0

    def __init__(
        self,
        rpm: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.rpm = rpm
        self.clock = clock
        self.sleep = sleep
        self._issued: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a slot is free; returns the timestamp the request was issued at."""
        while True:
            with self._lock:
                now = self.clock()
                while self._issued and self._issued[0] <= now - self.window:
                    self._issued.popleft()
                if len(self._issued) < self.rpm:
                    self._issued.append(now)
                    return now
                wait = self._issued[0] + self.window - now
            self.sleep(wait)


@dataclass
class CallStats:
    calls: int = 0
    retries: int = 0
    failures: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, *, calls: int = 0, retries: int = 0, failures: int = 0) -> None:
        with self._lock:
            self.calls += calls
            self.retries += retries
            self.failures += failures

    def to_dict(self) -> dict[str, int]:
        return {"calls": self.calls, "retries": self.retries, "failures": self.failures}


class _RetryingClient:
    name = "backend"

    def __init__(
        self,
        policy: BackendPolicy,
        *,
        http: httpx.Client | None = None,
        timeout: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.policy = policy
        self.http = http or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self.limiter = RateLimiter(policy.requests_per_minute, clock, sleep)
        self._slots = threading.BoundedSemaphore(policy.max_concurrent)
        self.stats = CallStats()
        self._local = threading.local()

    @property
    def last_retries(self) -> int:
        """Retries spent by the most recent call made from this thread."""
        return getattr(self._local, "retries", 0)

    def _post(self, url: str, payload: dict[str, Any], headers: dict[str, str]) -> httpx.Response:
        with self._slots:
            self.limiter.acquire()
            try:
                resp = self.http.post(url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                raise TransportError(f"{self.name}: {type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429:
            raise RateLimited(f"{self.name}: HTTP 429")
        if resp.status_code >= 500:
            raise TransportError(f"{self.name}: HTTP {resp.status_code}")
        if not 200 <= resp.status_code < 300:
            raise BadResponse(f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}")
        return resp

    def _with_retries(self, attempt_fn: Callable[[], T]) -> T:
        self._local.retries = 0
        self.stats.bump(calls=1)
        for attempt in range(self.policy.max_retries + 1):
            try:
                return attempt_fn()
            except TransportError as exc:
                if attempt == self.policy.max_retries:
                    self.stats.bump(failures=1)
                    raise Exhausted(
                        f"{self.name}: gave up after {attempt + 1} attempts: {exc}",
                        attempts=attempt + 1,
                    ) from exc
                delay = self.policy.backoff(attempt)
                log.warning("%s; retrying in %.2fs", exc, delay)
                self._local.retries = attempt + 1
                self.stats.bump(retries=1)
                self.sleep(delay)
            except (BadResponse, SafetyRejected):
                self.stats.bump(failures=1)
                raise
        raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# HTTP clients
# ---------------------------------------------------------------------------


class HttpChatClient(_RetryingClient):
    """OpenAI-compatible ``/chat/completions`` client."""

    name = "chat"

    def __init__(
        self,
        url: str,
        model: str,
        policy: BackendPolicy,
        *,
        api_key_env: str | None = "CHAT_API_KEY",
        **kwargs: Any,
    ):
        super().__init__(policy, **kwargs)
        self.url = url.rstrip("/")
        self.model = model
        self.api_key = os.environ.get(api_key_env, "") if api_key_env else ""

    def _endpoint(self) -> str:
        if self.url.endswith("/chat/completions"):
            return self.url
        return self.url + "/chat/completions"

    def payload(self, req: ChatRequest) -> dict[str, Any]:
        messages = []
        if req.system:
            messages.append({"role": "system", "content": req.system})
        messages += [{"role": r, "content": c} for r, c in req.messages]
        body: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            # rough chars-per-token ratio for English text
            "max_tokens": max(1, -(-req.max_output_chars // 3)),
        }
        if req.seed is not None:
            body["seed"] = req.seed
        return body

    def chat_complete(self, req: ChatRequest) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = self.payload(req)

        def attempt() -> str:
            resp = self._post(self._endpoint(), body, headers)
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BadResponse(f"chat: malformed body: {resp.text[:200]}") from exc
            if not isinstance(content, str):
                raise BadResponse("chat: message content is not a string")
            return content

        return self._with_retries(attempt)


class HttpT2IClient(_RetryingClient):
    """Text-to-image over HTTP.

    Request body: ``{prompt, negative_prompt, seed, width, height, steps}``.
    Response body: ``{"images": ["<base64 png>", ...]}`` (AUTOMATIC1111
    style) or ``{"image": "<base64 png>"}``. A body with
    ``"safety_rejected": true`` or a true entry in ``nsfw_content_detected``
    raises SafetyRejected.
    """

    name = "t2i"

    def __init__(
        self, url: str, policy: BackendPolicy, *, api_key_env: str | None = "T2I_API_KEY", **kwargs: Any
    ):
        super().__init__(policy, **kwargs)
        self.url = url
        self.api_key = os.environ.get(api_key_env, "") if api_key_env else ""

    def txt2img(self, req: T2IRequest) -> ImageArtifact:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

        def attempt() -> ImageArtifact:
            resp = self._post(self.url, req.to_payload(), headers)
            try:
                body = resp.json()
            except ValueError as exc:
                raise BadResponse("t2i: body is not JSON") from exc
            if not isinstance(body, dict):
                raise BadResponse("t2i: body is not an object")
            nsfw = body.get("nsfw_content_detected") or []
            if body.get("safety_rejected") or any(nsfw):
                raise SafetyRejected(f"t2i: prompt refused: {req.prompt!r}")
            encoded = body.get("image") or (body.get("images") or [None])[0]
            if not isinstance(encoded, str):
                raise BadResponse("t2i: no image in response")
            if encoded.startswith("data:"):
                encoded = encoded.split(",", 1)[1]
            try:
                data = base64.b64decode(encoded, validate=True)
            except ValueError as exc:
                raise BadResponse("t2i: image is not valid base64") from exc
            return ImageArtifact(data, req.prompt, req.seed, req.width, req.height, backend=self.url)

        return self._with_retries(attempt)


# ---------------------------------------------------------------------------
# Reply parsing
# ---------------------------------------------------------------------------


_NUMBERED = re.compile(r"^\s*\d+\s*[.)]\s*(.*?)\s*$")


def parse_numbered_list(reply: str) -> list[str]:
    """Items of a ``1. foo`` / ``1) foo`` list, in order; other lines are ignored."""
    items = []
    for line in reply.splitlines():
        m = _NUMBERED.match(line)
        if m and m.group(1):
            items.append(m.group(1))
    if not items:
        raise EmptyList(f"no numbered items in reply: {reply[:80]!r}")
    return items
