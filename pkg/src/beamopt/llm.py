"""Chat-completions clients: a real HTTP client and two offline mocks.

The HTTP client talks the common ``POST {base_url}/chat/completions`` wire
format with bearer auth and base64 data-URL image parts. The API secret is
read from an environment variable at construction time and never written to
disk, logs, or transcripts. Mocks implement the same ``complete`` protocol so
agent loops and evaluations run without network access.
"""

from __future__ import annotations

import base64
import json
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

__all__ = [
    "ChatMessage",
    "ClientConfig",
    "ChatClient",
    "ChatClientError",
    "AuthenticationError",
    "TransportError",
    "MalformedResponseError",
    "ScriptExhaustedError",
    "HttpChatClient",
    "ScriptedChatClient",
    "HillClimbChatClient",
]

_ROLES = ("system", "user", "assistant")


class ChatClientError(Exception):
    """Base class for chat client failures."""


class AuthenticationError(ChatClientError):
    """Missing or rejected credentials."""


class TransportError(ChatClientError):
    """Network failure that survived the retry budget."""


class MalformedResponseError(ChatClientError):
    """The server answered with something that is not a chat completion."""


class ScriptExhaustedError(ChatClientError):
    """A scripted mock ran out of queued responses."""


@dataclass(frozen=True)
class ChatMessage:
    """One turn of a conversation; images ride along as PNG payloads."""

    role: str
    text: str
    images: tuple[bytes, ...] = ()

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")
        if self.role == "assistant" and self.images:
            raise ValueError("assistant messages cannot carry images")
        object.__setattr__(self, "images", tuple(self.images))


@dataclass(frozen=True)
class ClientConfig:
    """HTTP client settings. The credential itself stays in the environment."""

    base_url: str = ""
    model: str = ""
    api_key_env_var: str = "BEAMOPT_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 1.0
    min_request_interval_s: float = 0.0
    temperature: float = 0.0
    max_tokens: int = 1024
    call_log_path: str | None = None

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_s <= 0 or self.backoff_base_s < 0 or self.min_request_interval_s < 0:
            raise ValueError("timeouts and intervals must be non-negative (timeout positive)")


class ChatClient(Protocol):
    def complete(self, messages: Sequence[ChatMessage]) -> str: ...


def _check_history(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("message history is empty")
    if messages[-1].role != "user":
        raise ValueError("message history must end with a user message")


def _wire_message(msg: ChatMessage) -> dict:
    if not msg.images:
        return {"role": msg.role, "content": msg.text}
    parts: list[dict] = [{"type": "text", "text": msg.text}]
    for payload in msg.images:
        b64 = base64.b64encode(payload).decode("ascii")
        parts.append(
            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}
        )
    return {"role": msg.role, "content": parts}


class HttpChatClient:
    """Minimal chat-completions client with retries and caller-side pacing."""

    def __init__(self, config: ClientConfig):
        import os

        if not config.base_url or not config.model:
            raise ValueError("ClientConfig needs base_url and model for HTTP use")
        secret = os.environ.get(config.api_key_env_var, "")
        if not secret:
            raise AuthenticationError(
                f"environment variable {config.api_key_env_var!r} is not set; "
                "export the API key there before using the HTTP backend"
            )
        self.config = config
        self._secret = secret
        self._last_request = 0.0

    def _log(self, record: dict) -> None:
        if not self.config.call_log_path:
            return
        path = Path(self.config.call_log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        import requests

        _check_history(messages)
        cfg = self.config
        if cfg.min_request_interval_s > 0:
            wait = self._last_request + cfg.min_request_interval_s - time.monotonic()
            if wait > 0:
                time.sleep(wait)

        url = cfg.base_url.rstrip("/") + "/chat/completions"
        payload = {
            "model": cfg.model,
            "messages": [_wire_message(m) for m in messages],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self._secret}"}

        last_error: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(cfg.backoff_base_s * 2 ** (attempt - 1))
            started = time.monotonic()
            self._last_request = started
            try:
                resp = requests.post(url, json=payload, headers=headers, timeout=cfg.timeout_s)
            except requests.RequestException as exc:
                last_error = exc
                self._log(
                    {
                        "ts": time.time(),
                        "model": cfg.model,
                        "attempt": attempt,
                        "error": type(exc).__name__,
                    }
                )
                continue

            latency_ms = (time.monotonic() - started) * 1000.0
            record = {
                "ts": time.time(),
                "model": cfg.model,
                "attempt": attempt,
                "status": resp.status_code,
                "latency_ms": round(latency_ms, 3),
                "message_count": len(messages),
                "image_count": sum(len(m.images) for m in messages),
            }

            if resp.status_code in (401, 403):
                self._log(record)
                raise AuthenticationError(f"server rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = MalformedResponseError(f"HTTP {resp.status_code}")
                self._log(record)
                continue
            if resp.status_code != 200:
                self._log(record)
                raise ChatClientError(f"HTTP {resp.status_code}: {resp.text[:200]}")

            try:
                body = resp.json()
                content = body["choices"][0]["message"]["content"]
                if not isinstance(content, str):
                    raise TypeError("content is not a string")
            except Exception as exc:
                self._log(record)
                raise MalformedResponseError(f"cannot read completion: {exc}") from exc

            usage = body.get("usage")
            if isinstance(usage, dict):
                record["usage"] = {
                    k: usage[k]
                    for k in ("prompt_tokens", "completion_tokens", "total_tokens")
                    if k in usage
                }
            self._log(record)
            return content

        raise TransportError(
            f"request failed after {cfg.max_retries + 1} attempts: {last_error}"
        )


class ScriptedChatClient:
    """Replays a fixed queue of responses; useful for tests and replays."""

    def __init__(self, responses: Sequence[str]):
        self._queue = list(responses)
        self.calls: list[list[ChatMessage]] = []

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        _check_history(messages)
        self.calls.append(list(messages))
        if not self._queue:
            raise ScriptExhaustedError("scripted client has no responses left")
        return self._queue.pop(0)


_REWARD_RE = re.compile(r"reward of (-?\d+(?:\.\d+)?)")


class HillClimbChatClient:
    """Offline stand-in for a language model that actually optimizes.

    The first call proposes equally spaced beams. Every later call reads the
    reward quoted in the latest prompt, keeps the previous proposal as its
    base when the reward improved on the best seen so far, and perturbs one
    angle of the base by +-10 degrees. Deterministic for a given seed.
    """

    def __init__(self, seed: int = 0, beam_count: int = 5, step_deg: float = 10.0):
        if beam_count < 1:
            raise ValueError("beam_count must be >= 1")
        self._rng = np.random.default_rng(seed)
        self._beam_count = beam_count
        self._step = float(step_deg)
        self._base: list[float] | None = None
        self._candidate: list[float] | None = None
        self._best: float | None = None

    def _perturb(self, base: list[float]) -> list[float]:
        cand = list(base)
        for _ in range(16):
            i = int(self._rng.integers(len(cand)))
            delta = self._step if int(self._rng.integers(2)) else -self._step
            new = (base[i] + delta) % 360.0
            taken = {round(a) % 360 for j, a in enumerate(cand) if j != i}
            if round(new) % 360 not in taken:
                cand[i] = new
                return cand
        return cand

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        _check_history(messages)
        if self._candidate is None:
            self._candidate = [
                k * 360.0 / self._beam_count for k in range(self._beam_count)
            ]
        else:
            match = _REWARD_RE.search(messages[-1].text)
            reward = float(match.group(1)) if match else None
            if reward is not None and (self._best is None or reward > self._best):
                self._best = reward
                self._base = self._candidate
            elif self._base is None:
                self._base = self._candidate
            self._candidate = self._perturb(self._base)
        angles = [round(a, 1) for a in self._candidate]
        return (
            "Looking at the dose overlay, I will adjust the arrangement.\n\n"
            f'```json\n{{"gantry_angles": {json.dumps(angles)}}}\n```'
        )
