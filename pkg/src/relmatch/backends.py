"""Classification backends.

A backend turns a :class:`ClassificationRequest` into a :class:`BackendResponse`.
Transport problems surface as :class:`TransportError`; retrying is the
caller's job (see ``classifier.classify_batch``).
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Protocol

from relmatch.errors import TransportError
from relmatch.model import Provenance

if TYPE_CHECKING:
    from relmatch.classifier import ClassificationRequest

API_KEY_ENV = "RELMATCH_API_KEY"
DEFAULT_CHAT_MODEL = "gpt-4"


@dataclass(frozen=True)
class BackendResponse:
    raw_text: str
    provenance: str

    def __post_init__(self) -> None:
        if not self.raw_text:
            raise ValueError("backend response text must be non-empty")


class Backend(Protocol):
    model_hint: str

    def complete(self, request: ClassificationRequest) -> BackendResponse: ...


class RemoteChatBackend:
    """Chat-completion endpoint (``messages`` in, ``choices[0].message.content`` out)."""

    def __init__(
        self,
        endpoint: str,
        model: str = DEFAULT_CHAT_MODEL,
        api_key: str | None = None,
        client=None,
        timeout: float = 120.0,
    ) -> None:
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.model_hint = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._client = client or httpx.Client(timeout=timeout)
        self.calls = 0

    def complete(self, request: ClassificationRequest) -> BackendResponse:
        import httpx

        self.calls += 1
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": request.prompt}],
        }
        try:
            resp = self._client.post(self.endpoint, json=payload, headers=headers)
            resp.raise_for_status()
            text = resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if not text:
            raise TransportError("chat response was empty")
        return BackendResponse(text, Provenance.remote(self.model))


@dataclass
class CountingBackend:
    """Wraps another backend and counts calls; thread-safe."""

    inner: Backend
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def model_hint(self) -> str:
        return self.inner.model_hint

    def complete(self, request: ClassificationRequest) -> BackendResponse:
        with self._lock:
            self.calls += 1
        return self.inner.complete(request)


class FunctionBackend:
    """Backend built from a plain function; handy for scripted tests."""

    def __init__(
        self,
        fn: Callable[[ClassificationRequest], str],
        model_hint: str = "scripted",
        provenance: str = Provenance.ORACLE,
    ) -> None:
        self._fn = fn
        self.model_hint = model_hint
        self.provenance = provenance

    def complete(self, request: ClassificationRequest) -> BackendResponse:
        return BackendResponse(self._fn(request), self.provenance)
