"""Completion backends: the frozen base model and the adapter-activated model.

Real deployments talk to OpenAI-compatible servers. The mocks are
deterministic test doubles used by the offline test suite and by the
``mock: true`` configuration.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol, runtime_checkable

import httpx

from .errors import BackendUnavailable

UPDATED_MARKER = "[Updated Information] "
QUERY_MARKER = "\n[Query] "


@runtime_checkable
class CompletionBackend(Protocol):
    name: str

    def complete(self, prompt: str) -> str: ...


@dataclass(frozen=True)
class EndpointSpec:
    base_url: str
    model: str
    adapter_name: str | None = None
    api_shape: str = "chat"
    timeout: float = 60.0
    retries: int = 2
    max_tokens: int = 64


class HttpCompletionBackend:
    """OpenAI-compatible client with sampling disabled.

    ``api_shape="chat"`` posts a single user message to ``/chat/completions``;
    ``"completion"`` posts a raw prompt to ``/completions``. When an adapter
    name is configured it is sent as the model, the usual way LoRA adapters
    are selected on multi-adapter servers.
    """

    def __init__(self, name: str, spec: EndpointSpec, client: httpx.Client | None = None) -> None:
        if spec.api_shape not in ("chat", "completion"):
            raise ValueError(f"unknown api shape {spec.api_shape!r}")
        self.name = name
        self.spec = spec
        self._client = client or httpx.Client(timeout=spec.timeout)

    def request_payload(self, prompt: str) -> tuple[str, dict]:
        spec = self.spec
        payload: dict = {
            "model": spec.adapter_name or spec.model,
            "temperature": 0,
            "max_tokens": spec.max_tokens,
        }
        if spec.api_shape == "chat":
            payload["messages"] = [{"role": "user", "content": prompt}]
            return f"{spec.base_url.rstrip('/')}/chat/completions", payload
        payload["prompt"] = prompt
        return f"{spec.base_url.rstrip('/')}/completions", payload

    def complete(self, prompt: str) -> str:
        url, payload = self.request_payload(prompt)
        last: Exception | None = None
        for _ in range(self.spec.retries + 1):
            try:
                response = self._client.post(url, json=payload)
                if response.status_code >= 500:
                    last = httpx.HTTPStatusError(f"server error {response.status_code}", request=response.request, response=response)
                    continue
                response.raise_for_status()
                return extract_text(response.json())
            except httpx.TransportError as exc:
                last = exc
            except httpx.HTTPStatusError as exc:
                raise BackendUnavailable(f"{self.name} backend rejected the request: {exc}") from exc
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise BackendUnavailable(f"{self.name} backend sent an unreadable reply: {exc}") from exc
        raise BackendUnavailable(f"{self.name} backend unreachable: {last}")


def extract_text(body: Mapping) -> str:
    if "text" in body and not isinstance(body.get("choices"), list):
        return str(body["text"])
    choice = body["choices"][0]
    if "message" in choice:
        return str(choice["message"].get("content") or "")
    return str(choice.get("text") or "")


# --- mocks -------------------------------------------------------------------


class MockBaseBackend:
    """Stands in for the frozen base model: a stable hash-derived token per query."""

    name = "base"

    def complete(self, prompt: str) -> str:
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        return f"unknown-{digest[:12]}"


class MockAlignedBackend:
    """Stands in for the aligned model by reading the answer out of the KE prompt.

    If the edit statement starts with the query, the rest of the statement
    is the answer. Otherwise the trailing clause of the statement is
    returned: whatever follows its last ``"? "``, ``": "`` or ``". "``.
    """

    name = "aligned"

    def complete(self, prompt: str) -> str:
        statement, query = split_ke_prompt(prompt)
        query = query.strip()
        if query and statement.startswith(query) and statement[len(query) :].strip():
            return statement[len(query) :].strip()
        return trailing_clause(statement)


def split_ke_prompt(prompt: str) -> tuple[str, str]:
    if not prompt.startswith(UPDATED_MARKER):
        raise ValueError("prompt lacks the [Updated Information] marker")
    body = prompt[len(UPDATED_MARKER) :]
    statement, sep, query = body.partition(QUERY_MARKER)
    if not sep:
        raise ValueError("prompt lacks the [Query] marker")
    return statement, query


def trailing_clause(statement: str) -> str:
    cut = max(statement.rfind(sep) + len(sep) if sep in statement else -1 for sep in ("? ", ": ", ". "))
    tail = statement[cut:] if cut > 0 else statement
    return tail.strip()


def mock_backends() -> tuple[MockBaseBackend, MockAlignedBackend]:
    return MockBaseBackend(), MockAlignedBackend()


class ScriptedBackend:
    """Replies through ``script(prompt)``; records every prompt it receives."""

    def __init__(self, script: Callable[[str], str] | Mapping[str, str], name: str = "scripted") -> None:
        self.name = name
        self._script = script
        self.prompts: list[str] = []
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.prompts.append(prompt)
        if callable(self._script):
            return self._script(prompt)
        try:
            return self._script[prompt]
        except KeyError as exc:
            raise BackendUnavailable("no scripted reply for prompt") from exc


class FailingBackend:
    """Always unreachable; exercises the error paths."""

    def __init__(self, name: str = "down") -> None:
        self.name = name

    def complete(self, prompt: str) -> str:
        raise BackendUnavailable(f"{self.name} backend unreachable")
