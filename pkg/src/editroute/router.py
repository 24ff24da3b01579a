"""Self-adaptive inference: pick the base or the aligned path per query."""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Any

from .augmenter import Augmenter, AugmentedEdit, Edit, render_qa
from .backends import QUERY_MARKER, UPDATED_MARKER, CompletionBackend
from .embedding import EmbeddingBackend
from .errors import BackendUnavailable, RoutingError
from .memory import Memory, MemoryEntry
from .retrieval import (
    DEFAULT_K,
    RelevanceFilter,
    embed_query,
    filter_candidates,
    select_best,
    topk_by_embedding,
)


class RoutePath(str, enum.Enum):
    BASE = "base"
    ALIGNED = "aligned"


@dataclass(frozen=True)
class RouteDecision:
    path: RoutePath
    matched_edit: Edit | None = None
    similarity: float | None = None
    candidates_considered: int = 0
    candidates_passed_filter: int = 0

    def __post_init__(self) -> None:
        if (self.path is RoutePath.ALIGNED) != (self.matched_edit is not None):
            raise ValueError("aligned path requires a matched edit and vice versa")

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": self.path.value,
            "matched_edit_id": self.matched_edit.id if self.matched_edit else None,
            "similarity": self.similarity,
            "candidates_considered": self.candidates_considered,
            "candidates_passed_filter": self.candidates_passed_filter,
        }


@dataclass(frozen=True)
class RoutedAnswer:
    answer: str
    decision: RouteDecision
    prompt_used: str

    def to_dict(self) -> dict[str, Any]:
        return {"answer": self.answer, "prompt_used": self.prompt_used, **self.decision.to_dict()}


def build_ke_prompt(edit: Edit, query: str) -> str:
    return f"{UPDATED_MARKER}{render_qa(edit)}{QUERY_MARKER}{query}"


def decide(
    query: str,
    memory: Memory,
    embedder: EmbeddingBackend,
    filter_model: RelevanceFilter,
    k: int = DEFAULT_K,
) -> RouteDecision:
    view = memory.view()
    if not view.entries:
        return RouteDecision(RoutePath.BASE)
    q_emb = embed_query(embedder, query)
    candidates = topk_by_embedding(view, q_emb, k)
    passed = filter_candidates(filter_model, query, candidates, query_embedding=q_emb)
    best = select_best(passed, view)
    if best is None:
        return RouteDecision(RoutePath.BASE, None, None, len(candidates), 0)
    edit, similarity = best
    return RouteDecision(RoutePath.ALIGNED, edit, similarity, len(candidates), len(passed))


def route(
    query: str,
    memory: Memory,
    embedder: EmbeddingBackend,
    filter_model: RelevanceFilter,
    k: int,
    base: CompletionBackend,
    aligned: CompletionBackend,
) -> RoutedAnswer:
    """Answer ``query`` on the base model, or on the aligned model with the matched edit in context."""
    if not query.strip():
        raise ValueError("query must be non-empty")
    decision = decide(query, memory, embedder, filter_model, k)
    if decision.path is RoutePath.BASE:
        prompt, backend = query, base
    else:
        prompt, backend = build_ke_prompt(decision.matched_edit, query), aligned
    try:
        answer = backend.complete(prompt)
    except BackendUnavailable as exc:
        raise RoutingError(str(exc), decision) from exc
    return RoutedAnswer(answer, decision, prompt)


@dataclass
class EditingSystem:
    """Memory, retriever, filter and the two backends wired together.

    Edits and queries may be interleaved freely; a query issued after edit
    ``t`` sees exactly the memory after step ``t``.
    """

    embedder: EmbeddingBackend
    filter_model: RelevanceFilter
    base: CompletionBackend
    aligned: CompletionBackend
    augmenter: Augmenter = field(default_factory=Augmenter)
    k: int = DEFAULT_K
    memory: Memory | None = None
    log_decisions: bool = True
    decision_log: list[dict[str, Any]] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.memory is None:
            self.memory = Memory.for_embedder(self.embedder)
        self._write_lock = threading.Lock()
        self._log_lock = threading.Lock()

    def apply_edit(self, edit: Edit, augmented: AugmentedEdit | None = None) -> list[MemoryEntry]:
        """Augment (unless given), stamp the next step and append to memory."""
        if augmented is None:
            augmented = self.augmenter(edit)
        with self._write_lock:
            stamped = Edit(edit.id, edit.query, edit.answer, self.memory.next_step())
            return self.memory.insert(stamped, augmented, self.embedder)

    def add(self, edit_id: str, query: str, answer: str) -> list[MemoryEntry]:
        return self.apply_edit(Edit(edit_id, query, answer, 0))

    def answer(self, query: str) -> RoutedAnswer:
        try:
            result = route(query, self.memory, self.embedder, self.filter_model, self.k, self.base, self.aligned)
        except RoutingError as exc:
            self._log(query, exc.decision, error=str(exc))
            raise
        self._log(query, result.decision)
        return result

    def _log(self, query: str, decision: RouteDecision, error: str | None = None) -> None:
        if not self.log_decisions:
            return
        row = {"query": query, **decision.to_dict()}
        if error is not None:
            row["error"] = error
        with self._log_lock:
            self.decision_log.append(row)
