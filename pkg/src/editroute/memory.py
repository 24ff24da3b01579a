"""Append-only memory of augmented edit forms.

Writers (edit insertion, snapshotting) are serialized by a lock. Readers
take a :class:`MemoryView`, an immutable pair of entry tuple and embedding
matrix that is swapped in atomically after each insertion, so retrieval
never sees a half-inserted edit.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .augmenter import QA, AugmentedEdit, Edit, EditForm
from .embedding import EmbeddingBackend, l2_normalize
from .errors import EmbeddingError, SchemaError

SNAPSHOT_VERSION = 1
NORM_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    edit_id: str
    form: EditForm
    text: str
    embedding: np.ndarray
    step: int
    position: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryEntry):
            return NotImplemented
        return (
            self.edit_id == other.edit_id
            and self.form == other.form
            and self.text == other.text
            and self.step == other.step
            and self.position == other.position
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class MemoryView:
    entries: tuple[MemoryEntry, ...]
    matrix: np.ndarray  # (len(entries), dimension), rows unit-norm
    edits: dict[str, Edit] = field(repr=False)
    current_step: int

    def __len__(self) -> int:
        return len(self.entries)


class Memory:
    def __init__(self, dimension: int, embedder_name: str = "") -> None:
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.embedder_name = embedder_name
        self._lock = threading.RLock()
        self._view = MemoryView((), np.zeros((0, dimension)), {}, 0)

    @classmethod
    def for_embedder(cls, embedder: EmbeddingBackend) -> Memory:
        return cls(embedder.dimension, embedder.name)

    # -- reads ---------------------------------------------------------------

    def view(self) -> MemoryView:
        return self._view

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return self._view.entries

    @property
    def edits(self) -> dict[str, Edit]:
        return dict(self._view.edits)

    @property
    def current_step(self) -> int:
        return self._view.current_step

    def __len__(self) -> int:
        return len(self._view.entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self._view.entries)

    def edit(self, edit_id: str) -> Edit:
        return self._view.edits[edit_id]

    def stats(self) -> dict[str, int]:
        view = self._view
        return {
            "edit_count": len(view.edits),
            "entry_count": len(view.entries),
            "current_step": view.current_step,
            "dimension": self.dimension,
        }

    # -- writes --------------------------------------------------------------

    def next_step(self) -> int:
        return self._view.current_step + 1

    def insert(self, edit: Edit, augmented: AugmentedEdit, embedder: EmbeddingBackend) -> list[MemoryEntry]:
        """Embed and append every form of ``augmented``; all or nothing."""
        if augmented.edit_id != edit.id:
            raise ValueError(f"augmented edit {augmented.edit_id!r} does not belong to edit {edit.id!r}")
        if embedder.dimension != self.dimension:
            raise ValueError(f"embedder dimension {embedder.dimension} != memory dimension {self.dimension}")
        with self._lock:
            view = self._view
            if edit.step != view.current_step + 1:
                raise ValueError(f"edit step {edit.step} does not follow current step {view.current_step}")
            if edit.id in view.edits:
                raise ValueError(f"duplicate edit id {edit.id!r}")
            vectors = []
            for _, text in augmented.forms:
                vectors.append(self._checked_embedding(embedder, text))
            start = len(view.entries)
            new = [
                MemoryEntry(edit.id, form, text, vec, edit.step, start + i)
                for i, ((form, text), vec) in enumerate(zip(augmented.forms, vectors))
            ]
            self._publish(view, edit, new)
            return new

    def _checked_embedding(self, embedder: EmbeddingBackend, text: str) -> np.ndarray:
        try:
            vec = np.asarray(embedder.embed(text), dtype=np.float64)
        except EmbeddingError:
            raise
        except Exception as exc:  # embedder plug-ins may raise anything
            raise EmbeddingError(f"embedder failed: {exc}") from exc
        if vec.shape != (self.dimension,):
            raise EmbeddingError(f"embedding has shape {vec.shape}, expected ({self.dimension},)")
        vec = l2_normalize(vec)
        vec.setflags(write=False)
        return vec

    def _publish(self, view: MemoryView, edit: Edit, new: list[MemoryEntry]) -> None:
        entries = view.entries + tuple(new)
        matrix = np.vstack([view.matrix, np.stack([e.embedding for e in new])]) if new else view.matrix
        matrix.setflags(write=False)
        edits = dict(view.edits)
        edits[edit.id] = edit
        self._view = MemoryView(entries, matrix, edits, max(view.current_step, edit.step))

    # -- persistence ---------------------------------------------------------

    def snapshot(self, path: str | Path) -> int:
        """Write the memory as line-delimited JSON; returns the entry count.

        Line 1 is a header. Each further line is one entry; the QA entry of
        an edit also carries the edit's query and answer so edits can be
        rebuilt on load.
        """
        path = Path(path)
        with self._lock:
            view = self._view
            tmp = path.with_name(path.name + ".tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                header = {"version": SNAPSHOT_VERSION, "dimension": self.dimension, "embedder_name": self.embedder_name}
                fh.write(json.dumps(header) + "\n")
                for entry in view.entries:
                    fh.write(json.dumps(_entry_record(entry, view.edits[entry.edit_id])) + "\n")
            tmp.replace(path)
            return len(view.entries)

    @classmethod
    def load(cls, path: str | Path, embedder: EmbeddingBackend) -> Memory:
        with Path(path).open(encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise SchemaError("snapshot is empty, header missing", line=1)
        header = _parse_json(lines[0], 1)
        if not isinstance(header, dict):
            raise SchemaError("header must be an object", line=1)
        for key in ("version", "dimension", "embedder_name"):
            if key not in header:
                raise SchemaError(f"header lacks {key!r}", line=1, field=key)
        if header["version"] != SNAPSHOT_VERSION:
            raise SchemaError(f"unsupported snapshot version {header['version']!r}", line=1, field="version")
        if header["dimension"] != embedder.dimension:
            raise SchemaError(
                f"snapshot dimension {header['dimension']} does not match embedder dimension {embedder.dimension}",
                line=1,
                field="dimension",
            )
        memory = cls(int(header["dimension"]), str(header["embedder_name"]))
        blocks: list[tuple[list[MemoryEntry], list[Edit], int]] = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            position = sum(len(b[0]) for b in blocks)
            entry, edit = memory._parse_entry(_parse_json(line, lineno), lineno, position)
            if not blocks or blocks[-1][0][0].edit_id != entry.edit_id:
                if any(b[0][0].edit_id == entry.edit_id for b in blocks):
                    raise SchemaError(f"entries of edit {entry.edit_id!r} are not contiguous", line=lineno, field="edit_id")
                if blocks and entry.step <= blocks[-1][0][0].step:
                    raise SchemaError("edit steps must increase", line=lineno, field="step")
                blocks.append(([], [], lineno))
            entries, edits, _ = blocks[-1]
            if entries and entry.step != entries[0].step:
                raise SchemaError("entry step differs from its edit's step", line=lineno, field="step")
            entries.append(entry)
            if edit is not None:
                edits.append(edit)
        for entries, edits, lineno in blocks:
            if len(edits) != 1:
                raise SchemaError(f"edit {entries[0].edit_id!r} needs exactly one QA entry", line=lineno, field="form_kind")
            memory._publish(memory._view, edits[0], entries)
        return memory

    def _parse_entry(self, row: Any, lineno: int, position: int) -> tuple[MemoryEntry, Edit | None]:
        if not isinstance(row, dict):
            raise SchemaError("record must be an object", line=lineno)
        for key in ("edit_id", "step", "form_kind", "text", "embedding"):
            if key not in row:
                raise SchemaError(f"missing field {key!r}", line=lineno, field=key)
        try:
            form = EditForm.parse(row["form_kind"])
        except ValueError as exc:
            raise SchemaError(str(exc), line=lineno, field="form_kind") from exc
        text = row["text"]
        if not isinstance(text, str) or not text.strip():
            raise SchemaError("text must be a non-empty string", line=lineno, field="text")
        try:
            vec = np.asarray(row["embedding"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise SchemaError("embedding must be a numeric array", line=lineno, field="embedding") from exc
        if vec.shape != (self.dimension,):
            raise SchemaError(f"embedding has shape {vec.shape}", line=lineno, field="embedding")
        if abs(float(np.linalg.norm(vec)) - 1.0) > NORM_TOLERANCE:
            raise SchemaError("embedding is not unit-norm", line=lineno, field="embedding")
        vec.setflags(write=False)
        step = row["step"]
        if not isinstance(step, int) or step < 1:
            raise SchemaError("step must be a positive integer", line=lineno, field="step")
        edit = None
        if form == QA:
            payload = row.get("edit")
            if not isinstance(payload, dict):
                raise SchemaError("QA entry lacks its edit record", line=lineno, field="edit")
            try:
                edit = Edit(str(row["edit_id"]), payload["query"], payload["answer"], step)
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"bad edit record: {exc}", line=lineno, field="edit") from exc
        return MemoryEntry(str(row["edit_id"]), form, text, vec, step, position), edit


def _entry_record(entry: MemoryEntry, edit: Edit) -> dict[str, Any]:
    record: dict[str, Any] = {
        "edit_id": entry.edit_id,
        "step": entry.step,
        "form_kind": entry.form.label,
        "text": entry.text,
        "embedding": entry.embedding.tolist(),
    }
    if entry.form == QA:
        record["edit"] = {"query": edit.query, "answer": edit.answer}
    return record


def _parse_json(line: str, lineno: int) -> Any:
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed record: {exc.msg}", line=lineno) from exc
