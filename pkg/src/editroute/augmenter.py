"""Conversion of knowledge edits into the textual forms stored in memory.

Every edit keeps its QA rendering. On top of it the augmenter adds a
declarative sentence, up to three paraphrases and a reversed statement,
either from fixed templates (offline, deterministic) or by prompting a
completion backend.
"""

from __future__ import annotations

import enum
import json
import re
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping

from .errors import AugmentationError, BackendUnavailable, SchemaError

if TYPE_CHECKING:
    from .backends import CompletionBackend


@dataclass(frozen=True)
class Edit:
    id: str
    query: str
    answer: str
    step: int = 0

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ValueError("edit query must be non-empty")
        if not self.answer.strip():
            raise ValueError("edit answer must be non-empty")
        if self.step < 0:
            raise ValueError("edit step must be non-negative")


class FormKind(str, enum.Enum):
    QA = "qa"
    DECLARATIVE = "declarative"
    PARAPHRASED = "paraphrased"
    REVERSED = "reversed"


@dataclass(frozen=True, order=True)
class EditForm:
    kind: FormKind
    index: int | None = None

    def __post_init__(self) -> None:
        if self.kind is FormKind.PARAPHRASED:
            if self.index not in (1, 2, 3):
                raise ValueError(f"paraphrase index must be 1..3, got {self.index!r}")
        elif self.index is not None:
            raise ValueError(f"{self.kind.value} form takes no index")

    @property
    def label(self) -> str:
        if self.index is None:
            return self.kind.value
        return f"{self.kind.value}-{self.index}"

    @classmethod
    def parse(cls, label: str) -> EditForm:
        kind, _, index = label.partition("-")
        try:
            return cls(FormKind(kind), int(index) if index else None)
        except ValueError as exc:
            raise ValueError(f"unknown form label {label!r}") from exc

    def __str__(self) -> str:
        return self.label


QA = EditForm(FormKind.QA)
DECLARATIVE = EditForm(FormKind.DECLARATIVE)
REVERSED = EditForm(FormKind.REVERSED)
PARAPHRASES = tuple(EditForm(FormKind.PARAPHRASED, i) for i in (1, 2, 3))

_FORM_ORDER = {form: i for i, form in enumerate((QA, DECLARATIVE, *PARAPHRASES, REVERSED))}


@dataclass(frozen=True)
class AugmentedEdit:
    edit_id: str
    forms: tuple[tuple[EditForm, str], ...]

    def __post_init__(self) -> None:
        kinds = [form for form, _ in self.forms]
        if kinds.count(QA) != 1:
            raise ValueError("augmented edit must hold exactly one QA form")
        if len(set(kinds)) != len(kinds):
            raise ValueError("duplicate form in augmented edit")
        if len(kinds) > len(_FORM_ORDER):
            raise ValueError("too many forms")
        if any(not text.strip() for _, text in self.forms):
            raise ValueError("form text must be non-empty")

    def text(self, form: EditForm) -> str | None:
        for f, text in self.forms:
            if f == form:
                return text
        return None

    def __len__(self) -> int:
        return len(self.forms)


def render_qa(edit: Edit) -> str:
    return f"{edit.query} {edit.answer}"


def augment_rule_based(edit: Edit) -> AugmentedEdit:
    """Template augmentation: QA, declarative, one paraphrase, reversed."""
    query = edit.query.strip()
    answer = edit.answer.strip()
    stem = query[:-1].rstrip() if query.endswith("?") else query
    forms = (
        (QA, render_qa(edit)),
        (DECLARATIVE, f"{stem} {answer}."),
        (PARAPHRASES[0], f"Regarding: {query} The answer is {answer}."),
        (REVERSED, f"{answer} is the answer to: {query}"),
    )
    return AugmentedEdit(edit.id, forms)


# --- LLM-backed augmentation -------------------------------------------------

PROMPT_KINDS = ("declarative", "paraphrased", "reversed")


def load_templates(directory: str | Path | None = None) -> dict[str, str]:
    """Read the three augmentation prompt templates.

    Templates are plain text with ``{query}`` and ``{answer}`` placeholders.
    Without ``directory`` the templates shipped with the package are used.
    """
    templates = {}
    for kind in PROMPT_KINDS:
        if directory is None:
            text = resources.files("editroute").joinpath("templates", f"{kind}.txt").read_text("utf-8")
        else:
            text = (Path(directory) / f"{kind}.txt").read_text("utf-8")
        if "{query}" not in text or "{answer}" not in text:
            raise SchemaError(f"template {kind!r} lacks a {{query}}/{{answer}} placeholder")
        templates[kind] = text
    return templates


def fill_template(template: str, edit: Edit) -> str:
    # str.format would choke on literal braces in user-edited templates
    return template.replace("{query}", edit.query.strip()).replace("{answer}", edit.answer.strip())


_LIST_MARKER = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•])\s*")


def parse_paraphrase_reply(reply: str) -> list[str]:
    items = []
    for line in reply.splitlines():
        text = _LIST_MARKER.sub("", line, count=1).strip()
        if text:
            items.append(text)
    return items[:3]


def parse_sentence_reply(reply: str, label: str = "") -> str | None:
    """First non-empty line of a reply, with an echoed ``Label:`` prefix and quotes removed."""
    for line in reply.splitlines():
        text = line.strip()
        if label and text.lower().startswith(label.lower() + ":"):
            text = text[len(label) + 1 :].strip()
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
            text = text[1:-1].strip()
        if text:
            return text
    return None


class AugmentationCache:
    """Raw augmentation replies keyed by ``(edit_id, prompt kind)``.

    Persisted as one JSON object per line so a batch run can be resumed
    and re-used without calling the backend again.
    """

    def __init__(self, replies: Mapping[tuple[str, str], str] | None = None) -> None:
        self._replies: dict[tuple[str, str], str] = dict(replies or {})
        self._lock = threading.Lock()

    def get(self, edit_id: str, kind: str) -> str | None:
        return self._replies.get((edit_id, kind))

    def put(self, edit_id: str, kind: str, reply: str) -> None:
        with self._lock:
            self._replies[(edit_id, kind)] = reply

    def __len__(self) -> int:
        return len(self._replies)

    def __contains__(self, key: object) -> bool:
        return key in self._replies

    def save(self, path: str | Path) -> None:
        with self._lock:
            rows = sorted(self._replies.items())
        with Path(path).open("w", encoding="utf-8") as fh:
            for (edit_id, kind), reply in rows:
                fh.write(json.dumps({"edit_id": edit_id, "kind": kind, "reply": reply}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> AugmentationCache:
        replies = {}
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    replies[(str(row["edit_id"]), str(row["kind"]))] = str(row["reply"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise SchemaError(f"bad cache record: {exc}", line=lineno) from exc
        return cls(replies)


def augment_llm(
    edit: Edit,
    client: CompletionBackend,
    templates: Mapping[str, str] | None = None,
    cache: AugmentationCache | None = None,
) -> AugmentedEdit:
    """Prompt ``client`` for the declarative, paraphrased and reversed forms.

    A reply that cannot be parsed only drops its own forms; the QA form is
    always kept. An unreachable backend raises :class:`AugmentationError`.
    """
    templates = templates or _default_templates()
    replies = {}
    for kind in PROMPT_KINDS:
        reply = cache.get(edit.id, kind) if cache is not None else None
        if reply is None:
            try:
                reply = client.complete(fill_template(templates[kind], edit))
            except BackendUnavailable as exc:
                raise AugmentationError(f"augmentation backend failed for edit {edit.id!r}: {exc}") from exc
            if cache is not None:
                cache.put(edit.id, kind, reply)
        replies[kind] = reply or ""
    return assemble_forms(edit, replies)


def assemble_forms(edit: Edit, replies: Mapping[str, str]) -> AugmentedEdit:
    forms: list[tuple[EditForm, str]] = [(QA, render_qa(edit))]
    declarative = parse_sentence_reply(replies.get("declarative", ""), "Declarative")
    if declarative:
        forms.append((DECLARATIVE, declarative))
    for form, text in zip(PARAPHRASES, parse_paraphrase_reply(replies.get("paraphrased", ""))):
        forms.append((form, text))
    reversed_ = parse_sentence_reply(replies.get("reversed", ""), "Reversed")
    if reversed_:
        forms.append((REVERSED, reversed_))
    return AugmentedEdit(edit.id, tuple(forms))


_TEMPLATES: dict[str, str] | None = None


def _default_templates() -> dict[str, str]:
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = load_templates()
    return _TEMPLATES


class Augmenter:
    """Callable wrapper choosing between rule-based and LLM augmentation."""

    def __init__(
        self,
        client: CompletionBackend | None = None,
        templates: Mapping[str, str] | None = None,
        cache: AugmentationCache | None = None,
    ) -> None:
        self.client = client
        self.templates = dict(templates) if templates else None
        self.cache = cache

    @property
    def mode(self) -> str:
        return "rule" if self.client is None else "llm"

    def __call__(self, edit: Edit) -> AugmentedEdit:
        if self.client is None:
            return augment_rule_based(edit)
        return augment_llm(edit, self.client, self.templates, self.cache)

    def augment_all(self, edits: Iterable[Edit]) -> list[AugmentedEdit]:
        return [self(edit) for edit in edits]
