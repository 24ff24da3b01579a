"""Editing evaluation: datasets, match rule, metrics and the three settings.

Single editing evaluates every record on a fresh memory holding only its
own edit. Sequential editing applies all edits first and evaluates at the
end. Incremental editing evaluates record ``t`` right after edit ``t``.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .augmenter import Edit, render_qa
from .backends import CompletionBackend
from .errors import SchemaError
from .retrieval import FilterTrainSample
from .router import EditingSystem, RoutedAnswer

SETTINGS = ("single", "sequential", "incremental")


@dataclass(frozen=True)
class EvalRecord:
    edit: Edit
    locality_queries: tuple[str, ...] = ()
    portability_pairs: tuple[tuple[str, str], ...] = ()

    @property
    def id(self) -> str:
        return self.edit.id


# --- matching ----------------------------------------------------------------

_WS = re.compile(r"\s+")


def normalize_text(s: str) -> str:
    s = _WS.sub(" ", s.strip()).casefold()
    return s.rstrip(".!?").rstrip()


def answer_match(prediction: str, target: str) -> int:
    """1 when the normalized prediction starts with the normalized target."""
    target_n = normalize_text(target)
    if not target_n:
        raise ValueError("target is empty after normalization")
    return int(normalize_text(prediction).startswith(target_n))


def harmonic_mean(values: Sequence[float]) -> float:
    if len(values) not in (2, 3):
        raise ValueError("harmonic mean is taken over 2 or 3 scores")
    if any(v == 0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


# --- per-record evaluation ---------------------------------------------------


@dataclass
class RecordResult:
    record_id: str
    edit_success: int
    locality_hits: int
    locality_total: int
    portability_hits: int
    portability_total: int
    edits_in_memory: int
    routes: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class MetricReport:
    setting: str
    edit_success: float
    locality: float | None
    portability: float | None
    harmonic_mean: float
    records: list[RecordResult]
    decisions: list[dict[str, Any]] = field(default_factory=list)
    final_stats: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "setting": self.setting,
            "metrics": {
                "edit_success": self.edit_success,
                "locality": self.locality,
                "portability": self.portability,
                "harmonic_mean": self.harmonic_mean,
            },
            "final_memory": self.final_stats,
            "records": [asdict(r) for r in self.records],
            "decisions": self.decisions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


class LocalityReferences:
    """Pre-edit base-model outputs for locality queries, computed once per query."""

    def __init__(self, base: CompletionBackend) -> None:
        self.base = base
        self._cache: dict[str, str] = {}

    def __getitem__(self, query: str) -> str:
        if query not in self._cache:
            self._cache[query] = self.base.complete(query)
        return self._cache[query]

    def prefetch(self, records: Iterable[EvalRecord]) -> LocalityReferences:
        for record in records:
            for query in record.locality_queries:
                self[query]
        return self


def _trace(kind: str, query: str, result: RoutedAnswer) -> dict[str, Any]:
    return {"kind": kind, "query": query, "answer": result.answer, **result.decision.to_dict()}


def evaluate_record(system: EditingSystem, record: EvalRecord, references: LocalityReferences) -> RecordResult:
    routes = []
    result = system.answer(record.edit.query)
    routes.append(_trace("edit", record.edit.query, result))
    es = answer_match(result.answer, record.edit.answer)
    loc_hits = 0
    for query in record.locality_queries:
        result = system.answer(query)
        routes.append(_trace("locality", query, result))
        loc_hits += int(result.answer == references[query])
    port_hits = 0
    for query, target in record.portability_pairs:
        result = system.answer(query)
        routes.append(_trace("portability", query, result))
        port_hits += answer_match(result.answer, target)
    return RecordResult(
        record.id,
        es,
        loc_hits,
        len(record.locality_queries),
        port_hits,
        len(record.portability_pairs),
        system.memory.stats()["edit_count"],
        routes,
    )


def aggregate(setting: str, results: Sequence[RecordResult]) -> MetricReport:
    if not results:
        raise ValueError("no records to evaluate")
    es = 100.0 * sum(r.edit_success for r in results) / len(results)
    loc_total = sum(r.locality_total for r in results)
    port_total = sum(r.portability_total for r in results)
    loc = 100.0 * sum(r.locality_hits for r in results) / loc_total if loc_total else None
    port = 100.0 * sum(r.portability_hits for r in results) / port_total if port_total else None
    present = [v for v in (es, loc, port) if v is not None]
    hm = harmonic_mean(present) if len(present) > 1 else present[0]
    return MetricReport(setting, es, loc, port, hm, list(results))


# --- metric entry points on the current state ---------------------------------


def edit_success(system: EditingSystem, records: Sequence[EvalRecord]) -> float:
    if not records:
        raise ValueError("no records to evaluate")
    hits = sum(answer_match(system.answer(r.edit.query).answer, r.edit.answer) for r in records)
    return 100.0 * hits / len(records)


def locality(
    system: EditingSystem,
    records: Sequence[EvalRecord],
    base_backend: CompletionBackend,
    references: LocalityReferences | None = None,
) -> float | None:
    references = references or LocalityReferences(base_backend)
    queries = [q for r in records for q in r.locality_queries]
    if not queries:
        return None
    hits = sum(system.answer(q).answer == references[q] for q in queries)
    return 100.0 * hits / len(queries)


def portability(system: EditingSystem, records: Sequence[EvalRecord]) -> float | None:
    pairs = [p for r in records for p in r.portability_pairs]
    if not pairs:
        return None
    hits = sum(answer_match(system.answer(q).answer, a) for q, a in pairs)
    return 100.0 * hits / len(pairs)


# --- settings ------------------------------------------------------------------


def run_single(records: Sequence[EvalRecord], system_factory: Callable[[], EditingSystem]) -> MetricReport:
    results, decisions = [], []
    references: LocalityReferences | None = None
    last_stats: dict[str, int] = {}
    for record in records:
        system = system_factory()
        if references is None:
            references = LocalityReferences(system.base)
        references.prefetch([record])
        system.apply_edit(record.edit)
        results.append(evaluate_record(system, record, references))
        decisions.extend(system.decision_log)
        last_stats = system.memory.stats()
    report = aggregate("single", results)
    report.decisions = decisions
    report.final_stats = last_stats
    return report


def run_sequential(records: Sequence[EvalRecord], system: EditingSystem) -> MetricReport:
    references = LocalityReferences(system.base).prefetch(records)
    for record in records:
        system.apply_edit(record.edit)
    results = [evaluate_record(system, record, references) for record in records]
    report = aggregate("sequential", results)
    report.decisions = list(system.decision_log)
    report.final_stats = system.memory.stats()
    return report


def run_incremental(records: Sequence[EvalRecord], system: EditingSystem) -> MetricReport:
    references = LocalityReferences(system.base).prefetch(records)
    results = []
    for record in records:
        system.apply_edit(record.edit)
        results.append(evaluate_record(system, record, references))
    report = aggregate("incremental", results)
    report.decisions = list(system.decision_log)
    report.final_stats = system.memory.stats()
    return report


def run_setting(setting: str, records: Sequence[EvalRecord], system_factory: Callable[[], EditingSystem]) -> MetricReport:
    if setting == "single":
        return run_single(records, system_factory)
    if setting == "sequential":
        return run_sequential(records, system_factory())
    if setting == "incremental":
        return run_incremental(records, system_factory())
    raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")


# --- datasets --------------------------------------------------------------------


def _require_text(obj: Mapping, key: str, lineno: int, path: str) -> str:
    value = obj.get(key) if isinstance(obj, Mapping) else None
    if not isinstance(value, str) or not value.strip():
        raise SchemaError(f"field {path!r} must be a non-empty string", line=lineno, field=path)
    return value


def parse_record(row: Any, lineno: int) -> EvalRecord:
    if not isinstance(row, dict):
        raise SchemaError("record must be an object", line=lineno)
    record_id = row.get("id")
    if not isinstance(record_id, (str, int)) or isinstance(record_id, bool) or str(record_id) == "":
        raise SchemaError("field 'id' is missing or empty", line=lineno, field="id")
    edit = row.get("edit")
    if not isinstance(edit, dict):
        raise SchemaError("field 'edit' must be an object", line=lineno, field="edit")
    query = _require_text(edit, "query", lineno, "edit.query")
    answer = _require_text(edit, "answer", lineno, "edit.answer")

    locality_rows = row.get("locality", [])
    if not isinstance(locality_rows, list):
        raise SchemaError("field 'locality' must be a list", line=lineno, field="locality")
    loc = tuple(_require_text(item, "query", lineno, f"locality[{i}].query") for i, item in enumerate(locality_rows))

    port_rows = row.get("portability", [])
    if not isinstance(port_rows, list):
        raise SchemaError("field 'portability' must be a list", line=lineno, field="portability")
    port = tuple(
        (
            _require_text(item, "query", lineno, f"portability[{i}].query"),
            _require_text(item, "answer", lineno, f"portability[{i}].answer"),
        )
        for i, item in enumerate(port_rows)
    )
    return EvalRecord(Edit(str(record_id), query, answer, 0), loc, port)


def load_dataset(path: str | Path) -> list[EvalRecord]:
    records, seen = [], {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed record: {exc.msg}", line=lineno) from exc
            record = parse_record(row, lineno)
            if record.id in seen:
                raise SchemaError(f"duplicate id {record.id!r} (first on line {seen[record.id]})", line=lineno, field="id")
            seen[record.id] = lineno
            records.append(record)
    return [
        EvalRecord(Edit(r.edit.id, r.edit.query, r.edit.answer, step), r.locality_queries, r.portability_pairs)
        for step, r in enumerate(records, start=1)
    ]


def record_to_dict(record: EvalRecord) -> dict[str, Any]:
    return {
        "id": record.id,
        "edit": {"query": record.edit.query, "answer": record.edit.answer},
        "locality": [{"query": q} for q in record.locality_queries],
        "portability": [{"query": q, "answer": a} for q, a in record.portability_pairs],
    }


def save_dataset(records: Iterable[EvalRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record)) + "\n")


# --- KnowEdit-style conversion -------------------------------------------------

# Field names are not fixed here on purpose: exports differ per dataset and
# release. Pass a mapping that matches the files actually downloaded.
EXAMPLE_FIELD_MAPPING = {
    "id": None,  # None: use the row index
    "query": "prompt",
    "answer": "target_new",
    "locality": "locality",
    "locality_query": "prompt",
    "portability": "portability",
    "portability_query": "prompt",
    "portability_answer": "ground_truth",
}


def _lookup(obj: Any, dotted: str | None) -> Any:
    if dotted is None:
        return None
    for part in dotted.split("."):
        if not isinstance(obj, Mapping) or part not in obj:
            return None
        obj = obj[part]
    return obj


def _flatten(items: Any) -> list[Any]:
    # KnowEdit groups probes by relation: {"Relation_Specificity": [...], ...}
    if items is None:
        return []
    if isinstance(items, Mapping):
        out = []
        for value in items.values():
            out.extend(_flatten(value))
        return out
    if isinstance(items, list):
        return list(items)
    return [items]


def _first_text(value: Any) -> str | None:
    while isinstance(value, list) and value:
        value = value[0]
    return value if isinstance(value, str) and value.strip() else None


def convert_rows(rows: Iterable[Mapping[str, Any]], mapping: Mapping[str, str | None]) -> list[EvalRecord]:
    """Map raw dataset rows onto :class:`EvalRecord` using dotted field paths."""
    records = []
    for index, row in enumerate(rows):
        rid = _lookup(row, mapping.get("id")) if mapping.get("id") else index
        query = _first_text(_lookup(row, mapping["query"]))
        answer = _first_text(_lookup(row, mapping["answer"]))
        if query is None or answer is None:
            raise SchemaError(f"row {index}: no edit query/answer under {mapping['query']!r}/{mapping['answer']!r}")
        loc = []
        for item in _flatten(_lookup(row, mapping.get("locality"))):
            text = _first_text(item) if isinstance(item, (str, list)) else _first_text(_lookup(item, mapping["locality_query"]))
            if text:
                loc.append(text)
        port = []
        for item in _flatten(_lookup(row, mapping.get("portability"))):
            q = _first_text(_lookup(item, mapping["portability_query"]))
            a = _first_text(_lookup(item, mapping["portability_answer"]))
            if q and a:
                port.append((q, a))
        records.append(EvalRecord(Edit(str(rid), query, answer, index + 1), tuple(loc), tuple(port)))
    return records


# --- training samples for the filter ---------------------------------------------


def build_training_samples(records: Sequence[EvalRecord], general_prompts: Sequence[str] = ()) -> list[FilterTrainSample]:
    """Edit, portability, locality and (cycled) general samples for every record.

    General prompts are attached to every record here; ``train_filter``
    subsamples them per record.
    """
    samples = []
    for i, record in enumerate(records):
        edit_text = render_qa(record.edit)
        samples.append(FilterTrainSample.of(record.edit.query, edit_text, "edit"))
        for query, _ in record.portability_pairs:
            samples.append(FilterTrainSample.of(query, edit_text, "portability"))
        for query in record.locality_queries:
            samples.append(FilterTrainSample.of(query, edit_text, "locality"))
        if general_prompts:
            samples.append(FilterTrainSample.of(general_prompts[i % len(general_prompts)], edit_text, "general"))
    return samples
