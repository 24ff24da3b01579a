"""Command line entry point: ``editroute --config cfg.yaml <command> ...``.

Exit status: 0 success, 2 usage/config, 3 schema, 4 backend, 5 filter not trained.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .augmenter import AugmentedEdit, Edit, EditForm
from .config import Config, build_augmenter, build_embedder, build_system, load_config
from .errors import EditRouteError, SchemaError
from .evaluator import SETTINGS, build_training_samples, load_dataset, run_setting
from .memory import Memory
from .retrieval import TrainConfig, load_samples, train_filter

log = logging.getLogger("editroute")


def read_edits(path: str | Path) -> list[Edit]:
    """Edits as JSONL, either ``{id, query, answer}`` or dataset records ``{id, edit: {...}}``."""
    edits, seen = [], set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed record: {exc.msg}", line=lineno) from exc
            if not isinstance(row, dict):
                raise SchemaError("record must be an object", line=lineno)
            body = row.get("edit", row)
            try:
                edit = Edit(str(row["id"]), body["query"], body["answer"], 0)
            except KeyError as exc:
                raise SchemaError(f"missing field {exc.args[0]!r}", line=lineno, field=exc.args[0]) from exc
            except (TypeError, AttributeError, ValueError) as exc:
                raise SchemaError(str(exc), line=lineno) from exc
            if edit.id in seen:
                raise SchemaError(f"duplicate id {edit.id!r}", line=lineno, field="id")
            seen.add(edit.id)
            edits.append(edit)
    return edits


def write_augmented(rows: Sequence[tuple[Edit, AugmentedEdit]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for edit, aug in rows:
            record = {
                "edit_id": edit.id,
                "query": edit.query,
                "answer": edit.answer,
                "forms": [{"kind": form.label, "text": text} for form, text in aug.forms],
            }
            fh.write(json.dumps(record) + "\n")


def read_augmented(path: str | Path) -> dict[str, AugmentedEdit]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                forms = tuple((EditForm.parse(f["kind"]), f["text"]) for f in row["forms"])
                out[str(row["edit_id"])] = AugmentedEdit(str(row["edit_id"]), forms)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"bad augmented record: {exc}", line=lineno) from exc
    return out


def _snapshot_path(config: Config, override: str | None) -> Path:
    path = Path(override) if override else config.persistence.memory_snapshot_path
    if path is None:
        raise EditRouteError("no snapshot path: set persistence.memory_snapshot_path or pass --snapshot")
    return path


def _load_memory(config: Config, path: Path) -> Memory:
    embedder = build_embedder(config)
    return Memory.load(path, embedder) if path.exists() else Memory.for_embedder(embedder)


# --- commands -----------------------------------------------------------------


def cmd_augment(config: Config, args: argparse.Namespace) -> int:
    augmenter = build_augmenter(config)
    edits = read_edits(args.edits)
    rows = [(edit, augmenter(edit)) for edit in edits]
    write_augmented(rows, args.out)
    if augmenter.cache is not None and config.augmenter.cache_path is not None:
        augmenter.cache.save(config.augmenter.cache_path)
    print(json.dumps({"edits": len(rows), "forms": sum(len(a) for _, a in rows), "out": str(args.out)}))
    return 0


def cmd_edit(config: Config, args: argparse.Namespace) -> int:
    path = _snapshot_path(config, args.snapshot)
    memory = _load_memory(config, path)
    system = build_system(config, memory=memory, strict_filter=False)
    augmented = read_augmented(args.augmented) if args.augmented else {}
    for edit in read_edits(args.edits):
        if edit.id in memory.edits:
            raise SchemaError(f"edit {edit.id!r} is already in memory", field="id")
        system.apply_edit(edit, augmented.get(edit.id))
    memory.snapshot(path)
    print(json.dumps({**memory.stats(), "snapshot": str(path)}))
    return 0


def cmd_query(config: Config, args: argparse.Namespace) -> int:
    if not args.q.strip():
        raise EditRouteError("query must be non-empty")
    path = _snapshot_path(config, args.snapshot) if (args.snapshot or config.persistence.memory_snapshot_path) else None
    memory = _load_memory(config, path) if path else None
    system = build_system(config, memory=memory, strict_filter=False)
    result = system.answer(args.q)
    if args.json:
        print(json.dumps(result.to_dict()))
        return 0
    d = result.decision.to_dict()
    print(f"answer={result.answer}")
    print(f"path={d['path']}")
    if d["matched_edit_id"] is not None:
        print(f"matched_edit_id={d['matched_edit_id']}")
        print(f"similarity={d['similarity']:.6f}")
    print(f"candidates_considered={d['candidates_considered']}")
    print(f"candidates_passed_filter={d['candidates_passed_filter']}")
    return 0


def cmd_train_filter(config: Config, args: argparse.Namespace) -> int:
    samples = load_samples(args.samples) if args.samples else []
    if args.dataset:
        general = []
        if args.general:
            general = [line.strip() for line in Path(args.general).read_text(encoding="utf-8").splitlines() if line.strip()]
        samples.extend(build_training_samples(load_dataset(args.dataset), general))
    if not samples:
        raise EditRouteError("give --samples and/or --dataset")
    base = config.training
    train_cfg = TrainConfig(
        lr=args.lr if args.lr is not None else base.lr,
        epochs=args.epochs if args.epochs is not None else base.epochs,
        seed=args.seed if args.seed is not None else base.seed,
        general_sample_rate=base.general_sample_rate,
        batch_size=base.batch_size,
        threshold=config.retrieval.threshold,
    )
    result = train_filter(samples, build_embedder(config), train_cfg)
    out = Path(args.out) if args.out else config.retrieval.filter_weights_path
    if out is None:
        raise EditRouteError("no output path: pass --out or set retrieval.filter_weights_path")
    result.model.save(out)
    summary = {"samples_used": result.samples_used, "epochs": len(result.losses), "final_loss": result.losses[-1], "out": str(out)}
    if args.loss_log:
        Path(args.loss_log).write_text("\n".join(repr(x) for x in result.losses) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return 0


def cmd_eval(config: Config, args: argparse.Namespace) -> int:
    records = load_dataset(args.dataset)
    if not records:
        raise SchemaError("dataset has no records")
    embedder = build_embedder(config)

    def factory():
        return build_system(config, memory=Memory.for_embedder(embedder))

    report = run_setting(args.setting, records, factory)
    report.write(args.report)
    print(json.dumps({"setting": args.setting, **report.to_dict()["metrics"], "report": str(args.report)}))
    return 0


def cmd_serve(config: Config, args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    host, port = config.server.host_port
    if args.listen:
        host, _, p = args.listen.rpartition(":")
        port = int(p)
    uvicorn.run(create_app(config), host=host or "127.0.0.1", port=port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="editroute", description="Knowledge-edit routing gateway")
    parser.add_argument("--config", required=True, help="YAML/JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="augment an edit file and write the augmented forms")
    p.add_argument("--edits", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("edit", help="apply edits to the memory snapshot")
    p.add_argument("--edits", required=True)
    p.add_argument("--augmented", help="output of `augment`; skips re-augmentation")
    p.add_argument("--snapshot")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("query", help="route one query and print the answer and decision")
    p.add_argument("--q", required=True)
    p.add_argument("--snapshot")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("train-filter", help="train the relevance filter")
    p.add_argument("--samples", help="JSONL of {query, edit_text, label, kind}")
    p.add_argument("--dataset", help="build samples from an evaluation-format dataset")
    p.add_argument("--general", help="text file of general prompts, one per line (with --dataset)")
    p.add_argument("--out")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-log", help="write per-epoch losses here")
    p.set_defaults(func=cmd_train_filter)

    p = sub.add_parser("eval", help="run an editing setting on a dataset")
    p.add_argument("--setting", choices=SETTINGS, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--listen", help="host:port, overrides server.listen_address")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
        return args.func(config, args)
    except EditRouteError as exc:
        print(f"error [{exc.code}]: {exc.message}", file=sys.stderr)
        return exc.exit_status
    except FileNotFoundError as exc:
        print(f"error [bad_request]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
