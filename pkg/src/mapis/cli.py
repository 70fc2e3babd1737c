"""Command-line entry point.

Exit codes: 0 success, 1 usage error (synopsis on stderr), 2 runtime error.
Data goes to stdout or ``--out``; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__, _canonical
from .errors import MapisError

logger = logging.getLogger("mapis")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(data: bytes, out: str | None) -> None:
    if out:
        Path(out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def _abs(path):
    return None if path is None else str(Path(path).resolve())


# -- engine assembly ---------------------------------------------------------

def _engine_config(args):
    from .config import BackendSettings, EngineConfig
    from .workflow import UncertainPolicy

    cfg = EngineConfig.load(args.config) if getattr(args, "config", None) else EngineConfig()
    over = {}
    if getattr(args, "thresholds", None):
        over["thresholds"] = _abs(args.thresholds)
    if getattr(args, "kg", None):
        over["kg"] = _abs(args.kg)
    if getattr(args, "policy", None):
        over["policy"] = UncertainPolicy(args.policy)
    if getattr(args, "k", None) is not None:
        over["k"] = args.k
    if getattr(args, "jobs", None) is not None:
        over["parallelism"] = args.jobs
    backend = {}
    if getattr(args, "backend", None):
        backend["kind"] = args.backend
    if getattr(args, "cassette", None):
        backend["cassette"] = _abs(args.cassette)
    if getattr(args, "model", None):
        backend["model"] = args.model
    if backend:
        over["backend"] = dataclasses.replace(cfg.backend, **backend) if cfg.backend else BackendSettings(**backend)
    return dataclasses.replace(cfg, **over) if over else cfg


def _add_engine_flags(p, *, kg_required=False):
    p.add_argument("--config", help="engine config JSON")
    p.add_argument("--kg", required=kg_required, help="knowledge graph file from 'kg build'")
    p.add_argument("--backend", choices=("rule", "remote", "replay", "record"),
                   help="agent backend (default rule: offline rule oracle)")
    p.add_argument("--cassette", help="cassette file for replay/record backends")
    p.add_argument("--model", help="model name for the remote backend (else MAPIS_MODEL)")
    p.add_argument("--thresholds", help="threshold config JSON")
    p.add_argument("--policy", choices=("default", "strict"), help="handling of Uncertain criteria")
    p.add_argument("-k", type=int, help="retrieval depth")


# -- subcommands -------------------------------------------------------------

def cmd_version(args) -> int:
    print(f"mapis {__version__}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .patient import extract_from_text, ingest_structured, read_records, write_jsonl

    src = Path(args.input)
    if src.suffix == ".csv":
        import csv

        if not args.schema:
            raise UsageError("preprocess: --schema is required for CSV input")
        mapping = json.loads(Path(args.schema).read_text(encoding="utf-8"))
        with src.open(newline="", encoding="utf-8-sig") as fh:
            records = [ingest_structured({(k or "").strip(): v for k, v in row.items()}, mapping,
                                         patient_id=f"row{n:05d}")
                       for n, row in enumerate(csv.DictReader(fh), start=1)]
    elif src.suffix in (".txt", ".md"):
        backend = _engine_config(args).build_backend()
        records = [extract_from_text(src.read_text(encoding="utf-8"), backend, patient_id=args.patient_id or src.stem)]
    else:
        records = read_records(src)
    if len(records) == 1 and src.suffix != ".csv" and not (args.out or "").endswith(".jsonl"):
        data = _canonical.dump_bytes(records[0].to_dict(), indent=2) + b"\n"
    else:
        data = write_jsonl(records)
    _emit(data, args.out)
    logger.info("preprocessed %d record(s)", len(records))
    return EXIT_OK


def cmd_kg_build(args) -> int:
    from .data import default_dictionary, default_ontology
    from .kg import HashingEmbedder, build_graph, read_corpus
    from .kg.embedding import embedder_from_id

    corpus = read_corpus(args.corpus)
    backend = _engine_config(args).build_backend()
    embedder = embedder_from_id(args.embedder) if args.embedder else HashingEmbedder()
    graph, report = build_graph(corpus, backend, embedder, default_ontology(), default_dictionary(),
                                parallelism=args.jobs or 1)
    _emit(graph.to_bytes(), args.out)
    report_bytes = _canonical.dump_bytes(report.to_dict(), indent=2) + b"\n"
    if args.report:
        Path(args.report).write_bytes(report_bytes)
    c = report.counts
    print(f"built graph: {c['chunks']} chunks, {c['entities']} entities, {c['relations']} relations, "
          f"{len(report.unmatched_entities)} unmatched, {len(report.dropped_relations)} dropped relations",
          file=sys.stderr)
    return EXIT_OK


def cmd_kg_query(args) -> int:
    from .kg import KnowledgeGraph, u_retrieve
    from .workflow import _default_embedder

    graph = KnowledgeGraph.load(args.kg)
    result = u_retrieve(args.query, graph, _default_embedder(graph), args.k)
    _emit(_canonical.dump_bytes(result.to_dict(), indent=2) + b"\n", args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .patient import read_records
    from .reporting import render_report_text
    from .store import SessionStore
    from .workflow import run_diagnosis

    engine = _engine_config(args).validate()
    records = read_records(args.patient)
    if len(records) != 1:
        raise UsageError("diagnose: --patient must hold exactly one record (use 'eval' for cohorts)")
    store = SessionStore(args.store) if args.store else None
    try:
        state, report = run_diagnosis(records[0], engine.kg, engine.backend, engine.thresholds,
                                      engine.config.policy, embedder=engine.embedder(), k=engine.config.k,
                                      min_score=engine.config.min_score, session_id=args.session_id,
                                      config_hash=engine.config_hash)
    except MapisError as exc:
        if store is not None and getattr(exc, "state", None) is not None:
            store.save_partial(exc.state, f"{type(exc).__name__}: {exc}")
            print(f"partial audit kept as session {exc.state.session_id}", file=sys.stderr)
        raise
    if store is not None:
        store.save(state, report)
    _emit(render_report_text(report, args.format) + (b"\n" if args.format == "json" else b""), args.out)
    print(f"{report.patient_id}: {report.outcome.label} (session {report.session_id})", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import compare_runs, evaluate_cohort, load_cohort_csv, load_cohort_jsonl

    dataset = Path(args.dataset)
    if dataset.suffix == ".csv":
        if not args.schema or not args.labels:
            raise UsageError("eval: CSV datasets need --schema and --labels")
        mapping = json.loads(Path(args.schema).read_text(encoding="utf-8"))
        cohort = load_cohort_csv(dataset, mapping, args.labels)
    else:
        cohort = load_cohort_jsonl(dataset)
    engine = _engine_config(args).validate()
    metrics, _ = evaluate_cohort(cohort, engine.kg, engine.backend, engine.thresholds, engine.config.policy,
                                 engine.config.parallelism, label=args.label or dataset.stem,
                                 failure_ceiling=args.failure_ceiling, cases_out=args.cases_out,
                                 embedder=engine.embedder(), k=engine.config.k, config_hash=engine.config_hash)
    if args.metrics_out:
        Path(args.metrics_out).write_bytes(_canonical.dump_bytes(metrics.to_dict(), indent=2) + b"\n")
    sys.stdout.write(compare_runs([metrics]))
    m = metrics
    print(f"{m.total} cases: tp={m.tp} fp={m.fp} fn={m.fn} tn={m.tn} indeterminate={m.indeterminate} "
          f"failures={m.failures}", file=sys.stderr)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve
    from .store import SessionStore

    cfg = _engine_config(args)
    engine = cfg.validate()  # fail fast before binding the port
    store = SessionStore(_abs(args.store) if args.store else cfg.resolve(cfg.store))
    serve(engine, store, args.host or cfg.host, args.port if args.port is not None else cfg.port)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mapis", description="Guideline-driven multi-agent PCOS diagnostic engine.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("version", help="print the engine version")
    p.set_defaults(func=cmd_version)

    p = sub.add_parser("preprocess", help="normalize CSV rows, notes or record files into canonical records")
    p.add_argument("--input", required=True, help=".csv (with --schema), .txt/.md notes, or .json/.jsonl records")
    p.add_argument("--schema", help="column mapping JSON for CSV input")
    p.add_argument("--patient-id", help="id for a record extracted from notes")
    p.add_argument("--backend", choices=("rule", "remote", "replay", "record"))
    p.add_argument("--cassette")
    p.add_argument("--model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_preprocess)

    kg = sub.add_parser("kg", help="knowledge graph build and query")
    kg.set_defaults(usage_parser=kg)
    kg_sub = kg.add_subparsers(dest="kg_command", metavar="ACTION")
    p = kg_sub.add_parser("build", help="build a graph from a corpus directory")
    p.add_argument("--corpus", required=True, help="directory of .md/.txt guideline documents")
    p.add_argument("--out", help="graph file (default stdout)")
    p.add_argument("--report", help="write the build report here")
    p.add_argument("--embedder", help="embedder id, e.g. hash-ngram-v1:dim=256:n=3:seed=0")
    p.add_argument("--backend", choices=("rule", "remote", "replay", "record"))
    p.add_argument("--cassette")
    p.add_argument("--model")
    p.add_argument("--jobs", type=int, help="parallel chunk extractions")
    p.set_defaults(func=cmd_kg_build)
    p = kg_sub.add_parser("query", help="U-retrieval against a built graph")
    p.add_argument("--kg", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_kg_query)

    p = sub.add_parser("diagnose", help="diagnose one patient record")
    p.add_argument("--patient", required=True, help="record JSON")
    _add_engine_flags(p)
    p.add_argument("--format", choices=("json", "markdown"), default="json")
    p.add_argument("--store", help="session store directory")
    p.add_argument("--session-id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("eval", help="evaluate a labelled cohort")
    p.add_argument("--dataset", required=True, help=".csv (with --schema/--labels) or labelled .jsonl")
    p.add_argument("--schema", help="column mapping JSON for CSV datasets")
    p.add_argument("--labels", help="label column for CSV datasets")
    _add_engine_flags(p)
    p.add_argument("--jobs", type=int, help="cases diagnosed in parallel")
    p.add_argument("--metrics-out")
    p.add_argument("--cases-out", help="per-case JSON lines")
    p.add_argument("--label", help="run label in the metrics table")
    p.add_argument("--failure-ceiling", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP service")
    _add_engine_flags(p)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--store", help="session store directory")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    func = getattr(args, "func", None)
    if func is None:
        target = getattr(args, "usage_parser", parser)
        target.print_usage(sys.stderr)
        print(f"{target.prog}: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MapisError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
