"""Cohort evaluation: batch diagnosis, confusion matrix, cost summary, run tables."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import _canonical
from .errors import BackendError, EvaluationAborted, SchemaError
from .patient import PatientRecord, ingest_structured, parse_record
from .rules import ThresholdConfig
from .workflow import OutcomeKind, UncertainPolicy, run_diagnosis

logger = logging.getLogger(__name__)

POSITIVE_VALUES = frozenset({"1", "y", "yes", "true", "positive", "pos", "pcos"})
NEGATIVE_VALUES = frozenset({"0", "n", "no", "false", "negative", "neg", "control"})


@dataclass
class LabeledCohort:
    records: list[PatientRecord]
    labels: dict[str, bool]  # patient_id -> PCOS positive
    provenance: str = ""

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise SchemaError([f"duplicate patient_id {d!r}" for d in dupes])
        unlabeled = [i for i in ids if i not in self.labels]
        if unlabeled:
            raise SchemaError([f"{i}: no label" for i in unlabeled])

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> bytes:
        return b"".join(
            _canonical.dump_bytes({"label": "positive" if self.labels[r.patient_id] else "negative",
                                   "record": r.to_dict()}) + b"\n"
            for r in self.records
        )


def parse_label(raw: Any) -> bool:
    text = str(raw).strip().lower()
    if text in POSITIVE_VALUES:
        return True
    if text in NEGATIVE_VALUES:
        return False
    raise ValueError(f"label {raw!r} is neither positive nor negative")


def load_cohort_jsonl(path, provenance: str | None = None) -> LabeledCohort:
    records, labels = [], {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        item = json.loads(line)
        try:
            record = parse_record(item["record"])
            labels[record.patient_id] = parse_label(item["label"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"line {n}: {exc}") from None
        records.append(record)
    return LabeledCohort(records, labels, provenance or str(path))


def load_cohort_csv(path, schema_mapping: Mapping[str, Any], label_column: str,
                    provenance: str | None = None) -> LabeledCohort:
    """Rows become records through ``schema_mapping``; row number is the fallback id."""
    records, labels = [], {}
    with open(path, newline="", encoding="utf-8-sig") as fh:
        for n, row in enumerate(csv.DictReader(fh), start=1):
            row = {(k or "").strip(): v for k, v in row.items()}
            if label_column not in row:
                raise SchemaError(f"label column {label_column!r} not in {path}")
            record = ingest_structured(row, schema_mapping, patient_id=f"row{n:05d}")
            records.append(record)
            labels[record.patient_id] = parse_label(row[label_column])
    return LabeledCohort(records, labels, provenance or str(path))


# -- metrics -----------------------------------------------------------------

def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def binary_metrics(tp: int, fp: int, fn: int, tn: int) -> dict[str, float | None]:
    """Accuracy, precision, recall and F1; ``None`` where a denominator is zero."""
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and recall is not None:
        f1 = _ratio(2 * precision * recall, precision + recall)
    return {"accuracy": _ratio(tp + tn, tp + fp + fn + tn), "precision": precision, "recall": recall, "f1": f1}


@dataclass
class MetricsReport:
    label: str
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    indeterminate: int = 0
    failures: int = 0
    total: int = 0
    outcome_counts: dict[str, int] = field(default_factory=dict)
    cost: dict = field(default_factory=dict)

    @property
    def metrics(self) -> dict[str, float | None]:
        return binary_metrics(self.tp, self.fp, self.fn, self.tn)

    @property
    def accuracy(self):
        return self.metrics["accuracy"]

    @property
    def precision(self):
        return self.metrics["precision"]

    @property
    def recall(self):
        return self.metrics["recall"]

    @property
    def f1(self):
        return self.metrics["f1"]

    def to_dict(self) -> dict:
        return {"label": self.label, "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "indeterminate": self.indeterminate, "failures": self.failures, "total": self.total,
                **self.metrics, "outcome_counts": self.outcome_counts, "cost": self.cost}

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        return cls(d["label"], d["tp"], d["fp"], d["fn"], d["tn"], d.get("indeterminate", 0), d.get("failures", 0),
                   d.get("total", d["tp"] + d["fp"] + d["fn"] + d["tn"]), dict(d.get("outcome_counts", {})),
                   dict(d.get("cost", {})))


def predicted_positive(kind: OutcomeKind) -> bool | None:
    """CONFIRMED is positive; EXCLUDED and ALTERNATIVE negative; INDETERMINATE has no call."""
    if kind is OutcomeKind.INDETERMINATE:
        return None
    return kind is OutcomeKind.CONFIRMED


def evaluate_cohort(cohort: LabeledCohort, kg, backend, cfg: ThresholdConfig,
                    policy: UncertainPolicy = UncertainPolicy.DEFAULT, parallelism: int = 1, *,
                    label: str = "run", failure_ceiling: float = 0.1, cases_out=None, embedder=None, k: int = 5,
                    clock=None, config_hash: str | None = None) -> tuple[MetricsReport, list[dict]]:
    """Diagnose every case and score the binary PCOS call.

    Cases whose backend fails are counted as failures and left out of the
    matrix.  Raises :class:`EvaluationAborted` when the failure rate exceeds
    ``failure_ceiling``.  Per-case rows are returned in cohort order and, if
    ``cases_out`` is given, written there as JSON lines.
    """
    kw = {"embedder": embedder, "k": k, "config_hash": config_hash}
    if clock is not None:
        kw["clock"] = clock

    def one(record: PatientRecord) -> dict:
        truth = cohort.labels[record.patient_id]
        row: dict[str, Any] = {"patient_id": record.patient_id, "label": "positive" if truth else "negative"}
        try:
            state, report = run_diagnosis(record, kg, backend, cfg, policy, session_id=f"eval-{record.patient_id}",
                                          **kw)
        except BackendError as exc:
            row.update(status="failure", error=f"{type(exc).__name__}: {exc}")
            return row
        pred = predicted_positive(state.outcome.kind)
        row.update(status="ok", outcome=state.outcome.to_dict(),
                   predicted=None if pred is None else ("positive" if pred else "negative"),
                   total_tokens=report.cost["total_tokens"], wall_seconds=report.cost["wall_seconds"],
                   calls=report.cost["calls"])
        return row

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        rows = list(pool.map(one, cohort.records))
    metrics = summarize(rows, label)
    if cases_out is not None:
        Path(cases_out).write_bytes(b"".join(_canonical.dump_bytes(r) + b"\n" for r in rows))
    if metrics.total and metrics.failures / metrics.total > failure_ceiling:
        raise EvaluationAborted(
            f"{metrics.failures} of {metrics.total} cases failed (ceiling {failure_ceiling:.0%})", metrics)
    return metrics, rows


def summarize(rows: list[dict], label: str = "run") -> MetricsReport:
    """Order-independent reduction of per-case rows into a metrics report."""
    m = MetricsReport(label, total=len(rows))
    tokens, seconds, ok = 0, 0.0, 0
    for row in rows:
        if row["status"] != "ok":
            m.failures += 1
            continue
        ok += 1
        kind = row["outcome"]["kind"]
        m.outcome_counts[kind] = m.outcome_counts.get(kind, 0) + 1
        tokens += row["total_tokens"]
        seconds += row["wall_seconds"]
        pred, truth = row["predicted"], row["label"] == "positive"
        if pred is None:
            m.indeterminate += 1
        elif pred == "positive":
            m.tp += truth
            m.fp += not truth
        else:
            m.fn += truth
            m.tn += not truth
    m.outcome_counts = dict(sorted(m.outcome_counts.items()))
    m.cost = {"mean_tokens": tokens / ok if ok else None, "mean_wall_seconds": seconds / ok if ok else None,
              "total_tokens": tokens}
    return m


# -- comparison tables -------------------------------------------------------------

COLUMNS = (("accuracy", "Acc."), ("precision", "Pre."), ("recall", "Rec."), ("f1", "F1"))


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}"


def compare_runs(runs: list[MetricsReport]) -> str:
    """Markdown table, one row per run sorted by label, best value per column starred (ties share)."""
    if not runs:
        raise ValueError("compare_runs needs at least one run")
    runs = sorted(runs, key=lambda r: r.label)
    best = {}
    for key, _ in COLUMNS:
        vals = [round(r.metrics[key], 12) for r in runs if r.metrics[key] is not None]
        best[key] = max(vals) if vals else None
    lines = ["| Run | " + " | ".join(h for _, h in COLUMNS) + " |", "|---" * (len(COLUMNS) + 1) + "|"]
    for r in runs:
        cells = []
        for key, _ in COLUMNS:
            v = r.metrics[key]
            mark = "*" if v is not None and round(v, 12) == best[key] else ""
            cells.append(_pct(v) + mark)
        lines.append(f"| {r.label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def table_row(report: MetricsReport) -> str:
    """Single row in the Acc./Pre./Rec./F1 percentage format."""
    return f"{report.label}\t" + "\t".join(_pct(report.metrics[k]) for k, _ in COLUMNS)


__all__ = [
    "LabeledCohort", "MetricsReport", "binary_metrics", "compare_runs", "evaluate_cohort", "load_cohort_csv",
    "load_cohort_jsonl", "parse_label", "predicted_positive", "summarize", "table_row",
]
