"""scikit-learn style wrappers so the engine drops into pipelines and model-selection code.

Nothing is learned from data: ``fit`` only resolves configuration (thresholds,
graph, backend).  The wrappers exist for interface compatibility, e.g.
``Pipeline([("map", RecordMapper(mapping)), ("dx", PCOSDiagnosisClassifier())])``.
"""
from __future__ import annotations

from collections.abc import Mapping

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .patient import PatientRecord, ingest_structured, parse_record
from .rules import ThresholdConfig, load_threshold_config
from .workflow import OutcomeKind, UncertainPolicy, run_diagnosis


def _as_records(X) -> list[PatientRecord]:
    out = []
    for item in X:
        if isinstance(item, PatientRecord):
            out.append(item)
        elif isinstance(item, Mapping):
            out.append(parse_record(item))
        else:
            raise TypeError(f"expected PatientRecord or record dict, got {type(item).__name__}")
    return out


class RecordMapper(BaseEstimator, TransformerMixin):
    """Table rows (dicts keyed by column) to PatientRecords through a schema mapping."""

    def __init__(self, schema_mapping=None, id_prefix="row"):
        self.schema_mapping = schema_mapping
        self.id_prefix = id_prefix

    def fit(self, X=None, y=None):
        if self.schema_mapping is None:
            raise ValueError("RecordMapper needs a schema_mapping")
        return self

    def transform(self, X, y=None):
        return [ingest_structured(row, self.schema_mapping, patient_id=f"{self.id_prefix}{n:05d}")
                for n, row in enumerate(X, start=1)]


class PCOSDiagnosisClassifier(BaseEstimator, ClassifierMixin):
    """Binary PCOS call: 1 for a confirmed diagnosis, 0 otherwise.

    INDETERMINATE outcomes map to ``indeterminate_label``; set it to -1 to keep
    them distinguishable.  ``backend`` is an AgentBackend instance or None for
    the offline rule oracle.
    """

    def __init__(self, backend=None, thresholds=None, kg=None, policy="default", k=5, indeterminate_label=0):
        self.backend = backend
        self.thresholds = thresholds
        self.kg = kg
        self.policy = policy
        self.k = k
        self.indeterminate_label = indeterminate_label

    def fit(self, X=None, y=None):
        from .agents import RuleOracleBackend

        if self.thresholds is None:
            self.thresholds_ = ThresholdConfig()
        elif isinstance(self.thresholds, ThresholdConfig):
            self.thresholds_ = self.thresholds
        else:
            self.thresholds_ = load_threshold_config(self.thresholds)
        self.backend_ = self.backend if self.backend is not None else RuleOracleBackend()
        self.policy_ = UncertainPolicy(self.policy)
        self.classes_ = np.array([0, 1])
        return self

    def _check(self):
        if not hasattr(self, "backend_"):
            raise NotFittedError("call fit before predict")

    def diagnose(self, X) -> list:
        """Full ``(state, report)`` pairs, one per record."""
        self._check()
        return [run_diagnosis(r, self.kg, self.backend_, self.thresholds_, self.policy_, k=self.k,
                              session_id=f"est-{r.patient_id}") for r in _as_records(X)]

    def predict(self, X):
        labels = []
        for state, _ in self.diagnose(X):
            kind = state.outcome.kind
            labels.append(self.indeterminate_label if kind is OutcomeKind.INDETERMINATE
                          else int(kind is OutcomeKind.CONFIRMED))
        return np.array(labels, dtype=int)


class KnowledgeGraphBuilder(BaseEstimator, TransformerMixin):
    """``fit`` builds a graph from ``{doc_id: text}``; ``transform`` answers queries against it."""

    def __init__(self, backend=None, embedder=None, k=5, parallelism=1):
        self.backend = backend
        self.embedder = embedder
        self.k = k
        self.parallelism = parallelism

    def fit(self, X, y=None):
        from .agents import RuleOracleBackend
        from .data import default_dictionary, default_ontology
        from .kg import HashingEmbedder, build_graph

        self.embedder_ = self.embedder or HashingEmbedder()
        self.graph_, self.build_report_ = build_graph(dict(X), self.backend or RuleOracleBackend(), self.embedder_,
                                                      default_ontology(), default_dictionary(),
                                                      parallelism=self.parallelism)
        return self

    def transform(self, X, y=None):
        from .kg import u_retrieve

        if not hasattr(self, "graph_"):
            raise NotFittedError("call fit before transform")
        return [u_retrieve(q, self.graph_, self.embedder_, self.k) for q in X]


__all__ = ["KnowledgeGraphBuilder", "PCOSDiagnosisClassifier", "RecordMapper"]
