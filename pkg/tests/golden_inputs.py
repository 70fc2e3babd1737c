"""Inputs shared by the golden tests and the script that regenerates them."""
from mapis.agents import RuleOracleBackend
from mapis.data import default_ontology
from mapis.evaluation import MetricsReport
from mapis.kg import Chunk, Entity, HashingEmbedder, Layer, extract_entities, link_ehr, u_retrieve

EHR_TERM = "oligomenorrhea"
ENTITY_SENTENCE = "Irregular cycles are defined as fewer than 8 cycles per year"
RETRIEVAL_QUERIES = (
    "irregular menstrual cycle definition",
    "hirsutism Ferriman-Gallwey score",
    "exclusion of thyroid disease and prolactin",
    "polycystic ovarian morphology follicle number per ovary ovarian volume ultrasound",
)
THREE_RUNS = [
    MetricsReport("rule-oracle", tp=45, fp=5, fn=10, tn=40),
    MetricsReport("remote-a", tp=50, fp=8, fn=5, tn=37),
    MetricsReport("remote-b", tp=45, fp=5, fn=10, tn=40),
]


def ehr_top3(graph):
    top = Entity("T:golden:oligomenorrhea", EHR_TERM, "Symptom", "infrequent menstrual periods", Layer.TOP,
                 ("ehr:golden#c000",))
    return [[lk.to_entity, round(lk.score, 6)] for lk in link_ehr([top], graph, HashingEmbedder(), k=3)]


def retrieval_lists(graph, query):
    return [[i.entity_id, round(i.score, 6)] for i in u_retrieve(query, graph, HashingEmbedder(), k=5).items]


def entity_extraction():
    chunk = Chunk("golden#c000", "golden", 0, ENTITY_SENTENCE, (0, 1), (0, 1))
    return [{"name": e.name, "type": e.type, "context": e.context}
            for e in extract_entities(chunk, default_ontology(), RuleOracleBackend())]
