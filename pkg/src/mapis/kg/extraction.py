"""Chunk-local entity and relation extraction through an agent backend."""
from __future__ import annotations

import logging
import re
from typing import Any

from ..agents.prompts import assemble_entity_prompt, assemble_relation_prompt
from ..agents.replies import call_with_retry, parse_json_payload
from ..errors import ReplyError
from .graph import Chunk, Entity, Layer, Ontology, Relation

logger = logging.getLogger(__name__)

_LABEL = re.compile(r"^[a-z][a-z0-9_]*$")


def _list_reply(key: str):
    def parse(text: str) -> list:
        obj, _ = parse_json_payload(text)
        if not isinstance(obj, dict) or not isinstance(obj.get(key), list):
            raise ReplyError(f"reply must be an object with a {key!r} list")
        return obj[key]
    return parse


def validate_entities(items: list[Any], chunk: Chunk, ontology: Ontology) -> tuple[list[Entity], list[str]]:
    """Keep proposed entities that are verbatim, typed and described.

    Returns the kept entities (ids local to the chunk) and one message per drop.
    """
    kept: list[Entity] = []
    dropped: list[str] = []
    text = chunk.text.lower()
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            dropped.append(f"{chunk.chunk_id}: entity #{i} is not an object")
            continue
        name = str(item.get("name") or "").strip()
        type_ = item.get("type")
        context = str(item.get("context") or "").strip()
        if not name or name.lower() not in text:
            dropped.append(f"{chunk.chunk_id}: {name!r} does not appear in the chunk")
        elif type_ not in ontology.labels:
            dropped.append(f"{chunk.chunk_id}: {name!r} has type {type_!r} outside the ontology")
        elif not context:
            dropped.append(f"{chunk.chunk_id}: {name!r} has no context")
        else:
            kept.append(Entity(f"{chunk.chunk_id}/e{len(kept)}", name, type_, context, Layer.MIDDLE,
                               (chunk.chunk_id,)))
    return kept, dropped


def extract_entities(chunk: Chunk, ontology: Ontology, backend, retries: int = 1,
                     dropped: list[str] | None = None) -> list[Entity]:
    if not chunk.text.strip():
        return []
    items, _ = call_with_retry(backend, assemble_entity_prompt(chunk, ontology), _list_reply("entities"), retries)
    kept, drops = validate_entities(items, chunk, ontology)
    for msg in drops:
        logger.warning("dropping entity %s", msg)
    if dropped is not None:
        dropped.extend(drops)
    return kept


def validate_relations(items: list[Any], chunk: Chunk, chunk_entities: list[Entity]) -> tuple[list[Relation], list[str]]:
    ids = {e.entity_id for e in chunk_entities}
    kept, dropped = [], []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            dropped.append(f"{chunk.chunk_id}: relation #{i} is not an object")
            continue
        head, tail = item.get("head"), item.get("tail")
        label = str(item.get("relation") or "").strip()
        if head not in ids or tail not in ids:
            dropped.append(f"{chunk.chunk_id}: ({head}, {label}, {tail}) references an entity outside the chunk")
        elif head == tail:
            dropped.append(f"{chunk.chunk_id}: ({head}, {label}, {tail}) is a self-loop")
        elif not _LABEL.match(label):
            dropped.append(f"{chunk.chunk_id}: relation label {label!r} is not snake_case")
        else:
            kept.append(Relation(head, label, tail, chunk.chunk_id))
    return sorted(set(kept)), dropped


def extract_relations(chunk: Chunk, chunk_entities: list[Entity], backend, retries: int = 1,
                      dropped: list[str] | None = None) -> list[Relation]:
    foreign = [e.entity_id for e in chunk_entities if chunk.chunk_id not in e.source_chunks]
    if foreign:
        raise ValueError(f"entities not sourced from {chunk.chunk_id}: {foreign}")
    if len(chunk_entities) < 2:
        return []
    items, _ = call_with_retry(backend, assemble_relation_prompt(chunk, chunk_entities), _list_reply("relations"),
                               retries)
    kept, drops = validate_relations(items, chunk, chunk_entities)
    for msg in drops:
        logger.warning("dropping relation %s", msg)
    if dropped is not None:
        dropped.extend(drops)
    return kept
