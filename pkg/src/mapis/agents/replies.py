"""Parsing of structured agent replies.

Only two syntactic repairs are attempted (code-fence stripping and
trailing-comma removal).  Anything else is a :class:`ReplyError`.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

from ..errors import ReplyError
from ..rules import CriterionStatus

_FENCE = re.compile(r"^\s*```[A-Za-z0-9_-]*\s*\n?(.*?)\n?\s*```\s*$", re.S)
_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


@dataclass(frozen=True)
class CriterionReply:
    status: CriterionStatus
    reasoning: str


@dataclass
class AgentReply:
    criteria: dict[str, CriterionReply]
    parse_diagnostics: list[str] = field(default_factory=list)


def parse_json_payload(raw: str) -> tuple[Any, list[str]]:
    diagnostics: list[str] = []
    text = raw.strip()
    m = _FENCE.match(text)
    if m:
        text = m.group(1).strip()
        diagnostics.append("repaired: stripped markdown code fences")
    try:
        return json.loads(text), diagnostics
    except ValueError:
        pass
    fixed = _TRAILING_COMMA.sub(r"\1", text)
    if fixed != text:
        try:
            obj = json.loads(fixed)
        except ValueError:
            pass
        else:
            diagnostics.append("repaired: removed trailing commas")
            return obj, diagnostics
    raise ReplyError(f"reply is not valid JSON: {raw[:120]!r}")


def parse_reply(raw: str, expected_keys) -> AgentReply:
    obj, diagnostics = parse_json_payload(raw)
    if not isinstance(obj, dict):
        raise ReplyError("reply must be a JSON object")
    expected = list(expected_keys)
    missing = [k for k in expected if k not in obj]
    extra = sorted(k for k in obj if k not in expected)
    if missing or extra:
        raise ReplyError(f"reply keys do not match schema (missing {missing}, unexpected {extra})")
    criteria = {}
    for key in expected:
        item = obj[key]
        if not isinstance(item, dict) or "status" not in item or "reasoning" not in item:
            raise ReplyError(f"{key}: needs 'status' and 'reasoning'")
        try:
            status = CriterionStatus.parse(item["status"])
        except ValueError as exc:
            raise ReplyError(f"{key}: {exc}") from None
        if status.value != item["status"]:
            diagnostics.append(f"canonicalized status {item['status']!r} -> {status.value!r} for {key}")
        if not isinstance(item["reasoning"], str):
            raise ReplyError(f"{key}: reasoning must be a string")
        criteria[key] = CriterionReply(status, item["reasoning"])
    return AgentReply(criteria, diagnostics)


def call_with_retry(backend, prompt, parse, retries: int = 1):
    """Call ``backend`` and ``parse`` its text, re-asking with a reminder on ReplyError.

    Returns ``(parsed, calls)`` where ``calls`` lists every ``(prompt, completion)``
    made, so callers can account usage for failed attempts too.
    """
    calls = []
    while True:
        completion = backend.complete(prompt)
        calls.append((prompt, completion))
        try:
            return parse(completion.text), calls
        except ReplyError as exc:
            if len(calls) > retries:
                exc.calls = calls
                raise
            prompt = prompt.with_reminder()
