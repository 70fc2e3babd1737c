"""Record/replay cassettes keyed by the hash of the rendered prompt.

A cassette is JSON-lines of ``{prompt_hash, role, step, reply, usage}``.
Replay never falls through to a live call: an unknown prompt raises
:class:`CassetteMiss`.
"""
from __future__ import annotations

import json
import threading
from pathlib import Path

from .. import _canonical
from ..errors import BackendError, CassetteMiss
from .backends import AgentBackend, BackendInfo, BackendKind, Completion, Usage


class Cassette:
    def __init__(self, entries=()):
        self._entries: dict[str, dict] = {}
        for e in entries:
            self._entries[e["prompt_hash"]] = e

    @classmethod
    def load(cls, path) -> "Cassette":
        path = Path(path)
        if not path.exists():
            raise BackendError(f"cassette {path} does not exist")
        entries = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                e = json.loads(line)
                e["prompt_hash"], e["reply"]  # noqa: B018 - presence check
            except (ValueError, KeyError, TypeError):
                raise BackendError(f"{path}:{n}: malformed cassette entry") from None
            entries.append(e)
        return cls(entries)

    def get(self, prompt_hash: str) -> dict | None:
        return self._entries.get(prompt_hash)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, prompt_hash) -> bool:
        return prompt_hash in self._entries


class ReplayBackend(AgentBackend):
    def __init__(self, cassette: Cassette | str | Path):
        if not isinstance(cassette, Cassette):
            cassette = Cassette.load(cassette)
        self.cassette = cassette
        self.info = BackendInfo("replay", BackendKind.REPLAY)

    def complete(self, prompt) -> Completion:
        h = prompt.prompt_hash()
        entry = self.cassette.get(h)
        if entry is None:
            raise CassetteMiss(f"no cassette entry for {prompt.step.value} prompt {h[:12]}")
        return Completion(entry["reply"], Usage.from_dict(entry.get("usage", {})))


class RecordingBackend(AgentBackend):
    """Forwards to ``inner`` and appends every exchange to a cassette file."""

    def __init__(self, inner: AgentBackend, path):
        self.inner = inner
        self.path = Path(path)
        self.info = inner.info
        self._lock = threading.Lock()

    def complete(self, prompt) -> Completion:
        result = self.inner.complete(prompt)
        entry = {
            "prompt_hash": prompt.prompt_hash(),
            "role": prompt.role.value,
            "step": prompt.step.value,
            "reply": result.text,
            "usage": result.usage.to_dict(),
        }
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(_canonical.dumps(entry) + "\n")
        return result
