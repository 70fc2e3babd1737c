"""Append-only session store: one canonical JSON file per session id."""
from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

from . import _canonical
from .errors import SessionExists, StorageError
from .reporting import DiagnosticReport

STORE_FORMAT = "mapis.stored/1"
_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$")


def _check_id(session_id: str) -> str:
    if not isinstance(session_id, str) or not _SAFE_ID.match(session_id):
        raise StorageError(f"session id {session_id!r} is not storable")
    return session_id


class SessionStore:
    """Directory of ``<session_id>.json`` files.

    Writes go to a temp file first and are published with ``os.link``, which
    fails if the target already exists; a file is therefore either absent or
    complete, and two writers racing on one id cannot both win.
    """

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create session store {self.root}: {exc.strerror}") from None

    def path(self, session_id: str) -> Path:
        return self.root / f"{_check_id(session_id)}.json"

    def _publish(self, session_id: str, doc: dict) -> Path:
        target = self.path(session_id)
        data = _canonical.dump_bytes(doc, indent=2) + b"\n"
        try:
            fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=self.root)
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.link(tmp, target)
            finally:
                os.unlink(tmp)
        except FileExistsError:
            raise SessionExists(f"session {session_id} already stored") from None
        except OSError as exc:
            raise StorageError(f"cannot write session {session_id}: {exc.strerror}") from None
        return target

    def save(self, state, report: DiagnosticReport) -> str:
        """Persist a finished session; returns its id."""
        if state.outcome is None:
            raise StorageError(f"session {state.session_id} has no outcome yet")
        self._publish(state.session_id, {"format": STORE_FORMAT, "status": "complete",
                                         "state": state.to_dict(), "report": report.to_dict()})
        return state.session_id

    def save_partial(self, state, error: str) -> str:
        """Persist the audit trail of a session that failed before reporting."""
        self._publish(state.session_id, {"format": STORE_FORMAT, "status": "failed", "error": error,
                                         "state": state.to_dict(), "report": None})
        return state.session_id

    def load_document(self, session_id: str) -> dict:
        path = self.path(session_id)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise KeyError(session_id) from None
        except (OSError, ValueError) as exc:
            raise StorageError(f"cannot read session {session_id}: {exc}") from None
        if doc.get("format") != STORE_FORMAT:
            raise StorageError(f"session {session_id}: unknown format {doc.get('format')!r}")
        return doc

    def load_report(self, session_id: str) -> DiagnosticReport | None:
        doc = self.load_document(session_id)
        return None if doc["report"] is None else DiagnosticReport.from_dict(doc["report"])

    def __contains__(self, session_id: str) -> bool:
        try:
            return self.path(session_id).exists()
        except StorageError:
            return False

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.json"))


__all__ = ["STORE_FORMAT", "SessionStore"]
