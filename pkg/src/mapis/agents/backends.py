"""Backend contract shared by remote, rule-oracle and replay agents."""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass
from enum import Enum


class BackendKind(str, Enum):
    REMOTE = "Remote"
    RULE_ORACLE = "RuleOracle"
    REPLAY = "Replay"


@dataclass(frozen=True)
class BackendInfo:
    id: str
    kind: BackendKind
    model_name: str | None = None

    def to_dict(self) -> dict:
        out = {"id": self.id, "kind": self.kind.value}
        if self.model_name:
            out["model_name"] = self.model_name
        return out


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_seconds: float = 0.0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.prompt_tokens + other.prompt_tokens, self.completion_tokens + other.completion_tokens,
                     self.wall_seconds + other.wall_seconds)

    def to_dict(self) -> dict:
        return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens,
                "wall_seconds": self.wall_seconds}

    @classmethod
    def from_dict(cls, d) -> "Usage":
        return cls(int(d.get("prompt_tokens", 0)), int(d.get("completion_tokens", 0)),
                   float(d.get("wall_seconds", 0.0)))


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Usage


class AgentBackend:
    """``complete(prompt) -> Completion``; implementations must be thread-safe."""

    info: BackendInfo

    def complete(self, prompt) -> Completion:
        raise NotImplementedError


class InstrumentedBackend(AgentBackend):
    """Wraps a backend and records every call (step, prompt, usage)."""

    def __init__(self, inner: AgentBackend):
        self.inner = inner
        self.info = inner.info
        self.calls: list[tuple] = []
        self._lock = threading.Lock()

    def complete(self, prompt) -> Completion:
        result = self.inner.complete(prompt)
        with self._lock:
            self.calls.append((prompt.step, prompt, result.usage))
        return result

    def count(self, step) -> int:
        return sum(1 for s, _, _ in self.calls if s == step)

    def counts(self) -> Counter:
        return Counter(s for s, _, _ in self.calls)

    def total_usage(self) -> Usage:
        total = Usage()
        for _, _, u in self.calls:
            total = total + u
        return total

    def prompts(self, step=None) -> list[str]:
        return [p.render() for s, p, _ in self.calls if step is None or s == step]
