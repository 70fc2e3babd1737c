from .backends import AgentBackend, BackendInfo, BackendKind, Completion, InstrumentedBackend, Usage
from .oracle import RuleOracleBackend
from .prompts import PromptSpec, assemble_prompt
from .replay import Cassette, RecordingBackend, ReplayBackend
from .replies import AgentReply, parse_reply
from .roles import STEP_SPECS, AgentRole, Step

__all__ = [
    "AgentBackend", "AgentReply", "AgentRole", "BackendInfo", "BackendKind", "Cassette", "Completion",
    "InstrumentedBackend", "PromptSpec", "RecordingBackend", "ReplayBackend", "RuleOracleBackend", "STEP_SPECS",
    "Step", "Usage", "assemble_prompt", "parse_reply",
]
