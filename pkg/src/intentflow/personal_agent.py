"""User-side agent: intent parsing, preference recall from case memory,
case write-back and self-evaluation."""

from __future__ import annotations

import datetime as dt
import enum
import hashlib
import json
import logging
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .embedding import DEFAULT_DIM, EmbeddingVector, cosine, embed
from .lm_gateway import Backend, CallLedger, Prompt, Role, invoke
from .model import Intent, PreferenceSet

logger = logging.getLogger(__name__)

RECALL_SIMILARITY = 0.5
RECALL_WINDOW_S = 3600


def iso(ts: int) -> str:
    return dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("timestamp must be a number or ISO-8601 string")
    if isinstance(value, (int, float)):
        return int(value)
    if isinstance(value, str):
        parsed = dt.datetime.fromisoformat(value.replace("Z", "+00:00"))
        if parsed.tzinfo is None:
            parsed = parsed.replace(tzinfo=dt.timezone.utc)
        return int(parsed.timestamp())
    raise ValueError(f"not a timestamp: {value!r}")


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    user_id: str
    plan_type: str
    timestamp: int
    preferences: PreferenceSet
    execution_details: str
    plan_embedding: EmbeddingVector

    def to_json(self) -> str:
        return json.dumps({
            "case_id": self.case_id,
            "user_id": self.user_id,
            "plan_type": self.plan_type,
            "timestamp": self.timestamp,
            "preferences": self.preferences.to_dict(),
            "execution_details": self.execution_details,
            "plan_embedding": self.plan_embedding.to_list(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CaseRecord":
        d = json.loads(line)
        return cls(
            case_id=d["case_id"],
            user_id=d["user_id"],
            plan_type=d["plan_type"],
            timestamp=int(d["timestamp"]),
            preferences=PreferenceSet.from_dict(d["preferences"]),
            execution_details=d["execution_details"],
            plan_embedding=EmbeddingVector.from_list(d["plan_embedding"]),
        )


def validate_personal_payload(payload: Any) -> None:
    """Fixture check for personal-role payloads (extraction or self-evaluation)."""
    if not isinstance(payload, Mapping):
        raise ValueError("personal payload must be an object")
    if "verdict" in payload:
        Verdict(payload["verdict"])
        if not str(payload.get("justification", "")).strip():
            raise ValueError("self-evaluation needs a justification")
        return
    if not str(payload.get("plan_type", "")).strip():
        raise ValueError("intent extraction needs plan_type")
    parse_timestamp(payload["deadline"])
    if payload.get("preferences") is not None:
        PreferenceSet.from_dict(payload["preferences"])


def default_intent_id(raw_text: str, user_id: str, now: int) -> str:
    digest = hashlib.sha256(f"{user_id}\0{now}\0{raw_text}".encode("utf-8")).hexdigest()
    return "intent-" + digest[:10]


def analyze_intent(
    raw_text: str,
    user_id: str,
    now: int,
    backend: Backend,
    ledger: CallLedger,
    intent_id: Optional[str] = None,
) -> Intent:
    if not raw_text or not raw_text.strip():
        raise ValueError("intent text must be non-empty")
    intent_id = intent_id or default_intent_id(raw_text, user_id, now)
    body = (
        f"key={intent_id}\n"
        "Extract the plan type, deadline and any explicit preferences.\n"
        f"user: {user_id}\nnow: {iso(now)}\ntext: {raw_text}"
    )
    response = invoke(backend, Prompt(Role.PERSONAL, body), ledger, now)
    payload = response.structured
    if not isinstance(payload, Mapping):
        raise ValueError(f"personal agent returned no structured intent for {intent_id}")
    prefs = payload.get("preferences")
    preferences = PreferenceSet.from_dict(prefs) if prefs else None
    if preferences is not None and preferences.is_empty():
        preferences = None
    return Intent(
        id=intent_id,
        user_id=user_id,
        plan_type=str(payload["plan_type"]),
        deadline=parse_timestamp(payload["deadline"]),
        submitted_at=now,
        raw_text=raw_text,
        preferences=preferences,
    )


def find_matching_case(
    memory: Sequence[CaseRecord],
    intent: Intent,
    now: int,
    threshold: float = RECALL_SIMILARITY,
    window_s: int = RECALL_WINDOW_S,
    dim: int = DEFAULT_DIM,
) -> Optional[CaseRecord]:
    """Most recent case with similarity > threshold and age < window."""
    query = embed(intent.plan_type, dim)
    best = None
    best_key = None
    for index, record in enumerate(memory):
        if record.user_id != intent.user_id:
            continue
        if not now - record.timestamp < window_s:
            continue
        if not cosine(query, record.plan_embedding) > threshold:
            continue
        key = (record.timestamp, index)
        if best_key is None or key > best_key:
            best, best_key = record, key
    return best


def recall_preferences(
    memory: Sequence[CaseRecord],
    intent: Intent,
    now: int,
    threshold: float = RECALL_SIMILARITY,
    window_s: int = RECALL_WINDOW_S,
    dim: int = DEFAULT_DIM,
) -> Optional[PreferenceSet]:
    if intent.preferences is not None:
        raise ValueError("recall only applies to intents without explicit preferences")
    record = find_matching_case(memory, intent, now, threshold, window_s, dim)
    return record.preferences if record is not None else None


def commit_case(
    memory: Sequence[CaseRecord],
    intent: Intent,
    execution_details: str,
    dim: int = DEFAULT_DIM,
) -> list[CaseRecord]:
    record = CaseRecord(
        case_id=intent.id,
        user_id=intent.user_id,
        plan_type=intent.plan_type,
        timestamp=intent.submitted_at,
        preferences=intent.preferences or PreferenceSet(),
        execution_details=execution_details,
        plan_embedding=embed(intent.plan_type, dim),
    )
    return [*memory, record]


class PersonalMemory:
    """One user's case memory, optionally persisted as an append-only JSONL file."""

    def __init__(self, user_id: str, path: str | Path | None = None, dim: int = DEFAULT_DIM):
        self.user_id = user_id
        self.dim = dim
        self.path = Path(path) if path is not None else None
        self._records: list[CaseRecord] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                self._records = [CaseRecord.from_json(line) for line in fh if line.strip()]

    @property
    def records(self) -> list[CaseRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def commit(self, intent: Intent, execution_details: str) -> CaseRecord:
        with self._lock:
            self._records = commit_case(self._records, intent, execution_details, self.dim)
            record = self._records[-1]
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(record.to_json() + "\n")
            return record


class Verdict(str, enum.Enum):
    ALIGNED = "aligned"
    MISALIGNED = "misaligned"


@dataclass(frozen=True)
class SelfEvaluation:
    verdict: Verdict
    justification: str


def self_evaluate(
    intent: Intent,
    response_text: str,
    recalled: Optional[CaseRecord],
    backend: Backend,
    ledger: CallLedger,
    now: int = 0,
) -> SelfEvaluation:
    """Check the system's response against the original intent.

    When preferences were inherited from ``recalled`` the justification always
    names that case.
    """
    lines = [
        f"key={intent.id}/self-eval",
        "Judge whether the response satisfies the intent.",
        f"intent: {intent.raw_text}",
        f"response: {response_text}",
    ]
    if recalled is not None:
        lines.append(f"preferences inherited from case {recalled.case_id}; justify the retrieval")
    response = invoke(backend, Prompt(Role.PERSONAL, "\n".join(lines)), ledger, now)
    payload = response.structured
    if isinstance(payload, Mapping) and "verdict" in payload:
        verdict = Verdict(payload["verdict"])
        justification = str(payload.get("justification", "")).strip()
    else:
        head, _, rest = response.text.partition(":")
        verdict = Verdict(head.strip().lower())
        justification = rest.strip()
    if not justification:
        raise ValueError(f"self-evaluation for {intent.id} lacks a justification")
    if recalled is not None and recalled.case_id not in justification:
        justification = f"{justification} (preferences retrieved from case {recalled.case_id})"
    return SelfEvaluation(verdict, justification)


def with_preferences(intent: Intent, preferences: Optional[PreferenceSet]) -> Intent:
    return replace(intent, preferences=preferences)
