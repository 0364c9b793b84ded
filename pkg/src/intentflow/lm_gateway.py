"""Single choke point for every language-model call.

Backends implement :class:`Backend`. :class:`ScriptedBackend` answers from a
fixture file so that each pipeline decision is reproducible, and
:class:`CallLedger` counts the calls that feed the LM-call usage cost.

Fixture file format (JSON, UTF-8)::

    {
      "format": "intentflow-fixture/1",
      "responses": [
        {"role": "high_urgency", "key": "meeting-1500",
         "structured": {...}},
        {"role": "personal", "key": "meeting-1500/self-eval",
         "text": "aligned: ..."}
      ]
    }

``key`` matches the ``key=`` line of a prompt body (or the body digest when
the prompt has no such line). Prompts that carry hints are looked up under
``<key>+hints`` so hint-conditioned answers are scripted separately. When
``structured`` is present ``text`` may be omitted; it is then the canonical
JSON serialisation of ``structured`` and, if given, must equal it.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import threading
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

logger = logging.getLogger(__name__)

FIXTURE_FORMAT = "intentflow-fixture/1"
HINT_SUFFIX = "+hints"


class Role(str, enum.Enum):
    PERSONAL = "personal"
    CLASSIFIER = "classifier"
    HIGH_URGENCY = "high_urgency"
    LOW_URGENCY = "low_urgency"
    EVALUATOR = "evaluator"
    LOW_LEVEL = "low_level"
    ENVIRONMENT = "environment"


class UnscriptedPrompt(LookupError):
    """The scripted backend has no response for a prompt key."""

    def __init__(self, key: str):
        super().__init__(key)
        self.key = key


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class Prompt:
    role: Role
    body: str
    hints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.body or not self.body.strip():
            raise ValueError("prompt body must be non-empty")
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "hints", tuple(self.hints))

    def key(self) -> str:
        base = prompt_key(self.body)
        return base + HINT_SUFFIX if self.hints else base

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.role.value.encode())
        h.update(b"\0")
        h.update(self.body.encode("utf-8"))
        for hint in self.hints:
            h.update(b"\0")
            h.update(hint.encode("utf-8"))
        return h.hexdigest()[:16]


def prompt_key(body: str) -> str:
    for line in body.splitlines():
        stripped = line.strip()
        if stripped.startswith("key="):
            return stripped[4:].strip()
    canonical = " ".join(body.split())
    return "sha256:" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def serialize_structured(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class ModelResponse:
    text: str
    structured: Any = None


@dataclass(frozen=True)
class LedgerEntry:
    role: Role
    prompt_digest: str
    timestamp: float


class CallLedger:
    """Append-only record of model calls for one pipeline run.

    Appends are serialised by a lock so concurrent agents can share one ledger.
    """

    def __init__(self) -> None:
        self._entries: list[LedgerEntry] = []
        self._counts: Counter[Role] = Counter()
        self._lock = threading.Lock()

    def append(self, role: Role, prompt_digest: str, timestamp: float = 0.0) -> None:
        with self._lock:
            self._entries.append(LedgerEntry(Role(role), prompt_digest, timestamp))
            self._counts[Role(role)] += 1

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    @property
    def counts(self) -> dict[Role, int]:
        with self._lock:
            return dict(self._counts)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def total_calls(ledger: CallLedger, roles: Iterable[Role | str] | None = None) -> int:
    counts = ledger.counts
    if roles is None:
        return sum(counts.values())
    wanted = {Role(r) for r in roles}
    return sum(n for role, n in counts.items() if role in wanted)


class Backend(ABC):
    @abstractmethod
    def complete(self, prompt: Prompt) -> ModelResponse:
        ...


class ScriptedBackend(Backend):
    """Answers prompts from a ``(role, key) -> response`` table."""

    def __init__(
        self,
        responses: Mapping[tuple[Role, str], ModelResponse],
        validators: Mapping[Role, Callable[[Any], None]] | None = None,
    ):
        self._responses = dict(responses)
        if validators:
            for (role, key), resp in self._responses.items():
                check = validators.get(role)
                if check is not None and resp.structured is not None:
                    try:
                        check(resp.structured)
                    except (KeyError, TypeError, ValueError) as exc:
                        raise FixtureError(f"{role.value}/{key}: {exc}") from exc

    @classmethod
    def from_entries(cls, entries: Iterable[Mapping[str, Any]], validators=None) -> "ScriptedBackend":
        table: dict[tuple[Role, str], ModelResponse] = {}
        for i, raw in enumerate(entries):
            try:
                role = Role(raw["role"])
                key = str(raw["key"])
            except (KeyError, ValueError) as exc:
                raise FixtureError(f"entry {i}: bad role/key: {exc}") from exc
            structured = raw.get("structured")
            text = raw.get("text")
            if structured is not None:
                canonical = serialize_structured(structured)
                if text is None:
                    text = canonical
                elif text != canonical:
                    raise FixtureError(f"entry {i} ({role.value}/{key}): text does not match structured payload")
            if text is None:
                raise FixtureError(f"entry {i} ({role.value}/{key}): needs text or structured")
            if (role, key) in table:
                raise FixtureError(f"duplicate fixture key {role.value}/{key}")
            table[(role, key)] = ModelResponse(text=text, structured=structured)
        return cls(table, validators)

    @classmethod
    def from_file(cls, path: str | Path, validators=None) -> "ScriptedBackend":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FixtureError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        if doc.get("format") != FIXTURE_FORMAT:
            raise FixtureError(f"{path}: expected format {FIXTURE_FORMAT!r}")
        return cls.from_entries(doc.get("responses", []), validators)

    def keys(self) -> list[str]:
        return sorted(f"{r.value}/{k}" for r, k in self._responses)

    def complete(self, prompt: Prompt) -> ModelResponse:
        key = prompt.key()
        try:
            return self._responses[(prompt.role, key)]
        except KeyError:
            raise UnscriptedPrompt(f"{prompt.role.value}/{key}") from None


def invoke(backend: Backend, prompt: Prompt, ledger: CallLedger, timestamp: float = 0.0) -> ModelResponse:
    """Run one model call and record it; failed calls are not recorded."""
    response = backend.complete(prompt)
    ledger.append(prompt.role, prompt.digest(), timestamp)
    logger.debug("lm call %s %s", prompt.role.value, prompt.key())
    return response
