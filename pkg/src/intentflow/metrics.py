"""Closed-form scoring: LM-call usage cost, claim precision/recall, similarity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .embedding import DEFAULT_DIM, text_similarity


class DefinedZeroDenominator(ZeroDivisionError):
    """Precision or recall requested over an empty claim set."""


def canonical_claim(text: str) -> str:
    return " ".join(text.lower().split())


class ClaimSet(frozenset):
    """A frozenset of canonicalised claim strings."""

    def __new__(cls, claims: Iterable[str] = ()):
        return super().__new__(cls, (canonical_claim(c) for c in claims if c and c.strip()))


def command_claim(room: str, field: str, action: str, magnitude: float | None = None) -> str:
    """One claim per command: the field/action pair scoped to its room and value."""
    parts = [f"room={room}", f"field={field}", f"action={action}"]
    if magnitude is not None:
        parts.append(f"value={float(magnitude):g}")
    return canonical_claim(" ".join(parts))


def claims_from_commands(commands: Iterable[Any]) -> ClaimSet:
    """Build a claim set from Command objects or plain mappings."""
    out = []
    for c in commands:
        if isinstance(c, Mapping):
            out.append(command_claim(c["room"], c["field"], c["action"], c.get("magnitude")))
        else:
            field = getattr(c.field, "value", c.field)
            action = getattr(c.action, "value", c.action)
            out.append(command_claim(c.room, field, action, c.magnitude))
    return ClaimSet(out)


def lm_call_usage_cost(n_calls: int, n_max: int) -> float:
    if n_max <= 0:
        raise ValueError(f"n_max must be positive, got {n_max}")
    if n_calls < 0:
        raise ValueError(f"n_calls must be non-negative, got {n_calls}")
    return -math.expm1(-n_calls / n_max)


def precision(response: ClaimSet, reference: ClaimSet) -> float:
    if not response:
        raise DefinedZeroDenominator("precision of an empty response")
    return len(response & reference) / len(response)


def recall(response: ClaimSet, reference: ClaimSet) -> float:
    if not reference:
        raise DefinedZeroDenominator("recall against an empty reference")
    return len(response & reference) / len(reference)


def similarity_score(solution_text: str, intent_text: str, dim: int = DEFAULT_DIM) -> float:
    return text_similarity(solution_text, intent_text, dim)


@dataclass(frozen=True)
class MetricsTriple:
    usage_cost: float
    similarity: float
    precision: float

    def __post_init__(self) -> None:
        for name in ("usage_cost", "similarity", "precision"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.usage_cost < 1.0:
            raise ValueError(f"usage_cost out of [0, 1): {self.usage_cost}")
