"""Building-side decision making.

Urgency classification routes an intent either to a fast single-plan path
or to a deliberate path that recalls similar past solutions, generates
several candidate plans, scores them (LM-call cost, similarity to the
intent, claim precision), keeps the Pareto front and asks an evaluator to
pick one. The evaluator's verdict is written back to solution memory so
later, similar intents receive it as prompt hints.
"""

from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional, Sequence

from .campus_sim import CampusSnapshot
from .embedding import DEFAULT_DIM, EmbeddingVector, cosine, embed
from .lm_gateway import Backend, CallLedger, Prompt, Role, invoke
from .metrics import (
    ClaimSet,
    DefinedZeroDenominator,
    MetricsTriple,
    claims_from_commands,
    lm_call_usage_cost,
    precision,
    similarity_score,
)
from .model import Intent

logger = logging.getLogger(__name__)

THETA1_SECONDS = 7200.0
THETA2 = 0.7
DEFAULT_CANDIDATES = 3

SUBTASK_KINDS = ("room_query", "booking", "temperature", "light")


class UrgencyLevel(str, enum.Enum):
    HIGH = "high"
    LOW = "low"
    STALE = "stale"


class CriteriaLabel(str, enum.Enum):
    ENVIRONMENT_ANALYSIS = "environment_analysis"
    PREFERENCE_ALIGNMENT = "preference_alignment"
    NATURAL_ADJUSTMENT = "natural_adjustment"


CRITERIA_ORDER = tuple(CriteriaLabel)


@dataclass(frozen=True)
class UrgencyLabel:
    level: UrgencyLevel
    delta_seconds: float


def classify_urgency(intent: Intent, now: float, theta1_seconds: float = THETA1_SECONDS) -> UrgencyLabel:
    if theta1_seconds <= 0:
        raise ValueError("theta1 must be positive")
    delta = intent.deadline - now
    if delta <= 0:
        level = UrgencyLevel.STALE
    elif delta < theta1_seconds:
        level = UrgencyLevel.HIGH
    else:
        level = UrgencyLevel.LOW
    return UrgencyLabel(level, float(delta))


# -- plans -----------------------------------------------------------------

@dataclass(frozen=True)
class SubTask:
    id: str
    description: str
    kind: str
    stage: int = 0
    depends_on: frozenset[str] = frozenset()
    requires_lm_call: bool = True

    def __post_init__(self) -> None:
        if self.kind not in SUBTASK_KINDS:
            raise ValueError(f"sub-task {self.id}: unknown kind {self.kind!r}")
        if self.stage < 0:
            raise ValueError(f"sub-task {self.id}: negative stage")
        object.__setattr__(self, "depends_on", frozenset(self.depends_on))


@dataclass(frozen=True)
class Solution:
    id: str
    intent_id: str
    sub_tasks: tuple[SubTask, ...]
    criteria_label: CriteriaLabel
    narrative: str
    planned_commands: tuple[Mapping[str, Any], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "criteria_label", CriteriaLabel(self.criteria_label))
        object.__setattr__(self, "sub_tasks", tuple(self.sub_tasks))
        object.__setattr__(self, "planned_commands", tuple(dict(c) for c in self.planned_commands))
        if not self.sub_tasks:
            raise ValueError(f"solution {self.id} has no sub-tasks")
        by_id = {t.id: t for t in self.sub_tasks}
        if len(by_id) != len(self.sub_tasks):
            raise ValueError(f"solution {self.id}: duplicate sub-task ids")
        for t in self.sub_tasks:
            for dep in t.depends_on:
                if dep not in by_id:
                    raise ValueError(f"solution {self.id}: {t.id} depends on unknown {dep}")
                if by_id[dep].stage >= t.stage:
                    raise ValueError(f"solution {self.id}: {t.id} must sit above its dependency {dep}")
        if self.lm_call_count < 1:
            raise ValueError(f"solution {self.id} makes no LM calls")

    @property
    def lm_call_count(self) -> int:
        return sum(1 for t in self.sub_tasks if t.requires_lm_call)

    @property
    def hierarchy_depth(self) -> int:
        return 1 + max(t.stage for t in self.sub_tasks)

    def stages(self) -> list[list[SubTask]]:
        """Sub-tasks grouped by stage; each group may run in parallel."""
        groups: list[list[SubTask]] = [[] for _ in range(self.hierarchy_depth)]
        for t in sorted(self.sub_tasks, key=lambda t: (t.stage, t.id)):
            groups[t.stage].append(t)
        return groups

    def claims(self) -> ClaimSet:
        return claims_from_commands(self.planned_commands)

    def summary(self) -> str:
        steps = "; ".join(f"[{t.stage}] {t.description}" for t in sorted(self.sub_tasks, key=lambda t: (t.stage, t.id)))
        return f"{self.id} ({self.criteria_label.value}): {self.narrative} | {steps}"


def _layer(raw_tasks: Sequence[Mapping[str, Any]]) -> dict[str, int]:
    deps = {str(t["id"]): [str(d) for d in t.get("depends_on", [])] for t in raw_tasks}
    stages: dict[str, int] = {}

    def visit(tid: str, trail: tuple[str, ...]) -> int:
        if tid in stages:
            return stages[tid]
        if tid in trail:
            raise ValueError(f"dependency cycle through {tid}")
        if tid not in deps:
            raise ValueError(f"unknown dependency {tid}")
        stage = 1 + max((visit(d, trail + (tid,)) for d in deps[tid]), default=-1)
        stages[tid] = stage
        return stage

    for tid in deps:
        visit(tid, ())
    return stages


def solution_from_payload(payload: Mapping[str, Any], intent_id: str) -> Solution:
    """Parse a planner payload. Stages default to the dependency layering."""
    raw_tasks = payload["sub_tasks"]
    derived = _layer(raw_tasks)
    tasks = tuple(
        SubTask(
            id=str(t["id"]),
            description=str(t["description"]),
            kind=str(t["kind"]),
            stage=int(t.get("stage", derived[str(t["id"])])),
            depends_on=frozenset(str(d) for d in t.get("depends_on", [])),
            requires_lm_call=bool(t.get("requires_lm_call", True)),
        )
        for t in raw_tasks
    )
    solution = Solution(
        id=str(payload["id"]),
        intent_id=intent_id,
        sub_tasks=tasks,
        criteria_label=payload.get("criteria_label", CriteriaLabel.ENVIRONMENT_ANALYSIS),
        narrative=str(payload.get("narrative", "")),
        planned_commands=tuple(payload.get("planned_commands", ())),
    )
    for name, actual in (("lm_call_count", solution.lm_call_count), ("hierarchy_depth", solution.hierarchy_depth)):
        if name in payload and int(payload[name]) != actual:
            raise ValueError(f"solution {solution.id}: declared {name} {payload[name]} != {actual}")
    return solution


def validate_plan_payload(payload: Any) -> None:
    if not isinstance(payload, Mapping):
        raise ValueError("plan payload must be an object")
    solution = solution_from_payload(payload, "fixture")
    solution.claims()


def _intent_block(intent: Intent, campus: Optional[CampusSnapshot]) -> list[str]:
    prefs = intent.preferences.to_dict() if intent.preferences else None
    lines = [
        f"intent: {intent.raw_text}",
        f"plan_type: {intent.plan_type}",
        f"deadline: {intent.deadline}",
        f"preferences: {prefs}",
    ]
    if campus is not None:
        lines.append(f"campus: {len(campus.rooms)} rooms as of {campus.as_of}")
    return lines


def plan_high_urgency(
    intent: Intent,
    campus: Optional[CampusSnapshot],
    backend: Backend,
    ledger: CallLedger,
    now: Optional[float] = None,
    theta1_seconds: float = THETA1_SECONDS,
) -> Solution:
    """One minimal plan. Passing ``now`` enforces the high-urgency precondition."""
    if now is not None:
        label = classify_urgency(intent, now, theta1_seconds)
        if label.level is not UrgencyLevel.HIGH:
            raise ValueError(f"intent {intent.id} is {label.level.value}, not high urgency")
    body = "\n".join([
        f"key={intent.id}",
        "Produce one minimal plan; group independent sub-tasks on the same stage.",
        *_intent_block(intent, campus),
    ])
    response = invoke(backend, Prompt(Role.HIGH_URGENCY, body), ledger, now or 0)
    return solution_from_payload(response.structured, intent.id)


# -- evaluator verdicts and solution memory ---------------------------------

@dataclass(frozen=True)
class EvaluatorVerdict:
    selected_solution_id: Optional[str]
    reason: str
    factors: tuple[str, ...] = ()
    feedback: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.selected_solution_id is None and not (self.feedback and self.feedback.strip()):
            raise ValueError("a verdict without a selection must carry feedback")


def verdict_from_payload(payload: Mapping[str, Any]) -> EvaluatorVerdict:
    selected = payload.get("selected")
    return EvaluatorVerdict(
        selected_solution_id=str(selected) if selected is not None else None,
        reason=str(payload.get("reason", "")),
        factors=tuple(str(f) for f in payload.get("factors", ())),
        feedback=payload.get("feedback"),
    )


def validate_verdict_payload(payload: Any) -> None:
    if not isinstance(payload, Mapping):
        raise ValueError("verdict payload must be an object")
    verdict_from_payload(payload)


@dataclass(frozen=True)
class SolutionMemoryEntry:
    intent_text: str
    intent_embedding: EmbeddingVector
    best_solution: Optional[Solution]
    verdict: EvaluatorVerdict
    stored_at: int
    intent_id: str = ""


class SolutionMemory:
    """Append-only store; readers get a consistent snapshot (prefix)."""

    def __init__(self, entries: Iterable[SolutionMemoryEntry] = ()):
        self._entries = list(entries)
        self._lock = threading.Lock()

    def append(self, entry: SolutionMemoryEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    def snapshot(self) -> list[SolutionMemoryEntry]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def __iter__(self):
        return iter(self.snapshot())


@dataclass(frozen=True)
class SolutionHint:
    entry: SolutionMemoryEntry
    similarity: float

    @property
    def solution(self) -> Optional[Solution]:
        return self.entry.best_solution

    @property
    def verdict(self) -> EvaluatorVerdict:
        return self.entry.verdict

    def prompt_hints(self) -> tuple[str, ...]:
        hints = []
        if self.solution is not None:
            hints.append(f"solution: {self.solution.summary()}")
        hints.append(f"reason: {self.verdict.reason}")
        hints.append(f"factors: {'; '.join(self.verdict.factors)}")
        if self.verdict.feedback:
            hints.append(f"feedback: {self.verdict.feedback}")
        return tuple(hints)


def recall_solution_hints(
    memory: Iterable[SolutionMemoryEntry],
    intent: Intent,
    theta2: float = THETA2,
    dim: int = DEFAULT_DIM,
) -> Optional[SolutionHint]:
    """Highest-similarity entry at or above ``theta2``; most recent wins ties."""
    query = embed(intent.raw_text, dim)
    best: Optional[SolutionHint] = None
    best_key = None
    for index, entry in enumerate(memory):
        sim = cosine(query, entry.intent_embedding)
        if sim < theta2:
            continue
        key = (sim, entry.stored_at, index)
        if best_key is None or key > best_key:
            best, best_key = SolutionHint(entry, sim), key
    return best


def plan_low_urgency(
    intent: Intent,
    campus: Optional[CampusSnapshot],
    hint: Optional[SolutionHint],
    n: int,
    backend: Backend,
    ledger: CallLedger,
    now: Optional[float] = None,
    theta1_seconds: float = THETA1_SECONDS,
) -> list[Solution]:
    """Generate ``n`` candidates, one call per reasoning path.

    Candidate ``i`` targets criteria label ``i mod 3``, so any ``n >= 3``
    covers every label. With a hint, each prompt carries it structurally.
    """
    if n < 2:
        raise ValueError("low-urgency planning needs at least two candidates")
    if now is not None:
        label = classify_urgency(intent, now, theta1_seconds)
        if label.level is not UrgencyLevel.LOW:
            raise ValueError(f"intent {intent.id} is {label.level.value}, not low urgency")
    hints = hint.prompt_hints() if hint is not None else ()
    solutions = []
    for i in range(n):
        criteria = CRITERIA_ORDER[i % len(CRITERIA_ORDER)]
        body = "\n".join([
            f"key={intent.id}/c{i}",
            f"Produce a detailed plan emphasising {criteria.value}.",
            *_intent_block(intent, campus),
        ])
        response = invoke(backend, Prompt(Role.LOW_URGENCY, body, hints), ledger, now or 0)
        solution = solution_from_payload(response.structured, intent.id)
        if solution.criteria_label is not criteria:
            raise ValueError(
                f"candidate {solution.id} for {intent.id} has label {solution.criteria_label.value}, "
                f"expected {criteria.value}"
            )
        solutions.append(solution)
    ids = [s.id for s in solutions]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate candidate ids for {intent.id}: {ids}")
    return solutions


# -- scoring and selection ---------------------------------------------------

@dataclass(frozen=True)
class ScoredSolution:
    solution: Solution
    metrics: MetricsTriple

    @property
    def id(self) -> str:
        return self.solution.id


def score_solutions(
    solutions: Sequence[Solution],
    intent: Intent,
    reference_claims: ClaimSet,
    dim: int = DEFAULT_DIM,
) -> list[ScoredSolution]:
    if not solutions:
        raise ValueError("nothing to score")
    n_max = max(s.lm_call_count for s in solutions)
    scored = []
    for s in solutions:
        try:
            prec = precision(s.claims(), reference_claims)
        except DefinedZeroDenominator:
            logger.warning("solution %s asserts no claims; precision scored as 0", s.id)
            prec = 0.0
        metrics = MetricsTriple(
            usage_cost=lm_call_usage_cost(s.lm_call_count, n_max),
            similarity=similarity_score(s.narrative, intent.raw_text, dim),
            precision=prec,
        )
        scored.append(ScoredSolution(s, metrics))
    return scored


def dominates(a: MetricsTriple, b: MetricsTriple) -> bool:
    no_worse = a.usage_cost <= b.usage_cost and a.similarity >= b.similarity and a.precision >= b.precision
    better = a.usage_cost < b.usage_cost or a.similarity > b.similarity or a.precision > b.precision
    return no_worse and better


def pareto_front(scored: Sequence[ScoredSolution]) -> list[ScoredSolution]:
    if not scored:
        raise ValueError("pareto front of an empty set")
    return [s for s in scored if not any(dominates(o.metrics, s.metrics) for o in scored if o is not s)]


def _tie_break_key(s: ScoredSolution):
    m = s.metrics
    return (-m.precision, -m.similarity, m.usage_cost, s.solution.id)


def select_final(front: Sequence[ScoredSolution], verdict: Optional[EvaluatorVerdict]) -> ScoredSolution:
    if not front:
        raise ValueError("cannot select from an empty front")
    if verdict is not None and verdict.selected_solution_id is not None:
        for s in front:
            if s.solution.id == verdict.selected_solution_id:
                return s
        logger.info("evaluator pick %s is off the Pareto front; using tie-break", verdict.selected_solution_id)
    return min(front, key=_tie_break_key)


def evaluate_and_learn(
    solutions: Sequence[Solution],
    intent: Intent,
    memory: SolutionMemory,
    backend: Backend,
    ledger: CallLedger,
    now: int = 0,
    scored: Optional[Sequence[ScoredSolution]] = None,
    dim: int = DEFAULT_DIM,
) -> tuple[EvaluatorVerdict, SolutionMemory]:
    if not solutions:
        raise ValueError("nothing to evaluate")
    metrics = {s.id: s.metrics for s in scored or ()}
    lines = [f"key={intent.id}/evaluate", "Select the best candidate and explain why.", f"intent: {intent.raw_text}"]
    for s in solutions:
        m = metrics.get(s.id)
        score = f" cost={m.usage_cost:.4f} sim={m.similarity:.4f} prec={m.precision:.4f}" if m else ""
        lines.append(f"candidate {s.summary()}{score}")
    response = invoke(backend, Prompt(Role.EVALUATOR, "\n".join(lines)), ledger, now)
    verdict = verdict_from_payload(response.structured)
    by_id = {s.id: s for s in solutions}
    if verdict.selected_solution_id is not None and verdict.selected_solution_id not in by_id:
        raise ValueError(f"evaluator selected unknown candidate {verdict.selected_solution_id}")
    best = by_id.get(verdict.selected_solution_id) if verdict.selected_solution_id else None
    memory.append(SolutionMemoryEntry(
        intent_text=intent.raw_text,
        intent_embedding=embed(intent.raw_text, dim),
        best_solution=best,
        verdict=verdict,
        stored_at=now,
        intent_id=intent.id,
    ))
    return verdict, memory
