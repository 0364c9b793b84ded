"""Scenario files and the end-to-end pipeline.

A scenario file (JSON, ``"format": "intentflow-scenario/1"``) names a
campus seed, a clock start, a scripted-backend fixture and an ordered list
of intents::

    {
      "format": "intentflow-scenario/1",
      "name": "fig3-high-urgency",
      "campus_seed": 42,
      "day": "2025-03-10",
      "clock_start": "2025-03-10T13:00:00Z",
      "backend_fixture": "fig3-high-urgency.fixture.json",
      "config": {"theta1": 7200, "theta2": 0.7, "candidates": 3,
                 "tick_seconds": 300, "tolerance_temp_c": 0.5,
                 "tolerance_lux": 50},
      "intents": [
        {"id": "meeting-1500", "user": "alice", "text": "...",
         "submit_offset_s": 0,
         "reference_commands": [{"room": "PK258", "field": "booking",
                                 "action": "reserve"}]}
      ],
      "drifts": [{"at_offset_s": 7500, "intent": "meeting-1500",
                  "field": "temperature", "delta": 2.0}],
      "expected_calls": {"personal": 2, "high_urgency": 1}
    }

A drift names either a ``room`` or an ``intent`` (the room finally booked
for it). Relative paths resolve against the scenario file's directory.

Run directory layout: ``report.txt`` (sorted-key JSON), ``dispatch.log``,
``monitor.log``, ``pareto.tsv``.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from . import decision as dm
from .campus_sim import CampusSink, generate_campus
from .embedding import DEFAULT_DIM
from .execution import RendezvousStore, resolve_conflicts, run_solution
from .lm_gateway import (
    Backend,
    CallLedger,
    Role,
    ScriptedBackend,
)
from .management import (
    DEFAULT_TOLERANCE_LUX,
    DEFAULT_TOLERANCE_TEMP_C,
    CommandQueue,
    Drift,
    EntryState,
    MonitoringWindow,
    run_monitoring,
    validate_environment_payload,
)
from .metrics import ClaimSet, claims_from_commands
from .model import Action, Command, Field
from .personal_agent import (
    RECALL_SIMILARITY,
    RECALL_WINDOW_S,
    PersonalMemory,
    analyze_intent,
    find_matching_case,
    parse_timestamp,
    self_evaluate,
    validate_personal_payload,
    with_preferences,
)

logger = logging.getLogger(__name__)

SCENARIO_FORMAT = "intentflow-scenario/1"
REPORT_FORMAT = "intentflow-report/1"


class ScenarioError(ValueError):
    pass


class NoLearningPair(ScenarioError):
    pass


@dataclass
class RunConfig:
    theta1: float = dm.THETA1_SECONDS
    theta2: float = dm.THETA2
    candidates: int = dm.DEFAULT_CANDIDATES
    tick_seconds: int = 300
    tolerance_temp_c: float = DEFAULT_TOLERANCE_TEMP_C
    tolerance_lux: float = DEFAULT_TOLERANCE_LUX
    recall_similarity: float = RECALL_SIMILARITY
    recall_window_s: int = RECALL_WINDOW_S
    dim: int = DEFAULT_DIM

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class IntentSpec:
    id: str
    user: str
    text: str
    submit_offset_s: int
    reference_commands: list[dict] = field(default_factory=list)


@dataclass
class Scenario:
    name: str
    campus_seed: int
    day: dt.date
    clock_start: int
    backend_fixture: Path
    intents: list[IntentSpec]
    config: RunConfig = field(default_factory=RunConfig)
    drifts: list[dict] = field(default_factory=list)
    expected_calls: dict[str, int] = field(default_factory=dict)

    def reference_claims(self, intent_id: str) -> ClaimSet:
        for spec in self.intents:
            if spec.id == intent_id:
                return claims_from_commands(spec.reference_commands)
        raise KeyError(intent_id)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if doc.get("format") != SCENARIO_FORMAT:
        raise ScenarioError(f"{path}: expected format {SCENARIO_FORMAT!r}, got {doc.get('format')!r}")
    try:
        intents = [
            IntentSpec(
                id=str(i["id"]),
                user=str(i["user"]),
                text=str(i["text"]),
                submit_offset_s=int(i.get("submit_offset_s", 0)),
                reference_commands=list(i.get("reference_commands", [])),
            )
            for i in doc["intents"]
        ]
        fixture = Path(doc["backend_fixture"])
        scenario = Scenario(
            name=str(doc["name"]),
            campus_seed=int(doc["campus_seed"]),
            day=dt.date.fromisoformat(doc["day"]),
            clock_start=parse_timestamp(doc["clock_start"]),
            backend_fixture=fixture if fixture.is_absolute() else path.parent / fixture,
            intents=intents,
            config=RunConfig.from_mapping(doc.get("config", {})),
            drifts=list(doc.get("drifts", [])),
            expected_calls={str(k): int(v) for k, v in doc.get("expected_calls", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"{path}: malformed scenario: {exc!r}") from exc
    ids = [i.id for i in scenario.intents]
    if len(set(ids)) != len(ids):
        raise ScenarioError(f"{path}: duplicate intent ids")
    return scenario


FIXTURE_VALIDATORS = {
    Role.PERSONAL: validate_personal_payload,
    Role.HIGH_URGENCY: dm.validate_plan_payload,
    Role.LOW_URGENCY: dm.validate_plan_payload,
    Role.EVALUATOR: dm.validate_verdict_payload,
    Role.ENVIRONMENT: validate_environment_payload,
}


def load_backend(path: str | Path) -> ScriptedBackend:
    return ScriptedBackend.from_file(path, FIXTURE_VALIDATORS)


def _r(x: float) -> float:
    return round(float(x), 6)


@dataclass
class RunReport:
    data: dict[str, Any]
    dispatch_log: str
    monitor_log: str
    pareto_tsv: str
    wall_time_s: float = 0.0
    ledger: Optional[CallLedger] = None

    def intent(self, intent_id: str) -> dict[str, Any]:
        for item in self.data["intents"]:
            if item["id"] == intent_id:
                return item
        raise KeyError(intent_id)

    def report_text(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.report_text(), encoding="utf-8")
        (out / "dispatch.log").write_text(self.dispatch_log, encoding="utf-8")
        (out / "monitor.log").write_text(self.monitor_log, encoding="utf-8")
        (out / "pareto.tsv").write_text(self.pareto_tsv, encoding="utf-8")
        return out


PARETO_HEADER = "intent_id\tsolution_id\tcriteria\tlm_calls\tdepth\tusage_cost\tsimilarity\tprecision\ton_front\tselected\n"


def run_pipeline(
    scenario: Scenario,
    backend: Optional[Backend] = None,
    ledger: Optional[CallLedger] = None,
) -> RunReport:
    """Run every intent of ``scenario`` through the full pipeline."""
    started = time.perf_counter()
    cfg = scenario.config
    backend = backend if backend is not None else load_backend(scenario.backend_fixture)
    ledger = ledger if ledger is not None else CallLedger()
    campus = generate_campus(scenario.campus_seed, scenario.day)
    memories: dict[str, PersonalMemory] = {}
    solution_memory = dm.SolutionMemory()
    rendezvous = RendezvousStore()
    intents: dict[str, Any] = {}
    commands: list[Command] = []
    per_intent: list[dict[str, Any]] = []
    pareto_rows: list[str] = []

    for spec in sorted(scenario.intents, key=lambda s: (s.submit_offset_s, s.id)):
        now = scenario.clock_start + spec.submit_offset_s
        memory = memories.setdefault(spec.user, PersonalMemory(spec.user, dim=cfg.dim))
        intent = analyze_intent(spec.text, spec.user, now, backend, ledger, intent_id=spec.id)
        item: dict[str, Any] = {"id": intent.id, "user": intent.user_id, "plan_type": intent.plan_type,
                                "submitted_at": now, "deadline": intent.deadline}
        recalled = None
        if intent.preferences is not None:
            item["preference_source"] = "explicit"
        else:
            recalled = find_matching_case(memory.records, intent, now, cfg.recall_similarity,
                                          cfg.recall_window_s, cfg.dim)
            if recalled is not None:
                intent = with_preferences(intent, recalled.preferences)
                item["preference_source"] = "recalled"
                item["recalled_case"] = recalled.case_id
            else:
                item["preference_source"] = "none"
        item["preferences"] = intent.preferences.to_dict() if intent.preferences else None

        label = dm.classify_urgency(intent, now, cfg.theta1)
        item["urgency"] = label.level.value
        item["delta_seconds"] = label.delta_seconds
        if label.level is dm.UrgencyLevel.STALE:
            logger.info("dropping stale intent %s", intent.id)
            per_intent.append(item)
            continue
        intents[intent.id] = intent

        if label.level is dm.UrgencyLevel.HIGH:
            final = dm.plan_high_urgency(intent, campus, backend, ledger, now, cfg.theta1)
            item["hints"] = []
        else:
            hint = dm.recall_solution_hints(solution_memory.snapshot(), intent, cfg.theta2, cfg.dim)
            item["hints"] = list(hint.prompt_hints()) if hint else []
            item["hint_source"] = hint.entry.intent_id if hint else None
            item["hint_similarity"] = _r(hint.similarity) if hint else None
            candidates = dm.plan_low_urgency(intent, campus, hint, cfg.candidates, backend, ledger, now, cfg.theta1)
            try:
                reference = scenario.reference_claims(intent.id)
            except KeyError:
                raise ScenarioError(f"intent {intent.id} reaches scoring without reference commands") from None
            if not reference:
                raise ScenarioError(f"intent {intent.id} reaches scoring without reference commands")
            scored = dm.score_solutions(candidates, intent, reference, cfg.dim)
            front = dm.pareto_front(scored)
            verdict, _ = dm.evaluate_and_learn(candidates, intent, solution_memory, backend, ledger, now,
                                               scored, cfg.dim)
            chosen = dm.select_final(front, verdict)
            final = chosen.solution
            front_ids = [s.id for s in front]
            table = []
            for s in scored:
                m = s.metrics
                table.append({
                    "id": s.id, "criteria": s.solution.criteria_label.value,
                    "lm_calls": s.solution.lm_call_count, "depth": s.solution.hierarchy_depth,
                    "usage_cost": _r(m.usage_cost), "similarity": _r(m.similarity), "precision": _r(m.precision),
                })
                pareto_rows.append("\t".join([
                    intent.id, s.id, s.solution.criteria_label.value, str(s.solution.lm_call_count),
                    str(s.solution.hierarchy_depth), f"{m.usage_cost:.4f}", f"{m.similarity:.4f}",
                    f"{m.precision:.4f}", str(s.id in front_ids).lower(), str(s.id == chosen.id).lower(),
                ]) + "\n")
            item["candidates"] = table
            item["pareto_front"] = front_ids
            item["best_similarity"] = _r(max(s.metrics.similarity for s in scored))
            item["verdict"] = {"selected": verdict.selected_solution_id, "reason": verdict.reason,
                               "factors": list(verdict.factors), "feedback": verdict.feedback}
            item["solution_memory_size"] = len(solution_memory)

        item["selected"] = final.id
        item["sub_tasks"] = [t.id for t in sorted(final.sub_tasks, key=lambda t: (t.stage, t.id))]
        item["lm_call_count"] = final.lm_call_count
        item["hierarchy_depth"] = final.hierarchy_depth
        result = run_solution(final, intent, campus, backend, ledger, now, rendezvous)
        commands.extend(result.commands)
        response_text = f"{final.summary()} => " + ", ".join(c.id for c in result.commands)
        evaluation = self_evaluate(intent, response_text, recalled, backend, ledger, now)
        item["self_evaluation"] = {"verdict": evaluation.verdict.value, "justification": evaluation.justification}
        memory.commit(intent, response_text)
        item["case_memory_size"] = len(memory)
        per_intent.append(item)

    final_commands = resolve_conflicts(commands, campus, rendezvous, intents, backend, ledger,
                                       max((c.created_at for c in commands), default=scenario.clock_start))
    final_commands.sort(key=lambda c: (c.launch_at, c.id))
    by_intent: dict[str, list[Command]] = {}
    for c in final_commands:
        by_intent.setdefault(c.intent_id, []).append(c)
    for item in per_intent:
        if item["id"] in intents:
            item["commands"] = [c.to_dict() for c in by_intent.get(item["id"], [])]

    queue = CommandQueue()
    for c in sorted(final_commands, key=lambda c: (c.created_at, c.id)):
        queue.enqueue(c, c.created_at)
    sink = CampusSink(campus)

    windows = []
    booked: dict[str, str] = {}
    for c in final_commands:
        if c.action is Action.RESERVE:
            booked[c.intent_id] = c.room
            intent = intents[c.intent_id]
            prefs = intent.preferences
            if prefs is not None and (prefs.temperature_c is not None or prefs.light_level is not None):
                windows.append(MonitoringWindow(c.intent_id, c.room, prefs, c.slot[0], c.slot[1],
                                                cfg.tolerance_temp_c, cfg.tolerance_lux))
    drifts = []
    for d in scenario.drifts:
        room = d.get("room") or booked.get(d.get("intent", ""))
        if room is None:
            raise ScenarioError(f"drift {d} does not resolve to a booked room")
        drifts.append(Drift(scenario.clock_start + int(d["at_offset_s"]), room, Field(d["field"]), float(d["delta"])))
    monitoring = run_monitoring(windows, sink, queue, cfg.tick_seconds, backend, ledger, drifts,
                                start=scenario.clock_start)
    horizon = max([w.end for w in windows] + [c.launch_at for c in final_commands] + [scenario.clock_start])
    queue.dispatch_due(horizon, sink)

    counts = {role.value: n for role, n in sorted(ledger.counts.items(), key=lambda kv: kv[0].value)}
    data = {
        "format": REPORT_FORMAT,
        "scenario": scenario.name,
        "campus_seed": scenario.campus_seed,
        "config": {k: getattr(cfg, k) for k in sorted(cfg.__dataclass_fields__)},
        "intents": per_intent,
        "ledger": {"counts": counts, "total": sum(counts.values())},
        "expected_calls": dict(sorted(scenario.expected_calls.items())) or None,
        "dispatched": [e.command.id for e in queue.log],
        "expired": [e.command.id for e in queue.entries if e.state is EntryState.EXPIRED],
        "pending": [e.command.id for e in queue.entries if e.state is EntryState.PENDING],
        "dispatch_log": "dispatch.log",
        "monitoring": {
            "ticks": monitoring.ticks,
            "windows": [{"intent_id": w.intent_id, "room": w.room, "start": w.start, "end": w.end} for w in windows],
            "events": [
                {"tick": e.tick, "time": e.time, "intent_id": e.intent_id, "room": e.room, "field": e.field,
                 "action": e.action, "magnitude": None if e.magnitude is None else _r(e.magnitude),
                 "command_id": e.command_id}
                for e in monitoring.events
            ],
        },
    }
    return RunReport(
        data=data,
        dispatch_log=queue.dispatch_log(),
        monitor_log=monitoring.log_text(),
        pareto_tsv=PARETO_HEADER + "".join(pareto_rows),
        wall_time_s=time.perf_counter() - started,
        ledger=ledger,
    )


def apply_overrides(scenario: Scenario, **overrides: Any) -> Scenario:
    cfg_keys = {"theta1", "theta2", "candidates", "tick_seconds"}
    cfg = replace(scenario.config, **{k: v for k, v in overrides.items() if k in cfg_keys and v is not None})
    seed = overrides.get("seed")
    return replace(scenario, config=cfg, campus_seed=scenario.campus_seed if seed is None else seed)


def run_scenario(path: str | Path, **overrides: Any) -> RunReport:
    return run_pipeline(apply_overrides(load_scenario(path), **overrides))


@dataclass
class LearningReplay:
    before: dict[str, Any]
    after: dict[str, Any]
    report: RunReport

    @property
    def best_similarity_before(self) -> float:
        return self.before["best_similarity"]

    @property
    def best_similarity_after(self) -> float:
        return self.after["best_similarity"]

    @property
    def similarity_gain(self) -> float:
        return (self.best_similarity_after - self.best_similarity_before) / self.best_similarity_before

    def summary(self) -> dict[str, Any]:
        return {
            "before": {"intent": self.before["id"], "best_similarity": self.best_similarity_before,
                       "selected": self.before["selected"], "hints": self.before["hints"]},
            "after": {"intent": self.after["id"], "best_similarity": self.best_similarity_after,
                      "selected": self.after["selected"], "hints": self.after["hints"],
                      "hint_similarity": self.after.get("hint_similarity")},
            "best_similarity_delta": _r(self.best_similarity_after - self.best_similarity_before),
            "relative_gain": _r(self.similarity_gain),
        }


def replay_learning(path: str | Path, **overrides: Any) -> LearningReplay:
    """Pre- and post-learning rounds for the first intent pair linked by a hint."""
    report = run_scenario(path, **overrides)
    low = [i for i in report.data["intents"] if i.get("urgency") == "low"]
    ids = {i["id"] for i in low}
    for item in low:
        source = item.get("hint_source")
        if source in ids:
            before = next(i for i in low if i["id"] == source)
            return LearningReplay(before, item, report)
    raise NoLearningPair(f"{report.data['scenario']}: no low-urgency intent recalled an earlier one")
