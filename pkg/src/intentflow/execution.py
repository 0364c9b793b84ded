"""Sub-task execution by cooperating low-level agents.

One agent is spawned per sub-task. Stages run as barriers: every agent of
stage ``s`` finishes before stage ``s + 1`` starts, and agents inside a
stage may run concurrently. Agents exchange intermediate results through a
write-once :class:`RendezvousStore`. Room double-bookings across intents
are detected afterwards and negotiated first-come-first-served.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

from .campus_sim import (
    AVAILABILITY_SCHEMA,
    SENSOR_SCHEMA,
    CampusSnapshot,
    DatasetRef,
    dataset_registry,
    overlaps,
    query_available,
)
from .decision import Solution, SubTask
from .lm_gateway import Backend, CallLedger, Prompt, Role, invoke
from .model import Action, Command, Field, Intent

logger = logging.getLogger(__name__)

# Environment settings launch this long before the booked slot starts.
SETTING_LEAD_S = 900

KIND_SCHEMA = {
    "room_query": AVAILABILITY_SCHEMA,
    "booking": AVAILABILITY_SCHEMA,
    "temperature": SENSOR_SCHEMA,
    "light": SENSOR_SCHEMA,
}


class DependencyUnmet(RuntimeError):
    pass


class NoCompatibleDataset(LookupError):
    pass


class AmbiguousDataset(LookupError):
    pass


class NegotiationFailed(RuntimeError):
    pass


class WriteOnceViolation(KeyError):
    pass


@dataclass(frozen=True)
class AgentAssignment:
    agent_id: str
    sub_task: SubTask
    group_id: str


@dataclass(frozen=True)
class RendezvousEntry:
    value: Any
    writer: str
    timestamp: int
    shared: bool = False


@dataclass(frozen=True)
class AccessRecord:
    reader: str
    reader_stage: int
    entry_stage: int
    key: str


class RendezvousStore:
    """Write-once shared memory keyed by ``(group, stage, key)``.

    A reader at stage ``s`` sees entries from stages below ``s`` plus
    same-stage entries that were published as shared. Every successful read
    is recorded in :attr:`access_log`.
    """

    def __init__(self) -> None:
        self._entries: dict[tuple[str, int, str], RendezvousEntry] = {}
        self._lock = threading.Lock()
        self.access_log: list[AccessRecord] = []

    def publish(self, group: str, stage: int, key: str, value: Any, writer: str,
                timestamp: int = 0, shared: bool = False) -> None:
        with self._lock:
            slot = (group, stage, key)
            if slot in self._entries:
                raise WriteOnceViolation(f"rendezvous entry {slot} already written")
            self._entries[slot] = RendezvousEntry(value, writer, timestamp, shared)

    def read(self, group: str, key: str, reader: str, reader_stage: int) -> Optional[RendezvousEntry]:
        with self._lock:
            visible = [
                (stage, entry) for (g, stage, k), entry in self._entries.items()
                if g == group and k == key and (stage < reader_stage or (stage == reader_stage and entry.shared))
            ]
            if not visible:
                return None
            stage, entry = max(visible, key=lambda item: item[0])
            self.access_log.append(AccessRecord(reader, reader_stage, stage, key))
            return entry

    def get(self, group: str, stage: int, key: str) -> Optional[RendezvousEntry]:
        with self._lock:
            return self._entries.get((group, stage, key))

    def items(self) -> list[tuple[tuple[str, int, str], RendezvousEntry]]:
        with self._lock:
            return sorted(self._entries.items(), key=lambda kv: kv[0])


def group_id_for(intent: Intent, solution: Solution) -> str:
    return f"{intent.id}/{solution.id}"


def spawn_agents(solution: Solution, group_id: Optional[str] = None) -> list[AgentAssignment]:
    if not solution.sub_tasks:
        raise ValueError("solution has no sub-tasks")
    group = group_id or f"{solution.intent_id}/{solution.id}"
    ordered = sorted(solution.sub_tasks, key=lambda t: (t.stage, t.id))
    return [AgentAssignment(f"{group}/agent-{t.id}", t, group) for t in ordered]


def select_dataset(registry: Sequence[DatasetRef], sub_task: SubTask) -> DatasetRef:
    if not registry:
        raise ValueError("empty dataset registry")
    wanted = KIND_SCHEMA[sub_task.kind]
    matches = [d for d in registry if d.schema_tag == wanted]
    if not matches:
        raise NoCompatibleDataset(f"no {wanted} dataset for sub-task {sub_task.id}")
    if len(matches) > 1:
        raise AmbiguousDataset(f"{len(matches)} {wanted} datasets for sub-task {sub_task.id}")
    return matches[0]


def _command_id(intent: Intent, task: SubTask, suffix: str) -> str:
    return f"{intent.id}/{task.id}/{suffix}"


def execute_subtask(
    assignment: AgentAssignment,
    dataset: DatasetRef,
    rendezvous: RendezvousStore,
    intent: Intent,
    backend: Optional[Backend],
    ledger: Optional[CallLedger],
    now: int,
    busy: Mapping[str, Iterable[tuple[int, int]]] | None = None,
) -> list[Command]:
    """Run one sub-task and publish its outputs.

    Returns the commands it issues; an empty list is a recorded no-op
    (``done:<id>`` is still published).
    """
    task = assignment.sub_task
    group = assignment.group_id
    agent = assignment.agent_id
    for dep in sorted(task.depends_on):
        if rendezvous.read(group, f"done:{dep}", agent, task.stage) is None:
            raise DependencyUnmet(f"{task.id} needs {dep} in group {group}")

    if task.requires_lm_call:
        if backend is None or ledger is None:
            raise ValueError(f"sub-task {task.id} needs a model backend")
        body = "\n".join([
            f"key={group}/{task.id}",
            f"Carry out sub-task: {task.description}",
            f"intent: {intent.raw_text}",
        ])
        reply = invoke(backend, Prompt(Role.LOW_LEVEL, body), ledger, now)
        rendezvous.publish(group, task.stage, f"reasoning:{task.id}", reply.text, agent, now)

    campus = dataset.records
    if campus is None:
        raise ValueError(f"dataset {dataset.name} has no records")
    slot = intent.slot()
    prefs = intent.preferences
    commands: list[Command] = []

    def prior_room() -> Optional[str]:
        # A booked room wins; otherwise fall back to what a dependency looked up.
        for key in ["room", *(f"room:{d}" for d in sorted(task.depends_on))]:
            entry = rendezvous.read(group, key, agent, task.stage)
            if entry is not None and entry.value is not None:
                return entry.value
        return None

    if task.kind in ("room_query", "booking"):
        room = prior_room() if task.kind == "booking" else None
        if room is None:
            candidates = query_available(campus, slot, prefs, busy)
            room = candidates[0] if candidates else None
        if task.kind == "booking":
            if room is None:
                commands.append(Command(
                    id=_command_id(intent, task, "alert"), room=min(campus.rooms),
                    field=Field.BOOKING, action=Action.ALERT, launch_at=now, issued_by=agent,
                    intent_id=intent.id, created_at=now, note="no room available for the requested slot",
                ))
            else:
                commands.append(Command(
                    id=_command_id(intent, task, "reserve"), room=room, field=Field.BOOKING,
                    action=Action.RESERVE, launch_at=now, issued_by=agent, intent_id=intent.id,
                    created_at=now, slot=slot,
                ))
        key = "room" if task.kind == "booking" else f"room:{task.id}"
        rendezvous.publish(group, task.stage, key, room, agent, now)
    elif task.kind in ("temperature", "light"):
        room = prior_room()
        target = None
        if prefs is not None:
            target = prefs.temperature_c if task.kind == "temperature" else prefs.target_lux()
        if room is not None and target is not None:
            launch = max(now, slot[0] - SETTING_LEAD_S)
            commands.append(Command(
                id=_command_id(intent, task, task.kind), room=room, field=Field(task.kind),
                action=Action.SET, magnitude=target, launch_at=launch, issued_by=agent,
                intent_id=intent.id, created_at=now, expires_at=slot[1],
            ))
    rendezvous.publish(group, task.stage, f"done:{task.id}", [c.id for c in commands], agent, now)
    return commands


@dataclass
class ExecutionResult:
    group_id: str
    assignments: list[AgentAssignment]
    commands: list[Command]
    outputs: dict[str, list[str]] = field(default_factory=dict)


def run_solution(
    solution: Solution,
    intent: Intent,
    campus: CampusSnapshot,
    backend: Optional[Backend],
    ledger: Optional[CallLedger],
    now: int,
    rendezvous: Optional[RendezvousStore] = None,
    registry: Optional[Sequence[DatasetRef]] = None,
    busy: Mapping[str, Iterable[tuple[int, int]]] | None = None,
    max_workers: int = 4,
) -> ExecutionResult:
    """Execute a selected solution stage by stage and collect its commands."""
    rendezvous = rendezvous if rendezvous is not None else RendezvousStore()
    registry = registry if registry is not None else dataset_registry(campus)
    group = group_id_for(intent, solution)
    assignments = spawn_agents(solution, group)
    results: dict[str, list[Command]] = {}
    for stage in range(solution.hierarchy_depth):
        batch = [a for a in assignments if a.sub_task.stage == stage]

        def work(a: AgentAssignment) -> list[Command]:
            return execute_subtask(a, select_dataset(registry, a.sub_task), rendezvous,
                                   intent, backend, ledger, now, busy)

        if len(batch) > 1 and max_workers > 1:
            with ThreadPoolExecutor(max_workers=min(max_workers, len(batch))) as pool:
                for a, cmds in zip(batch, pool.map(work, batch)):
                    results[a.sub_task.id] = cmds
        else:
            for a in batch:
                results[a.sub_task.id] = work(a)
    commands = [c for a in assignments for c in results[a.sub_task.id]]
    outputs = {a.sub_task.id: [c.id for c in results[a.sub_task.id]] for a in assignments}
    return ExecutionResult(group, assignments, commands, outputs)


# -- conflicts ---------------------------------------------------------------

def _reservations(commands: Iterable[Command]) -> list[Command]:
    return [c for c in commands if c.action is Action.RESERVE and c.slot is not None]


def detect_conflicts(pending: Sequence[Command]) -> list[list[Command]]:
    """Group reservations of one room with overlapping slots from different intents."""
    reserves = sorted(_reservations(pending), key=lambda c: c.id)
    parent = list(range(len(reserves)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    linked = set()
    for i, a in enumerate(reserves):
        for j in range(i + 1, len(reserves)):
            b = reserves[j]
            if a.room == b.room and a.intent_id != b.intent_id and overlaps(a.slot, b.slot):
                parent[find(j)] = find(i)
                linked.update((i, j))
    groups: dict[int, list[Command]] = {}
    for i in sorted(linked):
        groups.setdefault(find(i), []).append(reserves[i])
    return sorted(groups.values(), key=lambda g: g[0].id)


def _priority(intents: Mapping[str, Intent]):
    def key(c: Command):
        intent = intents.get(c.intent_id)
        submitted = intent.submitted_at if intent is not None else c.created_at
        return (submitted, c.intent_id, c.id)
    return key


def negotiate(
    conflict_group: Sequence[Command],
    campus: CampusSnapshot,
    rendezvous: RendezvousStore,
    intents: Mapping[str, Intent],
    backend: Optional[Backend] = None,
    ledger: Optional[CallLedger] = None,
    others: Sequence[Command] = (),
    now: int = 0,
) -> list[Command]:
    """Replacement commands for one conflict group.

    The earliest-submitted intent keeps its reservation. Each later intent
    moves to its next-best free room, avoiding reservations in ``others`` and
    rooms already handed out here; with no room left it gets an alert.
    """
    if len(conflict_group) < 2:
        raise ValueError("a conflict group needs at least two commands")
    ordered = sorted(conflict_group, key=_priority(intents))
    keeper = ordered[0]
    busy: dict[str, list[tuple[int, int]]] = {}
    for c in _reservations(others):
        busy.setdefault(c.room, []).append(c.slot)
    busy.setdefault(keeper.room, []).append(keeper.slot)
    out = [keeper]
    topic = f"negotiation/{keeper.room}/{keeper.slot[0]}"
    for rank, cmd in enumerate(ordered[1:], 1):
        intent = intents.get(cmd.intent_id)
        prefs = intent.preferences if intent is not None else None
        options = [r for r in query_available(campus, cmd.slot, prefs, busy) if r != cmd.room]
        try:
            if not options:
                raise NegotiationFailed(f"no alternative room for {cmd.intent_id} in {cmd.slot}")
            room = options[0]
            reasoning = f"{keeper.intent_id} submitted first and keeps {keeper.room}; {cmd.intent_id} moves to {room}"
            if backend is not None and ledger is not None:
                body = f"key=negotiate/{cmd.intent_id}\nExplain the reassignment.\n{reasoning}"
                reasoning = invoke(backend, Prompt(Role.LOW_LEVEL, body), ledger, now).text
            rendezvous.publish(topic, rank, cmd.intent_id, {"room": room, "reasoning": reasoning},
                               cmd.issued_by, now, shared=True)
            busy.setdefault(room, []).append(cmd.slot)
            out.append(replace(cmd, id=f"{cmd.id}~{room}", room=room, note=reasoning))
        except NegotiationFailed as exc:
            logger.warning("%s", exc)
            rendezvous.publish(topic, rank, cmd.intent_id, {"room": None, "reasoning": str(exc)},
                               cmd.issued_by, now, shared=True)
            out.append(Command(
                id=f"{cmd.id}~alert", room=cmd.room, field=Field.BOOKING, action=Action.ALERT,
                launch_at=max(now, cmd.created_at), issued_by=cmd.issued_by, intent_id=cmd.intent_id,
                created_at=max(now, cmd.created_at), note=str(exc),
            ))
    return out


def resolve_conflicts(
    commands: Sequence[Command],
    campus: CampusSnapshot,
    rendezvous: RendezvousStore,
    intents: Mapping[str, Intent],
    backend: Optional[Backend] = None,
    ledger: Optional[CallLedger] = None,
    now: int = 0,
) -> list[Command]:
    """Negotiate every conflict group and retarget dependent settings.

    Temperature/light commands follow their intent's booking to the new
    room, and are dropped for intents left without a room.
    """
    working = list(commands)
    for group in detect_conflicts(working):
        ids = {c.id for c in group}
        others = [c for c in working if c.id not in ids]
        replacements = negotiate(group, campus, rendezvous, intents, backend, ledger, others, now)
        moved: dict[str, Optional[str]] = {}
        for old, new in zip(sorted(group, key=_priority(intents)), replacements):
            if new.action is Action.ALERT:
                moved[old.intent_id] = None
            elif new.room != old.room:
                moved[old.intent_id] = new.room
        rebuilt = []
        for c in working:
            if c.id in ids:
                continue
            if c.intent_id in moved and c.field in (Field.TEMPERATURE, Field.LIGHT):
                target = moved[c.intent_id]
                if target is None:
                    continue
                c = replace(c, id=f"{c.id}~{target}", room=target)
            rebuilt.append(c)
        working = rebuilt + replacements
    if detect_conflicts(working):
        raise RuntimeError("conflicts remain after negotiation")
    return working
