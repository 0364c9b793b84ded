"""Time-to-launch command queue and the environment agent.

``launch_at`` is the earliest moment a command may be dispatched. The
dispatcher delivers due commands to a control-system sink in
``(launch_at, id)`` order, exactly once per command. The environment agent
watches booked rooms during their time window and issues corrective
commands whose magnitude is the full observed deviation.
"""

from __future__ import annotations

import bisect
import enum
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Protocol, Sequence

from .campus_sim import CampusSink, RoomState, inject_drift
from .lm_gateway import Backend, CallLedger, Prompt, Role, invoke
from .model import Action, Command, Field, PreferenceSet

logger = logging.getLogger(__name__)

ENVIRONMENT_AGENT = "environment-agent"
DEFAULT_TOLERANCE_TEMP_C = 0.5
DEFAULT_TOLERANCE_LUX = 50.0


class RejectedStale(ValueError):
    pass


class Sink(Protocol):
    def apply(self, command: Command) -> None:
        ...


class EntryState(str, enum.Enum):
    PENDING = "pending"
    DISPATCHED = "dispatched"
    EXPIRED = "expired"


@dataclass
class QueueEntry:
    command: Command
    enqueued_at: int
    state: EntryState = EntryState.PENDING
    dispatched_at: Optional[int] = None
    errors: list[str] = field(default_factory=list)

    @property
    def order_key(self) -> tuple[int, str]:
        return (self.command.launch_at, self.command.id)


@dataclass(frozen=True)
class DispatchEvent:
    timestamp: int
    command: Command

    def line(self) -> str:
        c = self.command
        magnitude = "-" if c.magnitude is None else f"{c.magnitude:.4f}"
        return f"{self.timestamp}\t{c.id}\t{c.room}\t{c.field.value}\t{c.action.value}\t{magnitude}"


class CommandQueue:
    """Pending commands ordered by ``(launch_at, id)``; one dispatcher per queue."""

    def __init__(self) -> None:
        self._entries: list[QueueEntry] = []
        self._keys: list[tuple[int, str]] = []
        self._ids: set[str] = set()
        self._lock = threading.Lock()
        self.log: list[DispatchEvent] = []

    def enqueue(self, command: Command, now: int) -> QueueEntry:
        if command.launch_at < now:
            raise RejectedStale(f"{command.id} launches at {command.launch_at}, before {now}")
        with self._lock:
            if command.id in self._ids:
                raise ValueError(f"command {command.id} already queued")
            entry = QueueEntry(command, now)
            pos = bisect.bisect_right(self._keys, entry.order_key)
            self._keys.insert(pos, entry.order_key)
            self._entries.insert(pos, entry)
            self._ids.add(command.id)
            return entry

    @property
    def entries(self) -> list[QueueEntry]:
        with self._lock:
            return list(self._entries)

    def pending(self) -> list[QueueEntry]:
        return [e for e in self.entries if e.state is EntryState.PENDING]

    def dispatch_due(self, now: int, sink: Sink) -> list[Command]:
        delivered = []
        with self._lock:
            for entry in self._entries:
                if entry.command.launch_at > now:
                    break
                if entry.state is not EntryState.PENDING:
                    continue
                expires = entry.command.expires_at
                if expires is not None and expires <= now:
                    entry.state = EntryState.EXPIRED
                    continue
                try:
                    sink.apply(entry.command)
                except Exception as exc:  # sink failure leaves the entry pending
                    entry.errors.append(f"{now}: {exc}")
                    logger.warning("dispatch of %s failed: %s", entry.command.id, exc)
                    continue
                entry.state = EntryState.DISPATCHED
                entry.dispatched_at = now
                self.log.append(DispatchEvent(now, entry.command))
                delivered.append(entry.command)
        return delivered

    def dispatch_log(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


def enqueue(queue: CommandQueue, command: Command, now: int) -> CommandQueue:
    queue.enqueue(command, now)
    return queue


def dispatch_due(queue: CommandQueue, now: int, sink: Sink) -> list[Command]:
    return queue.dispatch_due(now, sink)


# -- environment agent -------------------------------------------------------

@dataclass(frozen=True)
class MonitoringWindow:
    intent_id: str
    room: str
    desired: PreferenceSet
    start: int
    end: int
    tolerance_temp_c: float = DEFAULT_TOLERANCE_TEMP_C
    tolerance_lux: float = DEFAULT_TOLERANCE_LUX

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValueError("monitoring window must have start < end")
        if self.tolerance_temp_c <= 0 or self.tolerance_lux <= 0:
            raise ValueError("tolerances must be positive")


def _correction(window: MonitoringWindow, fld: Field, desired: float, observed: float, now: int) -> Command:
    deviation = desired - observed
    return Command(
        id=f"{window.intent_id}/env/{now}/{fld.value}",
        room=window.room,
        field=fld,
        action=Action.INCREASE if deviation > 0 else Action.DECREASE,
        magnitude=abs(deviation),
        launch_at=now,
        issued_by=ENVIRONMENT_AGENT,
        intent_id=window.intent_id,
        created_at=now,
        expires_at=window.end,
        note=f"desired {desired:g}, observed {observed:g}",
    )


def monitor_tick(window: MonitoringWindow, observed: RoomState, now: int) -> list[Command]:
    if not window.start <= now < window.end:
        return []
    out = []
    if window.desired.temperature_c is not None:
        desired = window.desired.temperature_c
        if abs(desired - observed.temperature_c) > window.tolerance_temp_c:
            out.append(_correction(window, Field.TEMPERATURE, desired, observed.temperature_c, now))
    target_lux = window.desired.target_lux()
    if target_lux is not None and abs(target_lux - observed.light_lux) > window.tolerance_lux:
        out.append(_correction(window, Field.LIGHT, target_lux, observed.light_lux, now))
    if not observed.has_booking((window.start, window.end), window.intent_id):
        out.append(Command(
            id=f"{window.intent_id}/env/{now}/booking",
            room=window.room,
            field=Field.BOOKING,
            action=Action.ALERT,
            launch_at=now,
            issued_by=ENVIRONMENT_AGENT,
            intent_id=window.intent_id,
            created_at=now,
            note="booking no longer held for this window",
        ))
    return out


@dataclass(frozen=True)
class Drift:
    at: int
    room: str
    field: Field
    delta: float


@dataclass(frozen=True)
class DeviationEvent:
    tick: int
    time: int
    intent_id: str
    room: str
    field: str
    action: str
    magnitude: Optional[float]
    command_id: str
    phrasing: str

    def line(self) -> str:
        magnitude = "-" if self.magnitude is None else f"{self.magnitude:.4f}"
        return (f"{self.tick}\t{self.time}\t{self.intent_id}\t{self.room}\t{self.field}\t"
                f"{self.action}\t{magnitude}\t{self.command_id}")


@dataclass
class MonitoringReport:
    ticks: int = 0
    events: list[DeviationEvent] = field(default_factory=list)

    def commands_issued(self) -> list[str]:
        return [e.command_id for e in self.events]

    def log_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.events)


def _check_phrasing(payload: Any, command: Command) -> None:
    if not isinstance(payload, Mapping):
        return
    for key, actual in (("field", command.field.value), ("action", command.action.value)):
        if key in payload and payload[key] != actual:
            raise ValueError(f"environment agent reply disagrees on {key}: {payload[key]} != {actual}")


def validate_environment_payload(payload: Any) -> None:
    if not isinstance(payload, Mapping):
        raise ValueError("environment payload must be an object")
    if "field" in payload:
        Field(payload["field"])
    if "action" in payload:
        Action(payload["action"])


def run_monitoring(
    windows: Sequence[MonitoringWindow],
    sink: CampusSink,
    queue: CommandQueue,
    tick_seconds: int,
    backend: Optional[Backend],
    ledger: Optional[CallLedger],
    drifts: Iterable[Drift] = (),
    start: Optional[int] = None,
    end: Optional[int] = None,
) -> MonitoringReport:
    """Closed-loop simulation over the monitoring windows.

    Each tick: apply due drifts, dispatch due commands, observe every active
    window, enqueue corrections with immediate launch and dispatch them.
    Alerts are raised once per window.
    """
    if tick_seconds <= 0:
        raise ValueError("tick_seconds must be positive")
    report = MonitoringReport()
    if not windows:
        return report
    t = start if start is not None else min(w.start for w in windows)
    stop = end if end is not None else max(w.end for w in windows)
    pending_drifts = sorted(drifts, key=lambda d: (d.at, d.room, Field(d.field).value))
    alerted: set[str] = set()
    ordered = sorted(windows, key=lambda w: (w.start, w.intent_id))
    tick = 0
    while t < stop:
        while pending_drifts and pending_drifts[0].at <= t:
            d = pending_drifts.pop(0)
            sink.mutate(lambda c, d=d: inject_drift(c, d.room, d.field, d.delta))
        queue.dispatch_due(t, sink)
        for window in ordered:
            observed = sink.campus.room(window.room)
            for cmd in monitor_tick(window, observed, t):
                if cmd.action is Action.ALERT:
                    if window.intent_id in alerted:
                        continue
                    alerted.add(window.intent_id)
                phrasing = cmd.note
                if backend is not None and ledger is not None:
                    body = "\n".join([
                        f"key={window.intent_id}/{cmd.field.value}",
                        "Phrase the corrective command for the control system.",
                        f"room: {cmd.room}; {cmd.note}",
                    ])
                    reply = invoke(backend, Prompt(Role.ENVIRONMENT, body), ledger, t)
                    _check_phrasing(reply.structured, cmd)
                    phrasing = reply.text
                queue.enqueue(cmd, t)
                report.events.append(DeviationEvent(
                    tick, t, window.intent_id, window.room, cmd.field.value, cmd.action.value,
                    cmd.magnitude, cmd.id, phrasing,
                ))
        queue.dispatch_due(t, sink)
        t += tick_seconds
        tick += 1
    report.ticks = tick
    return report
