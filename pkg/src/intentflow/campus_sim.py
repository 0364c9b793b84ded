"""Synthetic smart-campus world model.

Fifteen meeting rooms with capacity, temperature, light intensity and
bookings over one working day. Snapshots are immutable; every mutation
returns a new snapshot. :class:`CampusSink` is the reference control system
that the dispatcher delivers commands to.

Generated value ranges (also written into the table-file header):
temperature uniform in [18, 26] degC rounded to 0.1, light one of
150/400/700 lux, capacity from a fixed list, 0-3 pre-existing one-hour
bookings starting on whole hours between 08:00 and 17:00 UTC.
"""

from __future__ import annotations

import calendar
import datetime as dt
import logging
import random
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .model import (
    TEMP_MAX_C,
    TEMP_MIN_C,
    Action,
    Command,
    Field,
    PreferenceSet,
)

logger = logging.getLogger(__name__)

ROOM_IDS = (
    "TS501", "PK258", "PK265", "PK306", "PK254", "PK266", "PK261", "PK253",
    "PK267", "PK262", "PK309", "PK268", "PK263", "PK308", "PK264",
)
TEMPERATURE_RANGE_C = (18.0, 26.0)
LIGHT_BANDS_LUX = (150.0, 400.0, 700.0)
CAPACITIES = (4, 6, 8, 10, 12, 16, 20)
WORK_START_HOUR = 8
WORK_END_HOUR = 18
LIGHT_MAX_LUX = 5000.0
TABLE_FORMAT = "intentflow-campus/1"

Slot = tuple[int, int]


class BookingConflict(Exception):
    pass


class UnknownRoom(ValueError):
    pass


def overlaps(a: Slot, b: Slot) -> bool:
    """Half-open interval overlap; touching slots do not overlap."""
    return a[0] < b[1] and b[0] < a[1]


def day_start(day: dt.date) -> int:
    return calendar.timegm(day.timetuple())


@dataclass(frozen=True)
class Booking:
    start: int
    end: int
    owner: str = "pre"

    @property
    def slot(self) -> Slot:
        return (self.start, self.end)


@dataclass(frozen=True)
class RoomState:
    room_id: str
    capacity: int
    temperature_c: float
    light_lux: float
    bookings: tuple[Booking, ...] = ()

    def is_free(self, slot: Slot) -> bool:
        return not any(overlaps(b.slot, slot) for b in self.bookings)

    def has_booking(self, slot: Slot, owner: Optional[str] = None) -> bool:
        return any(b.slot == tuple(slot) and (owner is None or b.owner == owner) for b in self.bookings)


@dataclass(frozen=True)
class CampusSnapshot:
    rooms: Mapping[str, RoomState]
    as_of: int
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if set(self.rooms) != set(ROOM_IDS):
            raise ValueError("campus must contain exactly the fifteen known rooms")

    def room(self, room_id: str) -> RoomState:
        try:
            return self.rooms[room_id]
        except KeyError:
            raise UnknownRoom(room_id) from None

    def with_room(self, state: RoomState) -> "CampusSnapshot":
        rooms = dict(self.rooms)
        rooms[state.room_id] = state
        return replace(self, rooms=rooms)


def generate_campus(seed: int, day: dt.date) -> CampusSnapshot:
    rng = random.Random(seed)
    base = day_start(day)
    rooms = {}
    for room_id in ROOM_IDS:
        capacity = rng.choice(CAPACITIES)
        temperature = round(rng.uniform(*TEMPERATURE_RANGE_C), 1)
        light = rng.choice(LIGHT_BANDS_LUX)
        hours = sorted(rng.sample(range(WORK_START_HOUR, WORK_END_HOUR), rng.randint(0, 3)))
        bookings = tuple(Booking(base + h * 3600, base + (h + 1) * 3600) for h in hours)
        rooms[room_id] = RoomState(room_id, capacity, temperature, light, bookings)
    return CampusSnapshot(rooms=rooms, as_of=base, seed=seed)


def _clamp_temp(t: float) -> float:
    return min(TEMP_MAX_C, max(TEMP_MIN_C, t))


def _clamp_lux(v: float) -> float:
    return min(LIGHT_MAX_LUX, max(0.0, v))


def _adjust(current: float, action: Action, magnitude: float) -> float:
    if action is Action.SET:
        return magnitude
    if action is Action.INCREASE:
        return current + magnitude
    if action is Action.DECREASE:
        return current - magnitude
    raise ValueError(f"{action.value} does not adjust a numeric field")


def apply_command(campus: CampusSnapshot, command: Command) -> CampusSnapshot:
    room = campus.room(command.room)
    if command.action is Action.ALERT:
        logger.info("alert for %s (%s): %s", command.room, command.intent_id, command.note)
        return campus
    if command.field is Field.TEMPERATURE:
        value = _clamp_temp(_adjust(room.temperature_c, command.action, command.magnitude))
        return campus.with_room(replace(room, temperature_c=value))
    if command.field is Field.LIGHT:
        value = _clamp_lux(_adjust(room.light_lux, command.action, command.magnitude))
        return campus.with_room(replace(room, light_lux=value))
    if command.action is Action.RESERVE:
        if room.has_booking(command.slot, command.intent_id):
            return campus
        if not room.is_free(command.slot):
            raise BookingConflict(f"{command.room} busy during {command.slot} ({command.id})")
        booking = Booking(command.slot[0], command.slot[1], command.intent_id)
        bookings = tuple(sorted(room.bookings + (booking,), key=lambda b: (b.start, b.end, b.owner)))
        return campus.with_room(replace(room, bookings=bookings))
    if command.action is Action.RELEASE:
        bookings = tuple(b for b in room.bookings if b.slot != command.slot)
        return campus.with_room(replace(room, bookings=bookings))
    raise ValueError(f"unsupported command {command.field.value}/{command.action.value}")


def inject_drift(campus: CampusSnapshot, room_id: str, field: Field | str, delta: float) -> CampusSnapshot:
    field = Field(field)
    room = campus.room(room_id)
    if field is Field.TEMPERATURE:
        return campus.with_room(replace(room, temperature_c=_clamp_temp(room.temperature_c + delta)))
    if field is Field.LIGHT:
        return campus.with_room(replace(room, light_lux=_clamp_lux(room.light_lux + delta)))
    raise ValueError("drift applies to temperature or light only")


def room_order_key(room: RoomState, preferences: Optional[PreferenceSet]):
    """Total order for "next-best room": temperature distance, capacity, id."""
    distance = 0.0
    if preferences is not None and preferences.temperature_c is not None:
        distance = abs(room.temperature_c - preferences.temperature_c)
    return (distance, room.capacity, room.room_id)


def query_available(
    campus: CampusSnapshot,
    slot: Slot,
    preferences: Optional[PreferenceSet] = None,
    busy: Mapping[str, Iterable[Slot]] | None = None,
) -> list[str]:
    """Rooms free for ``slot`` that fit the required capacity, best first.

    ``busy`` adds reservations that are planned but not yet applied.
    """
    if slot[0] >= slot[1]:
        raise ValueError(f"empty slot {slot}")
    required = preferences.room_capacity if preferences is not None else None
    candidates = []
    for room in campus.rooms.values():
        if required is not None and room.capacity < required:
            continue
        if not room.is_free(slot):
            continue
        if busy and any(overlaps(s, slot) for s in busy.get(room.room_id, ())):
            continue
        candidates.append(room)
    candidates.sort(key=lambda r: room_order_key(r, preferences))
    return [r.room_id for r in candidates]


# -- dataset registry ------------------------------------------------------

AVAILABILITY_SCHEMA = "availability"
SENSOR_SCHEMA = "sensor"
REGISTERED_SCHEMAS = frozenset({AVAILABILITY_SCHEMA, SENSOR_SCHEMA})


@dataclass(frozen=True)
class DatasetRef:
    """A named table over the campus; ``records`` is the snapshot it reads."""

    name: str
    schema_tag: str
    records: Optional[CampusSnapshot] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.schema_tag not in REGISTERED_SCHEMAS:
            raise ValueError(f"unregistered schema tag {self.schema_tag!r}")

    def rows(self) -> list[dict]:
        if self.records is None:
            return []
        rooms = [self.records.rooms[r] for r in ROOM_IDS]
        if self.schema_tag == AVAILABILITY_SCHEMA:
            return [{"room_id": r.room_id, "capacity": r.capacity, "temperature_c": r.temperature_c,
                     "bookings": [b.slot for b in r.bookings]} for r in rooms]
        return [{"room_id": r.room_id, "temperature_c": r.temperature_c, "light_lux": r.light_lux} for r in rooms]


def dataset_registry(campus: CampusSnapshot) -> list[DatasetRef]:
    return [
        DatasetRef("room_availability", AVAILABILITY_SCHEMA, campus),
        DatasetRef("room_sensors", SENSOR_SCHEMA, campus),
    ]


# -- table file ------------------------------------------------------------

TABLE_COLUMNS = ("room_id", "capacity", "temperature_c", "light_lux", "bookings")


def format_table(campus: CampusSnapshot) -> str:
    lo, hi = TEMPERATURE_RANGE_C
    lines = [
        f"# {TABLE_FORMAT}",
        f"# as_of={campus.as_of} seed={campus.seed if campus.seed is not None else '-'}",
        f"# temperature_range_c={lo:g}-{hi:g} light_bands_lux={','.join(f'{b:g}' for b in LIGHT_BANDS_LUX)}"
        f" booking_hours={WORK_START_HOUR:02d}-{WORK_END_HOUR:02d} bookings=start-end@owner;...",
        "\t".join(TABLE_COLUMNS),
    ]
    for room_id in ROOM_IDS:
        r = campus.rooms[room_id]
        bookings = ";".join(f"{b.start}-{b.end}@{b.owner}" for b in r.bookings) or "-"
        lines.append(f"{r.room_id}\t{r.capacity}\t{r.temperature_c!r}\t{r.light_lux!r}\t{bookings}")
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> CampusSnapshot:
    as_of = None
    seed = None
    rooms = {}
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if token.startswith("as_of="):
                    as_of = int(token[6:])
                elif token.startswith("seed=") and token[5:] != "-":
                    seed = int(token[5:])
            continue
        cols = line.split("\t")
        if not header_seen:
            if tuple(cols) != TABLE_COLUMNS:
                raise ValueError(f"line {lineno}: unexpected column header")
            header_seen = True
            continue
        if len(cols) != len(TABLE_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(TABLE_COLUMNS)} columns")
        bookings = []
        if cols[4] != "-":
            for item in cols[4].split(";"):
                span, _, owner = item.partition("@")
                start, _, end = span.partition("-")
                bookings.append(Booking(int(start), int(end), owner or "pre"))
        rooms[cols[0]] = RoomState(cols[0], int(cols[1]), float(cols[2]), float(cols[3]), tuple(bookings))
    if as_of is None:
        raise ValueError("campus table lacks an as_of header")
    return CampusSnapshot(rooms=rooms, as_of=as_of, seed=seed)


def write_table(campus: CampusSnapshot, path: str | Path) -> None:
    Path(path).write_text(format_table(campus), encoding="utf-8")


def read_table(path: str | Path) -> CampusSnapshot:
    return parse_table(Path(path).read_text(encoding="utf-8"))


class CampusSink:
    """Reference control system: applies dispatched commands to a live campus.

    Idempotent per command id. Mutation is serialised by a lock.
    """

    def __init__(self, campus: CampusSnapshot):
        self._campus = campus
        self._applied: set[str] = set()
        self._lock = threading.Lock()
        self.delivered: list[str] = []

    @property
    def campus(self) -> CampusSnapshot:
        with self._lock:
            return self._campus

    def mutate(self, fn) -> None:
        with self._lock:
            self._campus = fn(self._campus)

    def apply(self, command: Command) -> None:
        with self._lock:
            if command.id in self._applied:
                return
            self._campus = apply_command(self._campus, command)
            self._applied.add(command.id)
            self.delivered.append(command.id)
