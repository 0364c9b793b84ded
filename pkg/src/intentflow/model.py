"""Domain types shared across the pipeline: intents, preferences, commands."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Optional, Union

LIGHT_LEVELS = ("off", "dim", "bright")
# Lux targets for named light levels; "dim" and "bright" sit inside the
# matching bands (dim <= 300 lux, bright >= 600 lux).
LIGHT_TARGET_LUX = {"off": 0.0, "dim": 150.0, "bright": 700.0}
DIM_MAX_LUX = 300.0
BRIGHT_MIN_LUX = 600.0

TEMP_MIN_C = 5.0
TEMP_MAX_C = 40.0


class Field(str, enum.Enum):
    BOOKING = "booking"
    TEMPERATURE = "temperature"
    LIGHT = "light"


class Action(str, enum.Enum):
    SET = "set"
    INCREASE = "increase"
    DECREASE = "decrease"
    RESERVE = "reserve"
    RELEASE = "release"
    ALERT = "alert"


MAGNITUDE_ACTIONS = frozenset({Action.SET, Action.INCREASE, Action.DECREASE})


@dataclass(frozen=True)
class PreferenceSet:
    temperature_c: Optional[float] = None
    light_level: Union[str, float, None] = None
    room_capacity: Optional[int] = None
    other: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.temperature_c is not None:
            t = float(self.temperature_c)
            if not TEMP_MIN_C <= t <= TEMP_MAX_C:
                raise ValueError(f"temperature preference {t} outside [{TEMP_MIN_C}, {TEMP_MAX_C}]")
            object.__setattr__(self, "temperature_c", t)
        if isinstance(self.light_level, str):
            if self.light_level not in LIGHT_LEVELS:
                raise ValueError(f"unknown light level {self.light_level!r}")
        elif self.light_level is not None:
            lux = float(self.light_level)
            if lux < 0:
                raise ValueError("light preference must be non-negative lux")
            object.__setattr__(self, "light_level", lux)
        if self.room_capacity is not None and int(self.room_capacity) < 1:
            raise ValueError("room_capacity must be positive")
        object.__setattr__(self, "other", dict(self.other))

    def target_lux(self) -> Optional[float]:
        if self.light_level is None:
            return None
        if isinstance(self.light_level, str):
            return LIGHT_TARGET_LUX[self.light_level]
        return float(self.light_level)

    def is_empty(self) -> bool:
        return (self.temperature_c is None and self.light_level is None
                and self.room_capacity is None and not self.other)

    def to_dict(self) -> dict[str, Any]:
        return {
            "temperature_c": self.temperature_c,
            "light_level": self.light_level,
            "room_capacity": self.room_capacity,
            "other": dict(sorted(self.other.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PreferenceSet":
        return cls(
            temperature_c=data.get("temperature_c"),
            light_level=data.get("light_level"),
            room_capacity=data.get("room_capacity"),
            other={str(k): str(v) for k, v in (data.get("other") or {}).items()},
        )


@dataclass(frozen=True)
class Intent:
    id: str
    user_id: str
    plan_type: str
    deadline: int
    submitted_at: int
    raw_text: str
    preferences: Optional[PreferenceSet] = None

    def __post_init__(self) -> None:
        if not self.plan_type or not self.plan_type.strip():
            raise ValueError("plan_type must be non-empty")

    def slot(self, default_minutes: int = 60) -> tuple[int, int]:
        """Booking slot ``[deadline, deadline + duration)``."""
        minutes = default_minutes
        if self.preferences is not None and "duration_min" in self.preferences.other:
            minutes = int(self.preferences.other["duration_min"])
        return (self.deadline, self.deadline + 60 * minutes)


@dataclass(frozen=True)
class Command:
    id: str
    room: str
    field: Field
    action: Action
    launch_at: int
    issued_by: str
    intent_id: str
    created_at: int
    magnitude: Optional[float] = None
    slot: Optional[tuple[int, int]] = None
    expires_at: Optional[int] = None
    note: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "field", Field(self.field))
        object.__setattr__(self, "action", Action(self.action))
        if (self.magnitude is not None) != (self.action in MAGNITUDE_ACTIONS):
            raise ValueError(f"command {self.id}: magnitude must be present iff action is set/increase/decrease")
        if self.magnitude is not None:
            object.__setattr__(self, "magnitude", float(self.magnitude))
        if self.launch_at < self.created_at:
            raise ValueError(f"command {self.id}: launch_at precedes creation time")
        if self.action in (Action.RESERVE, Action.RELEASE):
            if self.slot is None or self.slot[0] >= self.slot[1]:
                raise ValueError(f"command {self.id}: {self.action.value} needs a non-empty slot")
        if self.slot is not None:
            object.__setattr__(self, "slot", (int(self.slot[0]), int(self.slot[1])))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["field"] = self.field.value
        d["action"] = self.action.value
        d["slot"] = list(self.slot) if self.slot else None
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Command":
        data = dict(data)
        if data.get("slot") is not None:
            data["slot"] = tuple(data["slot"])
        return cls(**data)
