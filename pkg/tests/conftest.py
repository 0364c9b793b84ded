import datetime as dt
from pathlib import Path

import pytest

from intentflow.campus_sim import generate_campus
from intentflow.decision import Solution, SubTask
from intentflow.lm_gateway import ScriptedBackend
from intentflow.model import Intent, PreferenceSet

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "intentflow" / "scenarios"
DAY = dt.date(2025, 3, 10)
BASE = 1741564800  # 2025-03-10T00:00:00Z
HOUR = 3600


@pytest.fixture
def campus():
    return generate_campus(42, DAY)


def make_intent(id="i1", deadline=BASE + 15 * HOUR, submitted=BASE + 13 * HOUR, prefs=None,
                text="book a meeting room", plan_type="meeting room reservation", user="u1"):
    return Intent(id=id, user_id=user, plan_type=plan_type, deadline=deadline, submitted_at=submitted,
                  raw_text=text, preferences=prefs)


def make_solution(id="S1", lm_calls=2, depth=None, label="environment_analysis", narrative="plan",
                  planned=(), intent_id="i1"):
    """Chain of ``depth`` stages holding ``lm_calls`` LM sub-tasks in total."""
    depth = depth or min(lm_calls, 3)
    tasks = []
    for i in range(lm_calls):
        stage = min(i, depth - 1)
        deps = frozenset({"t0"}) if stage > 0 and i != 0 else frozenset()
        if stage > 1:
            deps = frozenset({f"t{stage - 1}"})
        tasks.append(SubTask(f"t{i}", f"step {i}", "booking" if i == 0 else "temperature", stage, deps))
    return Solution(id, intent_id, tuple(tasks), label, narrative, tuple(planned))


def scripted(*entries):
    return ScriptedBackend.from_entries(entries)


PREFS_21 = PreferenceSet(temperature_c=21.0)
