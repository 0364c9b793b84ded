"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal."""

import random
import time
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from intentflow import decision as dm
from intentflow import management as mg
from intentflow.campus_sim import ROOM_IDS, CampusSink, apply_command
from intentflow.execution import RendezvousStore, detect_conflicts, resolve_conflicts
from intentflow.lm_gateway import Backend
from intentflow.metrics import ClaimSet, lm_call_usage_cost, precision, recall
from intentflow.model import Action, Command, Field, PreferenceSet
from intentflow.scenario import load_backend, load_scenario, replay_learning, run_pipeline, run_scenario

from conftest import BASE, HOUR, SCENARIOS, make_intent
from test_decision import QUINTET_ROWS, brute_force_front, scored_rows
from test_scenarios import variant


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_criterion_01_usage_cost_golden(verdict):
    golden = {(4, 4): 0.6321, (3, 4): 0.5276, (4, 5): 0.5507, (2, 3): 0.4866, (3, 3): 0.6321}
    t = time.perf_counter()
    got = {k: lm_call_usage_cost(*k) for k in golden}
    elapsed = time.perf_counter() - t
    worst = max(abs(got[k] - v) for k, v in golden.items())
    verdict(1, worst <= 1e-4 and elapsed < 1e-3, f"max |err|={worst:.2e} (tol 1e-4), {elapsed * 1e6:.0f} us")


def test_criterion_02_pareto(verdict):
    t = time.perf_counter()
    front = [s.id for s in dm.pareto_front(scored_rows(QUINTET_ROWS))]
    rng = random.Random(2024)
    mismatches = 0
    for _ in range(1000):
        rows = [(rng.choice([0.2, 0.4, 0.6, 0.8]), rng.choice([0.3, 0.5, 0.7]), rng.choice([0.0, 0.5, 1.0]))
                for _ in range(rng.randint(1, 8))]
        got = [int(s.id[1:]) - 1 for s in dm.pareto_front(scored_rows(rows))]
        mismatches += got != brute_force_front(rows)
    elapsed = time.perf_counter() - t
    ok = front == ["S3", "S4"] and mismatches == 0 and elapsed < 5
    verdict(2, ok, f"front={front}, 1000 random instances, {mismatches} mismatches, {elapsed:.2f} s")


def test_criterion_03_urgency(verdict):
    now = BASE + 8 * HOUR
    rng = random.Random(3)
    cases = [(-rng.randint(1, 86400), "stale") for _ in range(250)]
    cases += [(rng.randint(1, 7199), "high") for _ in range(250)]
    cases += [(7200, "low")] + [(rng.randint(7201, 86400), "low") for _ in range(250)]
    bad = [d for d, want in cases if dm.classify_urgency(make_intent(deadline=now + d), now).level.value != want]
    verdict(3, not bad, f"{len(cases)} deadlines incl. delta=7200 -> low, {len(bad)} wrong")


def test_criterion_04_preference_inheritance(verdict, tmp_path):
    def sources(path):
        items = {i["id"]: i for i in run_scenario(path).data["intents"]}
        return items["meet-1600"]["preference_source"], items["meet-1600"]["preferences"], items

    src, prefs, items = sources(SCENARIOS / "fig2-preference-recall.json")
    inherits = src == "recalled" and items["meet-1600"]["recalled_case"] == "meet-1500" \
        and prefs == items["meet-1500"]["preferences"]

    def hour_later(s):
        for i in s["intents"]:
            if i["id"] == "meet-1600":
                i["submit_offset_s"] = 1800 + 3600
    (tmp_path / "dt").mkdir()
    dt_src, _, _ = sources(variant(tmp_path / "dt", "fig2-preference-recall", hour_later))

    def half_similar(f):
        for e in f["responses"]:
            if e["role"] == "personal" and e["key"] == "meet-1600":
                e["structured"]["plan_type"] = "team meeting lunch order"
    (tmp_path / "sim").mkdir()
    sim_src, _, _ = sources(variant(tmp_path / "sim", "fig2-preference-recall", edit_fixture=half_similar))
    ok = inherits and dt_src != "recalled" and sim_src != "recalled"
    verdict(4, ok, f"inherit={src}; dt=1h -> {dt_src}; sim=0.5 -> {sim_src}")


class Recorder(Backend):
    def __init__(self, inner):
        self.inner, self.prompts = inner, []

    def complete(self, prompt):
        self.prompts.append(prompt)
        return self.inner.complete(prompt)


def test_criterion_05_hint_injection(verdict):
    path = SCENARIOS / "learning-loop.json"
    scenario = load_scenario(path)
    backend = Recorder(load_backend(scenario.backend_fixture))
    report = run_pipeline(scenario, backend=backend)
    first, second = report.data["intents"]
    v = first["verdict"]
    round_two = [p for p in backend.prompts if p.key().startswith("review-1700/c")]
    needed = [f"solution: {first['selected']}", f"reason: {v['reason']}", f"factors: {'; '.join(v['factors'])}"]
    structural = bool(round_two) and all(
        all(any(h.startswith(n) for h in p.hints) for n in needed) for p in round_two)
    gain = replay_learning(path).similarity_gain
    ok = structural and second["best_similarity"] > first["best_similarity"] and gain >= 0.05
    verdict(5, ok, f"{len(round_two)} hinted prompts, best sim {first['best_similarity']} -> "
                   f"{second['best_similarity']} (gain {gain:.1%}, need >= 5%)")


class ListSink:
    def __init__(self):
        self.applied = []

    def apply(self, command):
        self.applied.append(command)


def test_criterion_06_queue_discipline(verdict):
    def trial(seed):
        rng = random.Random(seed)
        t0 = BASE + 9 * HOUR
        q, sink, early = mg.CommandQueue(), ListSink(), 0
        for i in range(rng.randint(1, 30)):
            launch = t0 + rng.randint(0, 3600)
            q.enqueue(Command(id=f"c{rng.randint(0, 10**6):07d}-{i}", room=rng.choice(ROOM_IDS),
                              field=Field.TEMPERATURE, action=Action.SET, magnitude=21.0,
                              launch_at=launch, issued_by="a", intent_id="i", created_at=t0), t0)
        t, repeats_ok = t0, True
        while t <= t0 + 3600:
            before = len(sink.applied)
            q.dispatch_due(t, sink)
            early += sum(c.launch_at > t for c in sink.applied[before:])
            repeats_ok &= q.dispatch_due(t, sink) == []
            t += rng.choice([30, 60, 300])
        q.dispatch_due(t0 + 3600, sink)
        keys = [(c.launch_at, c.id) for c in sink.applied]
        return early == 0 and keys == sorted(keys) and repeats_ok, q.dispatch_log()

    results = [trial(s) for s in range(300)]
    identical = all(trial(s)[1] == results[s][1] for s in range(0, 300, 10))
    ok = all(r[0] for r in results) and identical
    verdict(6, ok, f"300 randomized queues: ordering, no early delivery, idempotent; logs identical={identical}")


def test_criterion_07_closed_loop(verdict, campus):
    rng = random.Random(7)
    window_slot = (BASE + 15 * HOUR, BASE + 17 * HOUR)
    tick, failures, trials = 300, 0, 0
    prefs = PreferenceSet(temperature_c=21.0, light_level="bright")
    for _ in range(100):
        fld = rng.choice([Field.TEMPERATURE, Field.LIGHT])
        delta = rng.choice([-1, 1]) * (rng.uniform(0.6, 5) if fld is Field.TEMPERATURE else rng.uniform(60, 500))
        at = window_slot[0] + rng.randint(0, 15) * tick + rng.choice([0, 17])
        reserve = Command(id="r", room="PK306", field=Field.BOOKING, action=Action.RESERVE,
                          launch_at=BASE, issued_by="a", intent_id="i1", created_at=BASE, slot=window_slot)
        live = apply_command(campus, reserve)
        live = live.with_room(replace(live.room("PK306"), temperature_c=21.0, light_lux=700.0))
        if fld is Field.LIGHT and delta > 0:
            delta = -delta  # 700 lux is already the ceiling
        window = mg.MonitoringWindow("i1", "PK306", prefs, *window_slot)
        report = mg.run_monitoring([window], CampusSink(live), mg.CommandQueue(), tick, None, None,
                                   [mg.Drift(at, "PK306", fld, delta)])
        trials += 1
        events = report.events
        first_tick = (at - window_slot[0] + tick - 1) // tick
        ok = len(events) == 1 and events[0].field == fld.value and events[0].tick - first_tick < 2
        failures += not ok
    verdict(7, failures == 0, f"{trials} single-step drifts: exactly one correction within 2 ticks, "
                              f"{failures} failures")


def test_criterion_08_negotiation(verdict, campus):
    rng = random.Random(8)
    failures, alert_cases = 0, 0
    for trial in range(200):
        start = BASE + rng.randint(9, 16) * HOUR
        slot = (start, start + HOUR)
        k = rng.randint(2, 4)
        room = rng.choice(ROOM_IDS)
        intents, cmds = {}, []
        for j in range(k):
            iid = f"n{j}"
            intents[iid] = make_intent(iid, deadline=start, submitted=BASE + rng.randint(0, 7 * HOUR))
            offset = rng.choice([0, 0, 1800, -1800])
            cmds.append(Command(id=f"{iid}/t1/reserve", room=room, field=Field.BOOKING, action=Action.RESERVE,
                                launch_at=BASE + 8 * HOUR, issued_by="a", intent_id=iid,
                                created_at=BASE + 8 * HOUR, slot=(start + offset, start + offset + HOUR)))
        saturate = trial % 5 == 0
        if saturate:
            k = 2
            cmds = [c for c in cmds if c.intent_id in ("n0", "n1")]
            cmds = [replace(c, slot=slot) for c in cmds]
            cmds += [Command(id=f"x/{r}", room=r, field=Field.BOOKING, action=Action.RESERVE,
                             launch_at=BASE + 8 * HOUR, issued_by="a", intent_id=f"x{r}",
                             created_at=BASE + 8 * HOUR, slot=(start - HOUR, start + 2 * HOUR))
                     for r in ROOM_IDS if r != room]
        groups = detect_conflicts(cmds)
        winners = [min(g, key=lambda c: (intents[c.intent_id].submitted_at, c.intent_id)) for g in groups]
        final = resolve_conflicts(cmds, campus, RendezvousStore(), intents)
        ok = detect_conflicts(final) == []
        by_id = {c.id: c for c in final}
        ok &= all(by_id.get(w.id) is not None and by_id[w.id].room == room for w in winners)
        if saturate:
            alert_cases += 1
            ok &= sum(c.action is Action.ALERT for c in final) == 1
        failures += not ok
    verdict(8, failures == 0, f"200 double-booking trials ({alert_cases} without alternatives): "
                              f"{failures} failures")


@settings(max_examples=300, deadline=None)
@given(st.frozensets(st.sampled_from("abcdefgh"), min_size=1), st.frozensets(st.sampled_from("abcdefgh"), min_size=1))
def _identities(a, b):
    a, b = ClaimSet(a), ClaimSet(b)
    assert precision(a, a) == recall(a, a) == 1.0
    assert precision(a, b) == recall(b, a)
    assert 0.0 <= precision(a, b) <= 1.0 and 0.0 <= recall(a, b) <= 1.0


def test_criterion_09_precision_recall(verdict):
    try:
        _identities()
        ok, detail = True, "300 random claim-set pairs: self=1, swap duality, bounds hold"
    except AssertionError as exc:
        ok, detail = False, f"identity violated: {exc}"
    verdict(9, ok, detail)


def test_criterion_10_end_to_end(verdict, tmp_path):
    names = ["fig3-high-urgency", "fig4-low-urgency", "learning-loop", "fig2-preference-recall"]
    t = time.perf_counter()
    first = [run_scenario(SCENARIOS / f"{n}.json") for n in names]
    elapsed = time.perf_counter() - t
    second = [run_scenario(SCENARIOS / f"{n}.json") for n in names]
    identical = True
    for n, a, b in zip(names, first, second):
        da, db = a.write(tmp_path / "a" / n), b.write(tmp_path / "b" / n)
        identical &= all((da / f).read_bytes() == (db / f).read_bytes()
                         for f in ("report.txt", "dispatch.log", "monitor.log", "pareto.tsv"))
    verdict(10, identical and elapsed < 5, f"{len(names)} scenarios in {elapsed:.3f} s (limit 5 s), "
                                           f"byte-identical={identical}")
