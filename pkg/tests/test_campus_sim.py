
import pytest
from hypothesis import given, settings, strategies as st

from intentflow.campus_sim import (
    ROOM_IDS,
    BookingConflict,
    CampusSink,
    UnknownRoom,
    apply_command,
    format_table,
    generate_campus,
    inject_drift,
    overlaps,
    parse_table,
    query_available,
    write_table,
    read_table,
)
from intentflow.model import Command, PreferenceSet

from conftest import BASE, DAY, HOUR


def cmd(room, field, action, magnitude=None, slot=None, id="c1", intent="i1"):
    return Command(id=id, room=room, field=field, action=action, magnitude=magnitude, slot=slot,
                   launch_at=BASE, created_at=BASE, issued_by="test", intent_id=intent)


def test_generation_is_deterministic(campus):
    assert generate_campus(42, DAY) == campus
    assert generate_campus(43, DAY) != campus


@given(st.integers(0, 2**64 - 1))
@settings(max_examples=50)
def test_generation_constraints(seed):
    c = generate_campus(seed, DAY)
    assert set(c.rooms) == set(ROOM_IDS) and len(c.rooms) == 15
    for room in c.rooms.values():
        assert 18.0 <= room.temperature_c <= 26.0
        assert room.light_lux in (150.0, 400.0, 700.0)
        for b in room.bookings:
            assert BASE + 8 * HOUR <= b.start < b.end <= BASE + 18 * HOUR
        slots = [b.slot for b in room.bookings]
        assert not any(overlaps(a, b) for i, a in enumerate(slots) for b in slots[i + 1:])


def test_apply_temperature(campus):
    c = apply_command(campus, cmd("PK258", "temperature", "set", 21))
    assert c.room("PK258").temperature_c == 21.0
    c = apply_command(inject_drift(c, "PK258", "temperature", 2.0), cmd("PK258", "temperature", "decrease", 2))
    assert c.room("PK258").temperature_c == 21.0
    assert campus.room("PK258").temperature_c == 23.9  # original untouched


def test_reserve_and_conflict(campus):
    slot = (BASE + 15 * HOUR, BASE + 16 * HOUR)
    c = apply_command(campus, cmd("PK258", "booking", "reserve", slot=slot))
    assert "PK258" not in query_available(c, slot)
    assert "PK258" not in query_available(c, (slot[0] + 1800, slot[1] + 1800))
    assert "PK258" in query_available(c, (slot[1], slot[1] + HOUR))
    with pytest.raises(BookingConflict):
        apply_command(c, cmd("PK258", "booking", "reserve", slot=slot, id="c2", intent="i2"))
    released = apply_command(c, cmd("PK258", "booking", "release", slot=slot, id="c3"))
    assert "PK258" in query_available(released, slot)


def test_alert_is_noop(campus):
    assert apply_command(campus, cmd("PK258", "booking", "alert")) == campus


def test_unknown_room(campus):
    with pytest.raises(UnknownRoom):
        inject_drift(campus, "XX000", "temperature", 1.0)


def test_drift_clamps(campus):
    assert inject_drift(campus, "PK261", "light", -1000).room("PK261").light_lux == 0.0
    c = apply_command(campus, cmd("PK258", "temperature", "set", 21))
    assert inject_drift(c, "PK258", "temperature", 2.0).room("PK258").temperature_c == 23.0
    with pytest.raises(ValueError):
        inject_drift(campus, "PK258", "booking", 1.0)


@given(st.sampled_from(ROOM_IDS), st.floats(0.1, 5.0), st.sampled_from(["temperature", "light"]))
def test_increase_then_decrease_restores(room, delta, field):
    c = generate_campus(42, DAY)
    if field == "light":
        delta *= 10
    up = apply_command(c, cmd(room, field, "increase", delta))
    back = apply_command(up, cmd(room, field, "decrease", delta, id="c2"))
    before = c.room(room)
    after = back.room(room)
    assert after.temperature_c == pytest.approx(before.temperature_c, abs=1e-12)
    assert after.light_lux == pytest.approx(before.light_lux, abs=1e-12)


def test_query_orders_by_temperature_distance(campus):
    slot = (BASE + 6 * HOUR, BASE + 7 * HOUR)  # before working hours: every room free
    got = query_available(campus, slot, PreferenceSet(temperature_c=21.0))
    assert len(got) == 15
    assert abs(campus.room(got[0]).temperature_c - 21.0) == min(abs(r.temperature_c - 21.0) for r in campus.rooms.values())


def test_query_matches_linear_scan_oracle(campus):
    slot = (BASE + 15 * HOUR, BASE + 16 * HOUR)
    prefs = PreferenceSet(temperature_c=22.0, room_capacity=6)
    free = []
    for room in campus.rooms.values():
        busy = any(b.start < slot[1] and slot[0] < b.end for b in room.bookings)
        if not busy and room.capacity >= 6:
            free.append((abs(room.temperature_c - 22.0), room.capacity, room.room_id))
    expected = [r for _, _, r in sorted(free)]
    assert query_available(campus, slot, prefs) == expected
    assert expected[:3] == ["PK265", "PK263", "PK264"]


def test_fully_booked_slot_is_empty(campus):
    slot = (BASE + 15 * HOUR, BASE + 16 * HOUR)
    c = campus
    for i, room in enumerate(query_available(campus, slot)):
        c = apply_command(c, cmd(room, "booking", "reserve", slot=slot, id=f"c{i}"))
    assert query_available(c, slot) == []


def test_table_round_trip(campus, tmp_path):
    assert parse_table(format_table(campus)) == campus
    path = tmp_path / "campus.tsv"
    write_table(inject_drift(campus, "PK258", "temperature", 0.123456789), path)
    assert read_table(path) == inject_drift(campus, "PK258", "temperature", 0.123456789)
    assert format_table(campus).startswith("# intentflow-campus/1")


def test_sink_is_idempotent(campus):
    sink = CampusSink(campus)
    c = cmd("PK258", "temperature", "increase", 1.0)
    sink.apply(c)
    sink.apply(c)
    assert sink.campus.room("PK258").temperature_c == pytest.approx(24.9)
    assert sink.delivered == ["c1"]
