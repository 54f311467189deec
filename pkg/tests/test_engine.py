import io
import json
from typing import List

import pytest

from blocksim.engine import Engine, Event, EventKind, export_event_log
from blocksim.errors import HandlerFailure, TimeTravel


def test_engine_processes_events_in_time_order() -> None:
    engine = Engine()
    seen: List[int] = []
    engine.register(EventKind.arrival, lambda event: seen.append(event.target))

    engine.schedule(EventKind.arrival, 3.0, 3)
    engine.schedule(EventKind.arrival, 1.0, 1)
    engine.schedule(EventKind.arrival, 2.0, 2)
    engine.run_until()

    assert seen == [1, 2, 3]
    assert engine.now == 3.0


def test_engine_breaks_time_ties_by_push_order() -> None:
    engine = Engine()
    seen: List[int] = []
    engine.register(EventKind.arrival, lambda event: seen.append(event.target))

    for target in (5, 2, 9):
        engine.schedule(EventKind.arrival, 1.0, target)
    engine.run_until()

    assert seen == [5, 2, 9]


def test_engine_runs_events_scheduled_at_now_after_current_one() -> None:
    engine = Engine()
    seen: List[str] = []

    def on_arrival(event: Event) -> None:
        seen.append("arrival")
        engine.schedule(EventKind.probe, engine.now, event.target)

    engine.register(EventKind.arrival, on_arrival)
    engine.register(EventKind.probe, lambda event: seen.append("probe"))
    engine.schedule(EventKind.arrival, 1.0, 0)
    engine.schedule(EventKind.arrival, 2.0, 1)
    engine.run_until()

    assert seen == ["arrival", "probe", "arrival", "probe"]


def test_engine_rejects_events_in_the_past() -> None:
    engine = Engine(now=5.0)

    with pytest.raises(TimeTravel):
        engine.schedule(EventKind.arrival, 4.0, 0)


def test_engine_wraps_handler_errors_with_the_failing_event() -> None:
    engine = Engine()

    def broken(event: Event) -> None:
        raise ValueError("boom")

    engine.register(EventKind.arrival, broken)
    scheduled = engine.schedule(EventKind.arrival, 1.0, 42)

    with pytest.raises(HandlerFailure) as exc_info:
        engine.run_until()

    assert exc_info.value.event == scheduled
    assert "boom" in str(exc_info.value)


def test_engine_fails_on_unregistered_kind() -> None:
    engine = Engine()
    engine.schedule(EventKind.provision_complete, 1.0, 3)

    with pytest.raises(HandlerFailure):
        engine.run_until()


def test_engine_run_until_deadline_keeps_later_events() -> None:
    engine = Engine()
    engine.register(EventKind.arrival, lambda event: None)
    engine.schedule(EventKind.arrival, 1.0, 0)
    engine.schedule(EventKind.arrival, 5.0, 1)

    processed = engine.run_until(deadline=2.0)

    assert [event.target for event in processed] == [0]
    assert len(engine) == 1
    assert engine.peek() is not None and engine.peek().target == 1  # type: ignore


def test_engine_run_until_stops_on_predicate() -> None:
    engine = Engine()
    seen: List[int] = []
    engine.register(EventKind.arrival, lambda event: seen.append(event.target))
    for target in range(5):
        engine.schedule(EventKind.arrival, float(target), target)

    engine.run_until(stop=lambda: len(seen) == 2)

    assert seen == [0, 1]
    assert len(engine) == 3


def test_export_event_log_writes_one_record_per_line() -> None:
    engine = Engine()
    engine.register(EventKind.arrival, lambda event: None)
    engine.schedule(EventKind.arrival, 0.5, 7)
    out = io.StringIO()

    export_event_log(engine.run_until(), out)

    lines = out.getvalue().splitlines()
    assert [json.loads(line) for line in lines] == [
        {"kind": "Arrival", "seq": 0, "target": 7, "time": 0.5}
    ]
