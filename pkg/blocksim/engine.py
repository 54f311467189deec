"""
Deterministic discrete-event simulation kernel

Events are ordered by (fire_time, seq); seq is assigned by the engine in push order, so two
events at the same time are processed in the order they were pushed.
"""
import heapq
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Callable, Dict, List, Optional

from blocksim.core import Seconds
from blocksim.errors import HandlerFailure, TimeTravel

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    arrival = "Arrival"
    dispatch = "Dispatch"
    batch_complete = "BatchComplete"
    provision_complete = "ProvisionComplete"
    probe = "Probe"


@dataclass(frozen=True, order=True)
class Event:
    """
    Scheduled occurrence; target is the request id (Arrival, Dispatch, Probe) or the
    instance id (BatchComplete, ProvisionComplete)
    """

    fire_time: Seconds
    seq: int
    kind: EventKind = field(compare=False)
    target: int = field(compare=False)

    def to_record(self) -> Dict:
        return {
            "time": self.fire_time,
            "seq": self.seq,
            "kind": self.kind.value,
            "target": self.target,
        }


Handler = Callable[[Event], None]


class Engine:
    """
    Single-threaded event loop

    Usage:

    >>> engine = Engine()
    >>> seen = []
    >>> engine.register(EventKind.arrival, lambda event: seen.append(event.target))
    >>> _ = engine.schedule(EventKind.arrival, 1.0, 7)
    >>> [event.target for event in engine.run_until()]
    [7]
    """

    def __init__(self, now: Seconds = 0.0) -> None:
        self.now = now
        self._queue: List[Event] = []
        self._seq = 0
        self._handlers: Dict[EventKind, Handler] = {}

    def register(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def next_seq(self) -> int:
        seq = self._seq
        self._seq += 1
        return seq

    def schedule(self, kind: EventKind, fire_time: Seconds, target: int) -> Event:
        """Create event with the next sequence number and push it"""
        event = Event(fire_time, self.next_seq(), kind, target)
        self.push(event)
        return event

    def push(self, event: Event) -> None:
        """
        Queue {event}

        :raise TimeTravel if the event fires before the current time
        """
        if event.fire_time < self.now:
            raise TimeTravel(event.fire_time, self.now)
        heapq.heappush(self._queue, event)

    def peek(self) -> Optional[Event]:
        return self._queue[0] if self._queue else None

    def __len__(self) -> int:
        return len(self._queue)

    def run_until(
        self, deadline: Optional[Seconds] = None, stop: Optional[Callable[[], bool]] = None
    ) -> List[Event]:
        """
        Process events in (fire_time, seq) order

        :param deadline: events firing after it stay queued; None runs to exhaustion
        :param stop: checked after each event, processing halts once it returns True
        :return: ordered log of processed events
        :raise HandlerFailure wrapping the handler error, with the failing event attached
        """
        log: List[Event] = []
        while self._queue:
            if deadline is not None and self._queue[0].fire_time > deadline:
                break

            event = heapq.heappop(self._queue)
            self.now = event.fire_time
            handler = self._handlers.get(event.kind)
            if handler is None:
                raise HandlerFailure(event, f"no handler for {event.kind.value}")

            try:
                handler(event)
            except HandlerFailure:
                raise
            except Exception as exc:
                raise HandlerFailure(event, str(exc)) from exc

            log.append(event)
            if stop is not None and stop():
                break

        logger.debug("processed %d events, now=%r", len(log), self.now)
        return log


def export_event_log(events: List[Event], out: IO[str]) -> None:
    """Write {events} as line-delimited JSON records"""
    for event in events:
        out.write(json.dumps(event.to_record(), sort_keys=True))
        out.write("\n")
