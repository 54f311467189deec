from typing import Any, Optional


class BlockSimError(Exception):
    """Base class of every error raised by blocksim"""


# ==============
# CONFIGURATION & INPUT
# ==============


class InvalidConfig(BlockSimError):
    """Configuration value violates its invariant"""

    def __init__(self, field: str, message: str = "") -> None:
        self.field = field
        super().__init__(f"invalid {field}" + (f": {message}" if message else ""))


class ParseError(BlockSimError):
    """Trace line cannot be parsed"""

    def __init__(self, line: int, message: str = "") -> None:
        self.line = line
        super().__init__(f"line {line}: {message}")


class InvalidRecord(BlockSimError):
    """Trace record parsed but violates its invariants"""

    def __init__(self, field: str, line: Optional[int] = None, message: str = "") -> None:
        self.field = field
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}invalid {field}" + (f": {message}" if message else ""))


# ==============
# SIMULATION
# ==============


class TimeTravel(BlockSimError):
    """Event scheduled before the current simulated time"""

    def __init__(self, fire_time: float, now: float) -> None:
        self.fire_time = fire_time
        self.now = now
        super().__init__(f"event at {fire_time!r} pushed when now={now!r}")


class HandlerFailure(BlockSimError):
    """Event handler raised; the failing event is attached"""

    def __init__(self, event: Any, message: str = "") -> None:
        self.event = event
        super().__init__(f"handler failed on {event!r}" + (f": {message}" if message else ""))


class RequestTooLarge(BlockSimError):
    """Request can never fit even on an empty instance"""

    def __init__(self, request_id: int, blocks: int, total_blocks: int) -> None:
        self.request_id = request_id
        self.blocks = blocks
        self.total_blocks = total_blocks
        super().__init__(
            f"request {request_id} needs {blocks} blocks, instance has {total_blocks}"
        )


class EmptyPlan(BlockSimError):
    """Nothing is runnable: the instance is idle"""


class Deadlock(BlockSimError):
    """A lone running request cannot proceed even with the whole memory free"""

    def __init__(self, request_id: int, needed: int, total_blocks: int) -> None:
        self.request_id = request_id
        super().__init__(
            f"request {request_id} needs {needed} blocks alone, instance has {total_blocks}"
        )


class PredictionFailure(BlockSimError):
    """Forward simulation of a candidate failed"""

    def __init__(self, instance_id: int, message: str = "") -> None:
        self.instance_id = instance_id
        super().__init__(f"prediction on instance {instance_id} failed: {message}")


class NoInstances(BlockSimError):
    """Dispatch called without any live instance"""


class PredictorUnavailable(BlockSimError):
    """Predictor could not be reached or answered with a failure"""


class DuplicateInstance(BlockSimError):
    """Instance id is already part of the cluster"""

    def __init__(self, instance_id: int) -> None:
        self.instance_id = instance_id
        super().__init__(f"instance {instance_id} already exists")


# ==============
# METRICS
# ==============


class IncompleteRun(BlockSimError):
    """Unfinished requests remain at the end of the log"""

    def __init__(self, unfinished: int) -> None:
        self.unfinished = unfinished
        super().__init__(f"{unfinished} requests unfinished at log end")


class NoCapacity(BlockSimError):
    """The lowest tested QPS already violates the SLO"""

    def __init__(self, qps: float) -> None:
        self.qps = qps
        super().__init__(f"SLO violated at the lowest tested qps {qps}")
