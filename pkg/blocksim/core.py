"""
Domain types shared by every module: requests, instance configuration, status snapshots

Simulated time is a float of seconds. Token contents are never represented, only counts.
"""
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Deque, List, Optional, Tuple

from pydantic import BaseModel, Field

from blocksim.errors import InvalidConfig

Seconds = float


class RequestState(str, Enum):
    created = "Created"
    dispatched = "Dispatched"
    waiting = "Waiting"
    running = "Running"
    preempted = "Preempted"
    finished = "Finished"


class LocalPolicy(str, Enum):
    chunked_prefill = "ChunkedPrefill"
    prefill_priority = "PrefillPriority"


@dataclass
class Request:
    """
    One inference query and its lifecycle

    Mutated only by the engine thread that owns it.
    """

    id: int
    prompt_tokens: int
    true_output_tokens: int
    estimated_output_tokens: int
    arrival_time: Seconds
    dispatch_time: Optional[Seconds] = None
    first_token_time: Optional[Seconds] = None
    finish_time: Optional[Seconds] = None
    state: RequestState = RequestState.created
    prefill_progress: int = 0
    decoded_tokens: int = 0
    instance_id: Optional[int] = None
    preemptions: int = 0
    prefilled_total: int = 0

    @property
    def ttft(self) -> Optional[Seconds]:
        """Time from arrival at the serving instance to the first token"""
        if self.first_token_time is None or self.dispatch_time is None:
            return None
        return self.first_token_time - self.dispatch_time

    @property
    def e2e_latency(self) -> Optional[Seconds]:
        """Time from client arrival to the last token"""
        if self.finish_time is None:
            return None
        return self.finish_time - self.arrival_time

    @property
    def scheduling_overhead(self) -> Optional[Seconds]:
        if self.dispatch_time is None:
            return None
        return self.dispatch_time - self.arrival_time

    @property
    def is_finished(self) -> bool:
        return self.state is RequestState.finished


class CostModelParams(BaseModel):
    """Linear batch cost model coefficients"""

    c0: float = 0.01
    c_prefill: float = 1e-4
    c_decode: float = 1e-3
    c_context: float = 1e-7

    class Config:
        frozen = True


class InstanceConfig(BaseModel):
    instance_id: int = 0
    total_blocks: int = 1056
    block_size: int = 16
    max_batch_size: int = 48
    chunk_budget: int = 512
    local_policy: LocalPolicy = LocalPolicy.chunked_prefill
    cost_model: CostModelParams = Field(default_factory=CostModelParams)

    class Config:
        frozen = True

    @property
    def total_tokens(self) -> int:
        """KV-cache capacity in tokens"""
        return self.total_blocks * self.block_size


class RequestView(BaseModel):
    """Per-request progress as exported by the status API"""

    id: int
    prompt_tokens: int
    estimated_output_tokens: int
    prefill_progress: int = 0
    decoded_tokens: int = 0

    class Config:
        frozen = True


class InstanceSnapshot(BaseModel):
    """
    Status payload of one instance

    running is ordered by batch-admission time, oldest first; waiting is in queue order.
    busy_until is the end of the step in flight (None when idle); progress counters already
    include that step.
    """

    instance_id: int
    snapshot_time: Seconds
    free_blocks: int
    batch_size: int
    qpm: int = 0
    running: List[RequestView] = Field(default_factory=list)
    waiting: List[RequestView] = Field(default_factory=list)
    busy_until: Optional[Seconds] = None

    class Config:
        frozen = True

    def used_blocks(self, total_blocks: int) -> int:
        return total_blocks - self.free_blocks


def blocks_needed(tokens: int, block_size: int) -> int:
    """
    Number of fixed-size memory blocks holding {tokens}

    >>> blocks_needed(0, 16), blocks_needed(100, 16), blocks_needed(512, 16)
    (0, 7, 32)
    """
    return -(-tokens // block_size)


_POSITIVE_FIELDS: Tuple[str, ...] = ("total_blocks", "block_size", "max_batch_size")


def validate_instance_config(cfg: InstanceConfig) -> None:
    """
    Check InstanceConfig invariants

    :raise InvalidConfig naming the first violated field
    """
    for field in _POSITIVE_FIELDS:
        if getattr(cfg, field) < 1:
            raise InvalidConfig(field, "must be >= 1")

    if cfg.chunk_budget < cfg.block_size:
        raise InvalidConfig("chunk_budget", "must be >= block_size")

    cost = cfg.cost_model
    for field in ("c0", "c_prefill", "c_decode", "c_context"):
        if getattr(cost, field) < 0:
            raise InvalidConfig(f"cost_model.{field}", "must be >= 0")
    if cost.c0 <= 0:
        raise InvalidConfig("cost_model.c0", "must be > 0")


QPM_WINDOW: Seconds = 60.0


class DispatchWindow:
    """
    Dispatch timestamps in the trailing 60 s

    A dispatch aged exactly 60 s has left the window.

    >>> window = DispatchWindow()
    >>> for t in range(60):
    ...     window.record(float(t))
    >>> window.count(60.0)
    59
    """

    def __init__(self, span: Seconds = QPM_WINDOW) -> None:
        self.span = span
        self._times: Deque[Seconds] = deque()

    def record(self, now: Seconds) -> None:
        self._times.append(now)
        self._prune(now)

    def count(self, now: Seconds) -> int:
        self._prune(now)
        return len(self._times)

    def _prune(self, now: Seconds) -> None:
        while self._times and now - self._times[0] >= self.span:
            self._times.popleft()
