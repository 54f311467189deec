"""
Simulated inference instance

A step is committed when it begins: blocks are allocated (preempting the newest running
request while allocation fails), progress counters advance and first-token/finish times are
stamped with the step end. The engine only learns about the step end through BatchComplete,
so every state observable in simulated time satisfies the memory and lifecycle invariants.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Deque, Dict, Iterable, List, Optional

from blocksim.backend.cost import batch_latency
from blocksim.backend.memory import MemoryManager
from blocksim.backend.plans import (
    BatchPlan,
    ChunkedPrefillPlanner,
    PrefillPriorityPlanner,
    tokens_after_chunk,
    tokens_after_decode,
)
from blocksim.core import (
    InstanceConfig,
    InstanceSnapshot,
    LocalPolicy,
    Request,
    RequestState,
    RequestView,
    Seconds,
    blocks_needed,
    validate_instance_config,
)
from blocksim.errors import Deadlock, RequestTooLarge

logger = logging.getLogger(__name__)

StepLatency = Callable[[BatchPlan], Seconds]


@dataclass
class StepOutcome:
    start: Seconds
    duration: Seconds
    plan: BatchPlan
    first_tokens: List[int] = field(default_factory=list)
    completions: List[int] = field(default_factory=list)
    preemptions: List[int] = field(default_factory=list)

    @property
    def end(self) -> Seconds:
        return self.start + self.duration


class InstanceState:
    """
    Waiting queue, running batch and block memory of one instance

    running is kept in batch-admission order, so the newest member is running[-1].
    """

    def __init__(
        self, config: InstanceConfig, step_latency: Optional[StepLatency] = None
    ) -> None:
        validate_instance_config(config)
        self.config = config
        self.memory = MemoryManager(config.total_blocks, config.block_size)
        self.running: List[Request] = []
        self.waiting: Deque[Request] = deque()
        self.step_latency: StepLatency = step_latency or partial(
            batch_latency, params=config.cost_model
        )
        self.busy_until: Optional[Seconds] = None
        self.in_flight: Optional[StepOutcome] = None
        self.total_preemptions = 0
        self._requests: Dict[int, Request] = {}

    @property
    def instance_id(self) -> int:
        return self.config.instance_id

    @property
    def is_busy(self) -> bool:
        return self.in_flight is not None

    @property
    def is_idle(self) -> bool:
        return not self.running and not self.waiting and not self.is_busy

    # ==============
    # ADMISSION
    # ==============

    def admit(self, request: Request) -> None:
        """
        Append {request} to the waiting queue tail; admission allocates nothing

        :raise RequestTooLarge if the request cannot fit even on an empty instance
        """
        needed = blocks_needed(
            request.prompt_tokens + request.true_output_tokens, self.config.block_size
        )
        if needed > self.config.total_blocks:
            raise RequestTooLarge(request.id, needed, self.config.total_blocks)

        request.state = RequestState.waiting
        request.instance_id = self.instance_id
        self.waiting.append(request)
        self._requests[request.id] = request

    # ==============
    # STEPS
    # ==============

    def form_batch(self, admit_new: bool = True) -> BatchPlan:
        """:raise EmptyPlan if nothing is runnable"""
        planner_type = (
            ChunkedPrefillPlanner
            if self.config.local_policy is LocalPolicy.chunked_prefill
            else PrefillPriorityPlanner
        )
        return planner_type(self.config, self.memory, self.running, self.waiting, admit_new)()

    def begin_step(self, now: Seconds) -> StepOutcome:
        """
        Form a plan, allocate its blocks and commit its effects

        :raise EmptyPlan if the instance is idle
        :raise Deadlock if a lone running request cannot fit in the whole memory
        """
        preempted: List[int] = []
        plan = self.form_batch()
        while True:
            needed = self._blocks_for_plan(plan)
            if needed <= self.memory.free_blocks:
                break
            if len(self.running) <= 1:
                victim_id = self.running[0].id if self.running else plan.member_ids()[0]
                raise Deadlock(victim_id, needed, self.config.total_blocks)
            preempted.append(self._preempt_newest())
            plan = self.form_batch(admit_new=False)

        outcome = StepOutcome(now, self.step_latency(plan), plan, preemptions=preempted)
        self._commit(outcome)
        self.in_flight = outcome
        self.busy_until = outcome.end
        return outcome

    def complete_step(self) -> StepOutcome:
        """Close the step in flight; called when its BatchComplete event fires"""
        assert self.in_flight is not None, "no step in flight"
        outcome = self.in_flight
        self.in_flight = None
        self.busy_until = None
        return outcome

    def execute_step(self, now: Seconds) -> StepOutcome:
        """Run one whole step: begin and complete it"""
        self.begin_step(now)
        return self.complete_step()

    def _blocks_for_plan(self, plan: BatchPlan) -> int:
        needed = 0
        for request_id in plan.decode_ids:
            request = self._requests[request_id]
            needed += self.memory.extra_blocks(request_id, tokens_after_decode(request))
        for request_id, chunk in plan.prefill_segments:
            request = self._requests[request_id]
            needed += self.memory.extra_blocks(request_id, tokens_after_chunk(request, chunk))
        return needed

    def _preempt_newest(self) -> int:
        """Evict the latest-admitted running request to the waiting head with progress reset"""
        victim = self.running.pop()
        self.memory.release(victim.id)
        victim.prefill_progress = 0
        victim.decoded_tokens = 0
        victim.first_token_time = None
        victim.preemptions += 1
        victim.state = RequestState.preempted
        self.waiting.appendleft(victim)
        self.total_preemptions += 1
        logger.debug("instance %d preempted request %d", self.instance_id, victim.id)
        return victim.id

    def _commit(self, outcome: StepOutcome) -> None:
        plan, end = outcome.plan, outcome.end
        touched: List[Request] = []

        for request_id in plan.decode_ids:
            request = self._requests[request_id]
            self.memory.grow_to(request_id, tokens_after_decode(request))
            request.decoded_tokens += 1
            touched.append(request)

        for request_id, chunk in plan.prefill_segments:
            request = self._requests[request_id]
            if request_id in plan.new_ids:
                admitted = self.waiting.popleft()
                assert admitted is request, "waiting head out of FCFS order"
                request.state = RequestState.running
                self.running.append(request)
            self.memory.grow_to(request_id, tokens_after_chunk(request, chunk))
            request.prefill_progress += chunk
            request.prefilled_total += chunk
            if request.prefill_progress == request.prompt_tokens and request.decoded_tokens == 0:
                request.decoded_tokens = 1
                request.first_token_time = end
                outcome.first_tokens.append(request_id)
            touched.append(request)

        for request in touched:
            if request.decoded_tokens >= request.true_output_tokens:
                request.state = RequestState.finished
                request.finish_time = end
                self.memory.release(request.id)
                self.running.remove(request)
                del self._requests[request.id]
                outcome.completions.append(request.id)

    # ==============
    # STATUS
    # ==============

    def snapshot(self, now: Seconds, qpm: int = 0) -> InstanceSnapshot:
        """Status API payload; built without validation since the state is trusted"""
        return InstanceSnapshot.construct(
            instance_id=self.instance_id,
            snapshot_time=now,
            free_blocks=self.memory.free_blocks,
            batch_size=len(self.running),
            qpm=qpm,
            running=_views(self.running),
            waiting=_views(self.waiting),
            busy_until=self.busy_until,
        )

    @classmethod
    def from_snapshot(
        cls,
        snapshot: InstanceSnapshot,
        config: InstanceConfig,
        step_latency: Optional[StepLatency] = None,
    ) -> 'InstanceState':
        """
        Rebuild an instance from its status payload

        Estimated output lengths stand in for the unknown true lengths.
        """
        state = cls(config, step_latency)
        for view in snapshot.running:
            request = _request_from_view(view, snapshot.snapshot_time, RequestState.running)
            state.running.append(request)
            state._requests[request.id] = request
            state.memory.grow_to(request.id, view.prefill_progress + view.decoded_tokens)
        for view in snapshot.waiting:
            request = _request_from_view(view, snapshot.snapshot_time, RequestState.waiting)
            state.waiting.append(request)
            state._requests[request.id] = request

        if state.memory.free_blocks != snapshot.free_blocks:
            logger.debug(
                "instance %d reports %d free blocks, progress implies %d",
                snapshot.instance_id,
                snapshot.free_blocks,
                state.memory.free_blocks,
            )
        return state

    def audit(self) -> None:
        """Assert memory conservation and per-request block holdings"""
        assert self.memory.is_consistent(), "free + held != total"
        for request in self.running:
            expected = blocks_needed(
                request.prefill_progress + request.decoded_tokens, self.config.block_size
            )
            assert self.memory.held.get(request.id, 0) == expected, f"request {request.id}"
        assert len(self.running) <= self.config.max_batch_size
        assert set(self.memory.held) <= {request.id for request in self.running}


def _views(requests: Iterable[Request]) -> List[RequestView]:
    return [
        RequestView.construct(
            id=request.id,
            prompt_tokens=request.prompt_tokens,
            estimated_output_tokens=request.estimated_output_tokens,
            prefill_progress=request.prefill_progress,
            decoded_tokens=request.decoded_tokens,
        )
        for request in requests
    ]


def _request_from_view(view: RequestView, now: Seconds, state: RequestState) -> Request:
    return Request(
        id=view.id,
        prompt_tokens=view.prompt_tokens,
        true_output_tokens=view.estimated_output_tokens,
        estimated_output_tokens=view.estimated_output_tokens,
        arrival_time=now,
        dispatch_time=now,
        state=state,
        prefill_progress=view.prefill_progress,
        decoded_tokens=view.decoded_tokens,
    )
