"""
Simulation-based latency prediction

A prediction rebuilds the instance from its status snapshot, appends the candidate to the
waiting queue tail and replays the instance's own batching code with estimated lengths until
the candidate finishes. No future arrivals are modeled.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import replace
from typing import Dict, Iterable, Mapping, Optional, Tuple

from pydantic import BaseModel, root_validator

from blocksim.backend.cost import batch_latency
from blocksim.backend.instance import InstanceState, StepLatency
from blocksim.backend.plans import BatchPlan
from blocksim.core import (
    CostModelParams,
    InstanceConfig,
    InstanceSnapshot,
    Request,
    RequestState,
    RequestView,
    Seconds,
)
from blocksim.errors import BlockSimError, EmptyPlan, PredictionFailure

logger = logging.getLogger(__name__)

CORRECTION_STEPS = 10
CANDIDATE_ID = -1
_SCHEDULED = (RequestState.running, RequestState.finished)

PREDICTED_E2E = "predicted_e2e_latency"
PREDICTED_TTFT = "predicted_ttft"
PREDICTED_QUEUEING = "predicted_queueing_delay"


class Candidate(BaseModel):
    prompt_tokens: int
    estimated_output_tokens: int

    class Config:
        frozen = True


class PredictionRequest(BaseModel):
    snapshot: InstanceSnapshot
    candidate: Candidate
    instance_config: InstanceConfig

    @root_validator(skip_on_failure=True)
    def same_instance(cls, values: Dict) -> Dict:
        if values["snapshot"].instance_id != values["instance_config"].instance_id:
            raise ValueError("snapshot and instance_config refer to different instances")
        return values


class PredictionResult(BaseModel):
    metrics: Dict[str, float]
    simulated_steps: int
    cache_hits: int = 0
    cache_misses: int = 0

    @property
    def e2e_latency(self) -> Seconds:
        return self.metrics[PREDICTED_E2E]

    @property
    def ttft(self) -> Seconds:
        return self.metrics[PREDICTED_TTFT]


CacheKey = Tuple[CostModelParams, int, int, int]


class LatencyCache:
    """
    Memoized batch latencies keyed by (cost model, decode count, prefill tokens, context)

    Exact keys by default. With {context_bucket} the context token count is rounded to the
    nearest multiple, every plan of a bucket gets the latency of the bucket representative,
    and the per-step error stays below c_context * context_bucket / 2.
    """

    def __init__(self, context_bucket: Optional[int] = None) -> None:
        self.context_bucket = context_bucket
        self.entries: Dict[CacheKey, Seconds] = {}
        self.hits = 0
        self.misses = 0

    def latency(self, plan: BatchPlan, params: CostModelParams) -> Seconds:
        context = self._representative(plan.context_tokens)
        key = (params, len(plan.decode_ids), plan.total_prefill_tokens, context)
        cached = self.entries.get(key)
        if cached is not None:
            self.hits += 1
            return cached

        self.misses += 1
        if context != plan.context_tokens:
            plan = replace(plan, context_tokens=context)
        value = batch_latency(plan, params)
        self.entries[key] = value
        return value

    def step_latency(self, params: CostModelParams) -> StepLatency:
        return lambda plan: self.latency(plan, params)

    @property
    def hit_rate(self) -> float:
        lookups = self.hits + self.misses
        return self.hits / lookups if lookups else 0.0

    def _representative(self, context_tokens: int) -> int:
        if not self.context_bucket:
            return context_tokens
        half = self.context_bucket // 2
        return (context_tokens + half) // self.context_bucket * self.context_bucket


def correct_lengths(snapshot: InstanceSnapshot) -> InstanceSnapshot:
    """
    Extend estimates already overrun by decoding to the decoded length plus 10 steps

    >>> view = RequestView(id=1, prompt_tokens=8, estimated_output_tokens=100,
    ...                    prefill_progress=8, decoded_tokens=100)
    >>> snapshot = InstanceSnapshot(instance_id=0, snapshot_time=0.0, free_blocks=1,
    ...                             batch_size=1, running=[view])
    >>> correct_lengths(snapshot).running[0].estimated_output_tokens
    110
    """
    if not any(_overrun(view) for view in (*snapshot.running, *snapshot.waiting)):
        return snapshot

    return snapshot.copy(
        update={
            "running": [_corrected(view) for view in snapshot.running],
            "waiting": [_corrected(view) for view in snapshot.waiting],
        }
    )


def _overrun(view: RequestView) -> bool:
    return view.decoded_tokens >= view.estimated_output_tokens


def _corrected(view: RequestView) -> RequestView:
    if not _overrun(view):
        return view
    return view.copy(update={"estimated_output_tokens": view.decoded_tokens + CORRECTION_STEPS})


def predict(request: PredictionRequest, cache: Optional[LatencyCache] = None) -> PredictionResult:
    """
    Forward-simulate the instance until the candidate finishes

    Latencies are measured from the snapshot time. Deterministic for fixed inputs.

    :raise PredictionFailure if the simulation deadlocks or cannot make progress
    """
    config = request.instance_config
    snapshot = correct_lengths(request.snapshot)
    hits_before, misses_before = (cache.hits, cache.misses) if cache else (0, 0)
    step_latency = cache.step_latency(config.cost_model) if cache else None

    try:
        state = InstanceState.from_snapshot(snapshot, config, step_latency)
        start = snapshot.snapshot_time
        candidate = Request(
            id=CANDIDATE_ID,
            prompt_tokens=request.candidate.prompt_tokens,
            true_output_tokens=request.candidate.estimated_output_tokens,
            estimated_output_tokens=request.candidate.estimated_output_tokens,
            arrival_time=start,
            dispatch_time=start,
            state=RequestState.dispatched,
        )
        state.admit(candidate)

        now = start if snapshot.busy_until is None else max(start, snapshot.busy_until)
        steps = 0
        first_scheduled: Optional[Seconds] = None
        while not candidate.is_finished:
            outcome = state.execute_step(now)
            if first_scheduled is None and candidate.state in _SCHEDULED:
                first_scheduled = now
            now = outcome.end
            steps += 1
    except EmptyPlan as exc:
        raise PredictionFailure(config.instance_id, "simulation stalled") from exc
    except (BlockSimError, ValueError) as exc:
        raise PredictionFailure(config.instance_id, str(exc)) from exc

    assert candidate.first_token_time is not None and candidate.finish_time is not None
    metrics = {
        PREDICTED_E2E: candidate.finish_time - start,
        PREDICTED_TTFT: candidate.first_token_time - start,
        PREDICTED_QUEUEING: (first_scheduled if first_scheduled is not None else now) - start,
    }
    return PredictionResult(
        metrics=metrics,
        simulated_steps=steps,
        cache_hits=(cache.hits - hits_before) if cache else 0,
        cache_misses=(cache.misses - misses_before) if cache else 0,
    )


def predict_across(
    snapshots: Iterable[InstanceSnapshot],
    configs: Mapping[int, InstanceConfig],
    candidate: Candidate,
    cache: Optional[LatencyCache] = None,
) -> Dict[int, PredictionResult]:
    """
    Independent prediction of {candidate} on every instance

    :raise PredictionFailure tagged with the failing instance id
    """
    results: Dict[int, PredictionResult] = {}
    for snapshot in snapshots:
        request = PredictionRequest.construct(
            snapshot=snapshot,
            candidate=candidate,
            instance_config=configs[snapshot.instance_id],
        )
        results[snapshot.instance_id] = predict(request, cache)
    return results


class PredictorHandle(ABC):
    """Where the scheduler gets its predictions from"""

    @abstractmethod
    def predict_across(
        self,
        snapshots: Iterable[InstanceSnapshot],
        configs: Mapping[int, InstanceConfig],
        candidate: Candidate,
    ) -> Dict[int, PredictionResult]:
        """Predictions for {candidate} on every snapshot's instance"""


class InProcessPredictor(PredictorHandle):
    """Predictor replica living in the simulation process"""

    def __init__(self, cache: Optional[LatencyCache] = None) -> None:
        self.cache = cache

    def predict_across(
        self,
        snapshots: Iterable[InstanceSnapshot],
        configs: Mapping[int, InstanceConfig],
        candidate: Candidate,
    ) -> Dict[int, PredictionResult]:
        return predict_across(snapshots, configs, candidate, self.cache)
