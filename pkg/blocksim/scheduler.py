"""
Stateless global dispatch policies

Selection is a pure function of the snapshots (and predictions for BlockPredictive); ties go
to the lowest instance id. Per-replica state lives in Dispatcher.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, root_validator

from blocksim.core import (
    DispatchWindow,
    InstanceConfig,
    InstanceSnapshot,
    Request,
    Seconds,
    blocks_needed,
)
from blocksim.errors import NoInstances, PredictionFailure, PredictorUnavailable
from blocksim.predictor import (
    PREDICTED_E2E,
    PREDICTED_TTFT,
    Candidate,
    PredictionResult,
    PredictorHandle,
)

logger = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    random = "Random"
    round_robin = "RoundRobin"
    min_qpm = "MinQpm"
    infaas = "InfaasPlusPlus"
    llumnix = "LlumnixMinus"
    block = "BlockPredictive"


class Policy(BaseModel):
    kind: PolicyKind
    seed: Optional[int] = None
    metric: str = PREDICTED_E2E

    class Config:
        frozen = True

    @root_validator(skip_on_failure=True)
    def check_policy(cls, values: Dict) -> Dict:
        if values["kind"] is PolicyKind.random and values.get("seed") is None:
            raise ValueError("Random policy needs an explicit seed")
        if values["metric"] not in (PREDICTED_E2E, PREDICTED_TTFT):
            raise ValueError(f"unknown prediction metric {values['metric']}")
        return values


Predictions = Mapping[int, PredictionResult]

FALLBACK_POLICY = Policy(kind=PolicyKind.llumnix)


# ==============
# LOAD FORMULAS
# ==============


def load_infaas(snapshot: InstanceSnapshot, total_blocks: int) -> float:
    """
    usedMemory / batchSize, an empty batch counting as one

    >>> snapshot = InstanceSnapshot(instance_id=0, snapshot_time=0.0, free_blocks=556,
    ...                             batch_size=10)
    >>> load_infaas(snapshot, total_blocks=1056)
    50.0
    """
    used = total_blocks - snapshot.free_blocks
    return used / max(snapshot.batch_size, 1)


def load_llumnix(snapshot: InstanceSnapshot, total_blocks: int, block_size: int) -> float:
    """(usedMemory + prefillMemory) / batchSize with prefillMemory over the waiting queue"""
    used = total_blocks - snapshot.free_blocks
    prefill_memory = sum(
        blocks_needed(view.prompt_tokens - view.prefill_progress, block_size)
        for view in snapshot.waiting
    )
    return (used + prefill_memory) / max(snapshot.batch_size, 1)


# ==============
# SELECTION
# ==============


def _argmin(scores: Mapping[int, float]) -> int:
    return min(scores, key=lambda instance_id: (scores[instance_id], instance_id))


def select_instance(
    policy: Policy,
    snapshots: Sequence[InstanceSnapshot],
    configs: Mapping[int, InstanceConfig],
    predictions: Optional[Predictions] = None,
    random_draw: Optional[Callable[[int], int]] = None,
    cursor: int = 0,
) -> int:
    """
    Instance chosen by {policy}

    :param random_draw: index generator for Random, called with the number of instances
    :param cursor: round-robin position
    :raise NoInstances if {snapshots} is empty
    """
    if not snapshots:
        raise NoInstances("no instance to dispatch to")

    ids = sorted(snapshot.instance_id for snapshot in snapshots)
    kind = policy.kind
    if kind is PolicyKind.random:
        assert random_draw is not None, "Random policy needs a random stream"
        return ids[random_draw(len(ids))]
    if kind is PolicyKind.round_robin:
        return ids[cursor % len(ids)]
    if kind is PolicyKind.min_qpm:
        return _argmin({s.instance_id: s.qpm for s in snapshots})
    if kind is PolicyKind.infaas:
        return _argmin(
            {
                s.instance_id: load_infaas(s, configs[s.instance_id].total_blocks)
                for s in snapshots
            }
        )
    if kind is PolicyKind.llumnix:
        return _argmin(
            {
                s.instance_id: load_llumnix(
                    s, configs[s.instance_id].total_blocks, configs[s.instance_id].block_size
                )
                for s in snapshots
            }
        )

    assert predictions is not None, "BlockPredictive needs predictions"
    return _argmin(
        {s.instance_id: predictions[s.instance_id].metrics[policy.metric] for s in snapshots}
    )


# ==============
# DISPATCHER
# ==============


class QpmTracker:
    """Trailing-minute dispatch counts per instance"""

    def __init__(self) -> None:
        self.windows: Dict[int, DispatchWindow] = {}

    def qpm(self, instance_id: int, now: Seconds) -> int:
        window = self.windows.get(instance_id)
        return window.count(now) if window else 0


def record_dispatch(tracker: QpmTracker, instance_id: int, now: Seconds) -> None:
    tracker.windows.setdefault(instance_id, DispatchWindow()).record(now)


@dataclass
class Decision:
    instance_id: int
    predictions: Optional[Dict[int, PredictionResult]] = None
    fallback: bool = False

    @property
    def chosen_prediction(self) -> Optional[PredictionResult]:
        return self.predictions.get(self.instance_id) if self.predictions else None


def candidate_of(request: Request) -> Candidate:
    return Candidate(
        prompt_tokens=request.prompt_tokens,
        estimated_output_tokens=request.estimated_output_tokens,
    )


class Dispatcher:
    """
    One scheduler replica

    Owns the replica-local state: the Random stream, the round-robin cursor and the
    fallback counter.
    """

    def __init__(
        self,
        policy: Policy,
        configs: Mapping[int, InstanceConfig],
        predictor: Optional[PredictorHandle] = None,
    ) -> None:
        self.policy = policy
        self.configs = configs
        self.predictor = predictor
        self.rng = np.random.default_rng(policy.seed)
        self.cursor = 0
        self.fallbacks = 0

    @property
    def needs_predictions(self) -> bool:
        return self.policy.kind is PolicyKind.block

    def dispatch(self, request: Request, snapshots: Sequence[InstanceSnapshot]) -> Decision:
        """
        Choose an instance for {request}

        BlockPredictive falls back to LlumnixMinus for this request when predictions fail.

        :raise NoInstances if {snapshots} is empty
        """
        if not snapshots:
            raise NoInstances("no instance to dispatch to")

        predictions = None
        if self.needs_predictions:
            try:
                predictions = self.predictions_for(request, snapshots)
            except (PredictorUnavailable, PredictionFailure) as exc:
                return self.fall_back(request.id, snapshots, exc)

        return self.choose(snapshots, predictions)

    def predictions_for(
        self, request: Request, snapshots: Sequence[InstanceSnapshot]
    ) -> Dict[int, PredictionResult]:
        if self.predictor is None:
            raise PredictorUnavailable("no predictor configured")
        return self.predictor.predict_across(snapshots, self.configs, candidate_of(request))

    def choose(
        self,
        snapshots: Sequence[InstanceSnapshot],
        predictions: Optional[Dict[int, PredictionResult]] = None,
    ) -> Decision:
        """Apply the policy to already gathered inputs and advance the cursor"""
        instance_id = select_instance(
            self.policy,
            snapshots,
            self.configs,
            predictions,
            random_draw=self._draw,
            cursor=self.cursor,
        )
        if self.policy.kind is PolicyKind.round_robin:
            self.cursor += 1
        return Decision(instance_id, predictions)

    def fall_back(
        self, request_id: int, snapshots: Sequence[InstanceSnapshot], reason: Exception
    ) -> Decision:
        self.fallbacks += 1
        logger.warning(
            "request %d: predictor failed (%s), using LlumnixMinus", request_id, reason
        )
        instance_id = select_instance(FALLBACK_POLICY, snapshots, self.configs)
        return Decision(instance_id, fallback=True)

    def _draw(self, count: int) -> int:
        return int(self.rng.integers(count))


def rank_of(instance_id: int, scores: Mapping[int, float]) -> int:
    """1-based rank of {instance_id} among {scores}, ties broken by lowest id"""
    ordered = sorted(scores, key=lambda other: (scores[other], other))
    return ordered.index(instance_id) + 1
