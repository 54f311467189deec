"""
Instance provisioning against a latency threshold

Preempt reacts to the predicted latency of each dispatched request, Relief to the realized
latency of each completed one. Instances are only ever added.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Protocol

from pydantic import BaseModel, Extra, root_validator, validator

from blocksim.core import Seconds
from blocksim.errors import DuplicateInstance

logger = logging.getLogger(__name__)


class ProvisionKind(str, Enum):
    static = "Static"
    preempt = "Preempt"
    relief = "Relief"


class SignalKind(str, Enum):
    predicted = "predicted"
    realized = "realized"


class ProvisionPolicy(BaseModel):
    kind: ProvisionKind = ProvisionKind.static
    threshold_s: Seconds = 70.0
    cold_start_s: Seconds = 30.0
    max_instances: int = 16
    min_instances: int = 1
    cooldown_s: Seconds = 15.0

    class Config:
        frozen = True
        extra = Extra.forbid

    @validator("threshold_s")
    def positive_threshold(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @validator("cooldown_s", "cold_start_s")
    def non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be >= 0")
        return value

    @root_validator(skip_on_failure=True)
    def ordered_bounds(cls, values: Dict) -> Dict:
        if values["min_instances"] > values["max_instances"]:
            raise ValueError("min_instances must not exceed max_instances")
        return values

    @property
    def trigger(self) -> Optional[SignalKind]:
        """Signal kind this policy reacts to"""
        return _TRIGGERS.get(self.kind)


_TRIGGERS = {
    ProvisionKind.preempt: SignalKind.predicted,
    ProvisionKind.relief: SignalKind.realized,
}


@dataclass(frozen=True)
class LatencySignal:
    kind: SignalKind
    value: Seconds


@dataclass(frozen=True)
class AddInstance:
    requested_at: Seconds


def evaluate(
    policy: ProvisionPolicy,
    signal: LatencySignal,
    now: Seconds,
    last_provision: Optional[Seconds],
    instances: int,
) -> Optional[AddInstance]:
    """
    Decide whether {signal} provisions a new instance

    :param last_provision: time of the latest AddInstance, None if there was none
    :param instances: active plus pending instances
    """
    if policy.trigger is not signal.kind:
        return None
    if signal.value < policy.threshold_s:
        return None
    if last_provision is not None and now - last_provision < policy.cooldown_s:
        return None
    if instances >= policy.max_instances:
        return None
    return AddInstance(requested_at=now)


@dataclass
class ProvisionRecord:
    instance_id: int
    requested_at: Seconds
    trigger_value: Seconds
    live_at: Optional[Seconds] = None


class InstancePool(Protocol):
    def __contains__(self, instance_id: object) -> bool:
        ...

    def add_instance(self, instance_id: int, now: Seconds) -> None:
        ...


def complete_provision(cluster: InstancePool, instance_id: int, now: Seconds) -> None:
    """
    Join a freshly provisioned idle instance

    :raise DuplicateInstance if {instance_id} is already live
    """
    if instance_id in cluster:
        raise DuplicateInstance(instance_id)
    cluster.add_instance(instance_id, now)


class Autoscaler:
    """
    Provisioning state of one run

    New instance ids continue after the highest initial id.
    """

    def __init__(self, policy: ProvisionPolicy, initial_instances: int) -> None:
        self.policy = policy
        self.active = initial_instances
        self.next_id = initial_instances
        self.last_provision: Optional[Seconds] = None
        self.pending: Dict[int, ProvisionRecord] = {}
        self.history: List[ProvisionRecord] = []

    @property
    def instances(self) -> int:
        return self.active + len(self.pending)

    def observe(self, signal: LatencySignal, now: Seconds) -> Optional[ProvisionRecord]:
        """
        Feed one latency observation; returns the provision it triggers, if any

        The caller schedules the matching ProvisionComplete after the cold start delay.
        """
        decision = evaluate(self.policy, signal, now, self.last_provision, self.instances)
        if decision is None:
            return None

        record = ProvisionRecord(self.next_id, decision.requested_at, signal.value)
        self.next_id += 1
        self.last_provision = now
        self.pending[record.instance_id] = record
        self.history.append(record)
        logger.info(
            "provisioning instance %d at %.3f (%s latency %.3f)",
            record.instance_id,
            now,
            signal.kind.value,
            signal.value,
        )
        return record

    def live_at(self, instance_id: int) -> Seconds:
        return self.pending[instance_id].requested_at + self.policy.cold_start_s

    def mark_live(self, instance_id: int, now: Seconds) -> None:
        record = self.pending.pop(instance_id)
        record.live_at = now
        self.active += 1
