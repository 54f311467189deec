import logging
from typing import Dict, Iterator, List, Optional

from blocksim.backend import InstanceState
from blocksim.backend.instance import StepLatency
from blocksim.core import InstanceConfig, InstanceSnapshot, Seconds
from blocksim.harness.config import ClusterConfig
from blocksim.scheduler import QpmTracker, record_dispatch

logger = logging.getLogger(__name__)


class Cluster:
    """
    Live instances of one simulation, keyed by instance id

    Every instance is built from the cluster's instance template; configs is shared with the
    dispatcher and grows as instances are provisioned.
    """

    def __init__(self, config: ClusterConfig, step_latency: Optional[StepLatency] = None) -> None:
        self.config = config
        self.step_latency = step_latency
        self.instances: Dict[int, InstanceState] = {}
        self.configs: Dict[int, InstanceConfig] = {}
        self.tracker = QpmTracker()
        for instance_id in range(config.instances):
            self.add_instance(instance_id, 0.0)

    def __contains__(self, instance_id: object) -> bool:
        return instance_id in self.instances

    def __getitem__(self, instance_id: int) -> InstanceState:
        return self.instances[instance_id]

    def __iter__(self) -> Iterator[InstanceState]:
        return iter(self.instances.values())

    def __len__(self) -> int:
        return len(self.instances)

    def add_instance(self, instance_id: int, now: Seconds) -> None:
        config = self.config.instance_config(instance_id)
        self.configs[instance_id] = config
        self.instances[instance_id] = InstanceState(config, self.step_latency)
        logger.debug("instance %d live at %.3f", instance_id, now)

    def record_dispatch(self, instance_id: int, now: Seconds) -> None:
        record_dispatch(self.tracker, instance_id, now)

    def snapshots(self, now: Seconds) -> List[InstanceSnapshot]:
        return [
            instance.snapshot(now, self.tracker.qpm(instance_id, now))
            for instance_id, instance in self.instances.items()
        ]

    def free_blocks(self) -> List[int]:
        return [instance.memory.free_blocks for instance in self.instances.values()]

    @property
    def total_preemptions(self) -> int:
        return sum(instance.total_preemptions for instance in self.instances.values())
