# flake8: noqa
from blocksim.backend.cost import batch_latency
from blocksim.backend.instance import InstanceState, StepOutcome
from blocksim.backend.memory import MemoryManager
from blocksim.backend.plans import BatchPlan, ChunkedPrefillPlanner, PrefillPriorityPlanner
