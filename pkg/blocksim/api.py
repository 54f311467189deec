# flake8: noqa
from blocksim.autoscaler import Autoscaler, ProvisionKind, ProvisionPolicy
from blocksim.backend import InstanceState
from blocksim.core import (
    CostModelParams,
    InstanceConfig,
    InstanceSnapshot,
    LocalPolicy,
    Request,
    RequestState,
)
from blocksim.engine import Engine, Event, EventKind
from blocksim.harness.config import ExperimentConfig, load_config, parse_config
from blocksim.harness.runner import Simulation, capacity, run, simulate, sweep
from blocksim.metrics import RunReport, aggregate, capacity_search
from blocksim.predictor import (
    Candidate,
    InProcessPredictor,
    LatencyCache,
    PredictionRequest,
    PredictionResult,
    predict,
    predict_across,
)
from blocksim.scheduler import Dispatcher, Policy, PolicyKind, select_instance
from blocksim.workload import LengthEstimator, TraceRecord, load_trace
