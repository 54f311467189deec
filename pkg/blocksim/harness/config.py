"""
Experiment configuration

One JSON file with the sections cluster, scheduler, estimator, workload, provision, probe,
sweep and service, plus overhead_s, output_dir, slo_ttft_p99_s and e2e_threshold_s.
"""
import os
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, root_validator, validator

from blocksim.autoscaler import ProvisionKind, ProvisionPolicy
from blocksim.core import InstanceConfig, Seconds, validate_instance_config
from blocksim.errors import InvalidConfig
from blocksim.json_ import JsonRepo
from blocksim.metrics import DEFAULT_SLO_TTFT_P99
from blocksim.predictor import PREDICTED_E2E, PREDICTED_TTFT
from blocksim.scheduler import Policy, PolicyKind
from blocksim.utils import parse_model, revalidate
from blocksim.workload import LengthEstimator


class ClusterConfig(BaseModel):
    instances: int = Field(8, ge=1)
    instance: InstanceConfig = Field(default_factory=InstanceConfig)

    def instance_config(self, instance_id: int) -> InstanceConfig:
        return self.instance.copy(update={"instance_id": instance_id})


class SchedulerConfig(BaseModel):
    policy: PolicyKind = PolicyKind.block
    seed: Optional[int] = None
    metric: str = PREDICTED_E2E
    context_bucket: Optional[int] = Field(None, ge=1)

    @validator("metric")
    def known_metric(cls, value: str) -> str:
        if value not in (PREDICTED_E2E, PREDICTED_TTFT):
            raise ValueError(f"must be {PREDICTED_E2E} or {PREDICTED_TTFT}")
        return value

    def to_policy(self, kind: Optional[PolicyKind] = None) -> Policy:
        return Policy(kind=kind or self.policy, seed=self.seed, metric=self.metric)


class SyntheticTraceConfig(BaseModel):
    count: int = Field(2000, ge=1)
    seed: Optional[int] = None
    prompt_median: int = Field(256, ge=1)
    output_median: int = Field(200, ge=1)
    sigma: float = Field(1.0, ge=0)
    max_prompt_tokens: int = Field(4096, ge=1)
    max_output_tokens: int = Field(2048, ge=1)


class WorkloadConfig(BaseModel):
    """trace is a path to a line-delimited trace; without it a synthetic trace is generated"""

    seed: int
    trace: Optional[str] = None
    synthetic: SyntheticTraceConfig = Field(default_factory=SyntheticTraceConfig)
    qps: float = Field(1.0, gt=0)
    max_requests: Optional[int] = Field(None, ge=1)
    duration_s: Optional[Seconds] = Field(None, gt=0)


class ProbeConfig(BaseModel):
    probability: float = Field(0.0, ge=0, le=1)
    seed: int = 0
    counterfactual: bool = False


class SweepConfig(BaseModel):
    policies: List[PolicyKind] = Field(default_factory=list)
    qps: List[float] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=list)
    capacity_range: Tuple[int, int] = (1, 64)
    binary: bool = False
    workers: int = Field(1, ge=1)

    @validator("qps", each_item=True)
    def positive_qps(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @validator("capacity_range")
    def ordered_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] < 1 or value[0] > value[1]:
            raise ValueError("must be a non-empty range of positive qps")
        return value


class ServiceConfig(BaseModel):
    host: str = "127.0.0.1"
    port: int = 8080
    instance_id: int = 0
    backends: Dict[int, str] = Field(default_factory=dict)
    predictors: List[str] = Field(default_factory=list)
    tick_s: Seconds = Field(0.01, gt=0)
    timeout_s: Seconds = Field(5.0, gt=0)


class ExperimentConfig(BaseModel):
    workload: WorkloadConfig
    cluster: ClusterConfig = Field(default_factory=ClusterConfig)
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    estimator: LengthEstimator = Field(default_factory=LengthEstimator)
    provision: ProvisionPolicy = Field(default_factory=ProvisionPolicy)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    service: ServiceConfig = Field(default_factory=ServiceConfig)
    overhead_s: Seconds = Field(0.0, ge=0)
    output_dir: str = "out"
    slo_ttft_p99_s: Seconds = Field(DEFAULT_SLO_TTFT_P99, gt=0)
    e2e_threshold_s: Optional[Seconds] = Field(None, gt=0)
    # in dispatch samples; 0 leaves the smoothed series columns equal to the raw ones
    smoothing_sigma: float = Field(2.0, ge=0)

    @root_validator(skip_on_failure=True)
    def consistent_sections(cls, values: Dict) -> Dict:
        provision: ProvisionPolicy = values["provision"]
        instances = values["cluster"].instances
        if provision.kind is not ProvisionKind.static and instances > provision.max_instances:
            raise ValueError("cluster.instances exceeds provision.max_instances")
        if instances < provision.min_instances:
            raise ValueError("cluster.instances is below provision.min_instances")

        scheduler: SchedulerConfig = values["scheduler"]
        random_in_use = scheduler.policy is PolicyKind.random or (
            PolicyKind.random in values["sweep"].policies
        )
        if random_in_use and scheduler.seed is None:
            raise ValueError("scheduler.seed is required by the Random policy")
        return values

    @property
    def policies(self) -> List[PolicyKind]:
        return self.sweep.policies or [self.scheduler.policy]

    @property
    def seeds(self) -> List[int]:
        return self.sweep.seeds or [self.workload.seed]

    @property
    def sweep_qps(self) -> List[float]:
        return self.sweep.qps or [self.workload.qps]


def validate_experiment(config: ExperimentConfig) -> ExperimentConfig:
    """
    Checks pydantic cannot express

    :raise InvalidConfig naming the offending field
    """
    validate_instance_config(config.cluster.instance)
    if config.workload.trace is not None and not os.path.exists(config.workload.trace):
        raise InvalidConfig("workload.trace", f"{config.workload.trace} does not exist")
    return config


def parse_config(data: Dict, base_dir: Optional[str] = None) -> ExperimentConfig:
    """Validate a raw config tree; a relative trace path is resolved against {base_dir}"""
    config = parse_model(ExperimentConfig, data)
    trace = config.workload.trace
    if trace is not None and base_dir and not os.path.isabs(trace):
        workload = config.workload.copy(update={"trace": os.path.join(base_dir, trace)})
        config = config.copy(update={"workload": workload})
    return validate_experiment(config)


def load_config(path: str) -> ExperimentConfig:
    """:raise InvalidConfig if the file is missing or a section is invalid"""
    directory, filename = os.path.split(os.path.abspath(path))
    repo: JsonRepo[Dict] = JsonRepo(directory)
    if not repo.exists(filename):
        raise InvalidConfig("config", f"{path} does not exist")
    try:
        data = repo.read(filename)
    except ValueError as exc:
        raise InvalidConfig("config", f"{path} is not valid JSON: {exc}") from exc
    return parse_config(data, directory)


def apply_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    policy: Optional[str] = None,
    qps: Optional[float] = None,
    out: Optional[str] = None,
) -> ExperimentConfig:
    """
    CLI overrides, re-validated

    An overridden seed or policy replaces the sweep's seed or policy list.
    """
    update: Dict = {}
    workload: Dict = {}
    sweep: Dict = {}
    if seed is not None:
        workload["seed"] = seed
        sweep["seeds"] = []
    if qps is not None:
        workload["qps"] = qps
    if policy is not None:
        update["scheduler"] = config.scheduler.copy(update={"policy": policy})
        sweep["policies"] = []
    if workload:
        update["workload"] = config.workload.copy(update=workload)
    if sweep:
        update["sweep"] = config.sweep.copy(update=sweep)
    if out is not None:
        update["output_dir"] = out
    if not update:
        return config
    return validate_experiment(revalidate(config.copy(update=update)))
