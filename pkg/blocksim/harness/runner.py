"""
In-process experiment runner

A Simulation wires one engine, a cluster of backends, a dispatcher with its predictor, the
autoscaler and the accuracy probe together. Sweeps and capacity searches run independent
simulations, optionally in a process pool.
"""
import copy
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

import pandas as pd

from blocksim.autoscaler import Autoscaler, LatencySignal, SignalKind, complete_provision
from blocksim.core import InstanceSnapshot, Request, RequestState, Seconds, blocks_needed
from blocksim.engine import Engine, Event, EventKind
from blocksim.errors import EmptyPlan, PredictionFailure
from blocksim.harness.cluster import Cluster
from blocksim.harness.config import ExperimentConfig
from blocksim.json_ import JsonRepo
from blocksim.metrics import (
    DispatchSample,
    ProbeRecord,
    RunLog,
    RunReport,
    aggregate,
    capacity_search,
    format_gain,
    probe_sample,
    relative_error,
)
from blocksim.predictor import InProcessPredictor, LatencyCache, PredictionResult
from blocksim.repositories.reports import ReportRepo
from blocksim.scheduler import Decision, Dispatcher, Policy, PolicyKind, candidate_of
from blocksim.utils import model_to_primitive
from blocksim.workload import (
    arrivals_for,
    load_trace,
    synthesize_trace,
    tag_records,
    to_requests,
)

logger = logging.getLogger(__name__)

SWEEP_FILE = "sweep.csv"
CAPACITY_FILE = "capacity.csv"
CONFIG_FILE = "config.json"


def build_requests(config: ExperimentConfig, qps: float, seed: int) -> List[Request]:
    """
    Tagged requests of the workload in arrival order

    Records that cannot fit an empty instance are dropped.
    """
    workload = config.workload
    if workload.trace is not None:
        records = load_trace(workload.trace)
    else:
        synthetic = workload.synthetic
        records = synthesize_trace(
            synthetic.count,
            seed if synthetic.seed is None else synthetic.seed,
            prompt_median=synthetic.prompt_median,
            output_median=synthetic.output_median,
            sigma=synthetic.sigma,
            max_prompt_tokens=synthetic.max_prompt_tokens,
            max_output_tokens=synthetic.max_output_tokens,
        )

    template = config.cluster.instance
    fitting = [
        record
        for record in records
        if blocks_needed(record.prompt_tokens + record.output_tokens, template.block_size)
        <= template.total_blocks
    ]
    if len(fitting) < len(records):
        logger.warning("dropped %d records larger than an instance", len(records) - len(fitting))

    arrivals = arrivals_for(tag_records(fitting, config.estimator), qps, seed)
    if workload.duration_s is not None:
        arrivals = [arrival for arrival in arrivals if arrival[0] <= workload.duration_s]
    if workload.max_requests is not None:
        arrivals = arrivals[: workload.max_requests]
    return to_requests(arrivals)


class Simulation:
    """
    One discrete-event run

    Handlers are bound methods so a whole simulation can be forked with copy.deepcopy for
    counterfactual probes.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        policy: Policy,
        requests: List[Request],
        probe_ids: Iterable[int] = (),
    ) -> None:
        self.config = config
        self.engine = Engine()
        self.cluster = Cluster(config.cluster)
        self.cache = LatencyCache(config.scheduler.context_bucket)
        self.predictor = InProcessPredictor(self.cache)
        self.dispatcher = Dispatcher(policy, self.cluster.configs, self.predictor)
        self.autoscaler = Autoscaler(config.provision, len(self.cluster))
        # accumulated prediction error covers every dispatch, sampled or not
        self._tracks_predictions = (
            self.autoscaler.policy.trigger is SignalKind.predicted or config.probe.probability > 0
        )
        self.requests: Dict[int, Request] = {request.id: request for request in requests}
        self.probe_ids = set(probe_ids)
        self.log = RunLog(requests=requests)
        self.error_sum = 0.0
        self.error_count = 0

        self.engine.register(EventKind.arrival, self._on_arrival)
        self.engine.register(EventKind.probe, self._on_probe)
        self.engine.register(EventKind.dispatch, self._on_dispatch)
        self.engine.register(EventKind.batch_complete, self._on_batch_complete)
        self.engine.register(EventKind.provision_complete, self._on_provision_complete)
        for request in requests:
            self.engine.schedule(EventKind.arrival, request.arrival_time, request.id)

    def run(self) -> Tuple[RunReport, List[Event]]:
        """
        Replay the workload until every request finished

        :raise HandlerFailure with the failing event if the simulation breaks
        """
        events = self.engine.run_until()
        self.log.fallbacks = self.dispatcher.fallbacks
        self.log.cache_hits = self.cache.hits
        self.log.cache_misses = self.cache.misses
        self.log.provisions = list(self.autoscaler.history)
        report = aggregate(
            self.log,
            e2e_threshold=self.config.e2e_threshold_s,
            smoothing_sigma=self.config.smoothing_sigma,
        )
        return report, events

    # ==============
    # HANDLERS
    # ==============

    def _on_arrival(self, event: Event) -> None:
        request = self.requests[event.target]
        if request.id in self.probe_ids:
            self.engine.schedule(EventKind.probe, self.engine.now, request.id)
            return
        self._dispatch(request, self.cluster.snapshots(self.engine.now))

    def _on_probe(self, event: Event) -> None:
        request = self.requests[event.target]
        now = self.engine.now
        snapshots = self.cluster.snapshots(now)
        try:
            predictions = self.predictor.predict_across(
                snapshots, self.cluster.configs, candidate_of(request)
            )
        except PredictionFailure as exc:
            logger.warning("probe of request %d skipped: %s", request.id, exc)
            self._dispatch(request, snapshots)
            return

        counterfactual = (
            self._counterfactual(request) if self.config.probe.counterfactual else None
        )
        decision = self._dispatch(request, snapshots, predictions)
        self.log.probes.append(
            ProbeRecord(
                request_id=request.id,
                dispatched_instance=decision.instance_id,
                predicted={
                    instance_id: result.e2e_latency for instance_id, result in predictions.items()
                },
                accumulated_error=(
                    self.error_sum / self.error_count if self.error_count else None
                ),
                counterfactual=counterfactual,
            )
        )

    def _on_dispatch(self, event: Event) -> None:
        self._deliver(self.requests[event.target], self.engine.now)

    def _on_batch_complete(self, event: Event) -> None:
        instance = self.cluster[event.target]
        outcome = instance.complete_step()
        for request_id in outcome.completions:
            self._on_finished(self.requests[request_id])
        self._start_step(event.target)

    def _on_provision_complete(self, event: Event) -> None:
        complete_provision(self.cluster, event.target, self.engine.now)
        self.autoscaler.mark_live(event.target, self.engine.now)

    # ==============
    # PROTECTED & PRIVATE METHODS
    # ==============

    def _dispatch(
        self,
        request: Request,
        snapshots: List[InstanceSnapshot],
        predictions: Optional[Dict[int, PredictionResult]] = None,
    ) -> Decision:
        now = self.engine.now
        if predictions is not None and self.dispatcher.needs_predictions:
            decision = self.dispatcher.choose(snapshots, predictions)
        else:
            decision = self.dispatcher.dispatch(request, snapshots)

        predicted = self._predicted_e2e(request, decision, snapshots, predictions)
        if predicted is not None:
            self.log.predicted_e2e[request.id] = predicted
            self._observe(LatencySignal(SignalKind.predicted, predicted))

        self.log.samples.append(
            DispatchSample(now, self.cluster.free_blocks(), self.cluster.total_preemptions)
        )
        self._route(request, decision.instance_id)
        return decision

    def _predicted_e2e(
        self,
        request: Request,
        decision: Decision,
        snapshots: List[InstanceSnapshot],
        predictions: Optional[Dict[int, PredictionResult]],
    ) -> Optional[Seconds]:
        chosen = decision.chosen_prediction
        if chosen is None and predictions is not None:
            chosen = predictions.get(decision.instance_id)
        if chosen is None and self._tracks_predictions:
            snapshot = next(s for s in snapshots if s.instance_id == decision.instance_id)
            try:
                chosen = self.predictor.predict_across(
                    [snapshot], self.cluster.configs, candidate_of(request)
                )[decision.instance_id]
            except PredictionFailure as exc:
                logger.warning("no prediction for request %d: %s", request.id, exc)
        return chosen.e2e_latency if chosen is not None else None

    def _route(self, request: Request, instance_id: int) -> None:
        request.state = RequestState.dispatched
        request.instance_id = instance_id
        if self.config.overhead_s > 0:
            self.engine.schedule(
                EventKind.dispatch, self.engine.now + self.config.overhead_s, request.id
            )
        else:
            self._deliver(request, self.engine.now)

    def _deliver(self, request: Request, now: Seconds) -> None:
        assert request.instance_id is not None
        request.dispatch_time = now
        self.cluster[request.instance_id].admit(request)
        self.cluster.record_dispatch(request.instance_id, now)
        if not self.cluster[request.instance_id].is_busy:
            self._start_step(request.instance_id)

    def _start_step(self, instance_id: int) -> None:
        try:
            outcome = self.cluster[instance_id].begin_step(self.engine.now)
        except EmptyPlan:
            return
        self.engine.schedule(EventKind.batch_complete, outcome.end, instance_id)

    def _on_finished(self, request: Request) -> None:
        realized = request.e2e_latency
        assert realized is not None
        predicted = self.log.predicted_e2e.get(request.id)
        if predicted is not None:
            self.error_sum += relative_error(predicted, realized)
            self.error_count += 1
        self._observe(LatencySignal(SignalKind.realized, realized))

    def _observe(self, signal: LatencySignal) -> None:
        record = self.autoscaler.observe(signal, self.engine.now)
        if record is not None:
            self.engine.schedule(
                EventKind.provision_complete,
                self.autoscaler.live_at(record.instance_id),
                record.instance_id,
            )

    def _counterfactual(self, request: Request) -> Dict[int, Seconds]:
        """Realized e2e latency of {request} on every instance, each in a forked simulation"""
        realized: Dict[int, Seconds] = {}
        for instance_id in sorted(self.cluster.instances):
            fork = copy.deepcopy(self, {id(self.cache): self.cache})
            fork.probe_ids = set()
            forked = fork.requests[request.id]
            fork._route(forked, instance_id)
            fork.engine.run_until(stop=lambda: forked.is_finished)
            assert forked.e2e_latency is not None, "forked run drained before the probe finished"
            realized[instance_id] = forked.e2e_latency
        return realized


# ==============
# RUN
# ==============


@dataclass
class RunResult:
    report: RunReport
    events: List[Event]


def simulate(
    config: ExperimentConfig,
    policy: Optional[PolicyKind] = None,
    qps: Optional[float] = None,
    seed: Optional[int] = None,
) -> RunResult:
    """Run one (policy, qps, seed) cell of {config} in process"""
    seed = config.workload.seed if seed is None else seed
    qps = config.workload.qps if qps is None else qps
    requests = build_requests(config, qps, seed)
    probe_ids = probe_sample(
        [request.id for request in requests], config.probe.probability, config.probe.seed
    )
    simulation = Simulation(
        config, config.scheduler.to_policy(policy), requests, sorted(probe_ids)
    )
    report, events = simulation.run()
    logger.info(
        "%s qps=%s seed=%d: %d requests, ttft p99 %.3f",
        simulation.dispatcher.policy.kind.value,
        qps,
        seed,
        report.aggregates.requests,
        report.aggregates.ttft_p99,
    )
    return RunResult(report, events)


def run(config: ExperimentConfig) -> List[str]:
    """Simulate the configured cell and write its exports; returns the written paths"""
    result = simulate(config)
    paths = ReportRepo(config.output_dir).write(result.report, result.events)
    return [*paths, write_config(config)]


def write_config(config: ExperimentConfig) -> str:
    """Resolved config next to the outputs it produced"""
    os.makedirs(config.output_dir, exist_ok=True)
    repo: JsonRepo[Dict] = JsonRepo(config.output_dir)
    return repo.write(model_to_primitive(config), CONFIG_FILE)


# ==============
# SWEEPS
# ==============

Cell = Tuple[PolicyKind, float, int]
T = TypeVar("T")
R = TypeVar("R")


def sweep_cells(config: ExperimentConfig) -> List[Cell]:
    return [
        (policy, qps, seed)
        for policy in config.policies
        for qps in config.sweep_qps
        for seed in config.seeds
    ]


def cell_dir(output_dir: str, cell: Cell) -> str:
    policy, qps, seed = cell
    return os.path.join(output_dir, "cells", f"{policy.value}_qps{qps:g}_seed{seed}")


def _run_cell(job: Tuple[ExperimentConfig, Cell]) -> Dict:
    config, cell = job
    policy, qps, seed = cell
    row: Dict = {"policy": policy.value, "qps": qps, "seed": seed}
    try:
        result = simulate(config, policy, qps, seed)
    except Exception as exc:
        logger.exception("cell %s failed", cell)
        return {**row, "status": "failed", "error": str(exc)}

    ReportRepo(cell_dir(config.output_dir, cell)).write(result.report, result.events)
    return {**row, "status": "ok", "error": "", **model_to_primitive(result.report.aggregates)}


def _map(function: Callable[[T], R], jobs: Sequence[T], workers: int) -> List[R]:
    if workers <= 1 or len(jobs) <= 1:
        return [function(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, jobs))


def sweep(config: ExperimentConfig) -> pd.DataFrame:
    """
    One report per (policy, qps, seed) cell plus the joined summary table

    Failed cells are recorded with their error and do not stop the others.
    """
    jobs = [(config, cell) for cell in sweep_cells(config)]
    frame = pd.DataFrame(_map(_run_cell, jobs, config.sweep.workers))
    os.makedirs(config.output_dir, exist_ok=True)
    frame.to_csv(os.path.join(config.output_dir, SWEEP_FILE), index=False)
    write_config(config)
    return frame


def _capacity_cell(job: Tuple[ExperimentConfig, PolicyKind, int]) -> Dict:
    config, policy, seed = job
    row: Dict = {"policy": policy.value, "seed": seed}
    try:
        result = capacity_search(
            lambda qps: simulate(config, policy, qps, seed).report,
            slo=config.slo_ttft_p99_s,
            qps_range=config.sweep.capacity_range,
            binary=config.sweep.binary,
        )
    except Exception as exc:
        logger.exception("capacity of %s seed %d failed", policy.value, seed)
        return {**row, "status": "failed", "error": str(exc), "capacity": None}

    low, high = result.bracket
    return {
        **row,
        "status": "ok",
        "error": "",
        "capacity": result.capacity,
        "bracket_low": low,
        "bracket_high": high,
        "monotone": result.monotone,
        "evaluated": len(result.points),
    }


def capacity(config: ExperimentConfig) -> pd.DataFrame:
    """
    Capacity of every policy and seed

    gain is relative to LlumnixMinus on the same seed, or to the first configured policy when
    LlumnixMinus is not swept.
    """
    jobs = [(config, policy, seed) for policy in config.policies for seed in config.seeds]
    frame = pd.DataFrame(_map(_capacity_cell, jobs, config.sweep.workers))
    frame = with_gains(frame, gain_baseline(config.policies))
    os.makedirs(config.output_dir, exist_ok=True)
    frame.to_csv(os.path.join(config.output_dir, CAPACITY_FILE), index=False)
    write_config(config)
    return frame


def gain_baseline(policies: Sequence[PolicyKind]) -> PolicyKind:
    return PolicyKind.llumnix if PolicyKind.llumnix in policies else policies[0]


def with_gains(frame: pd.DataFrame, baseline: PolicyKind) -> pd.DataFrame:
    """Add the baseline and the per-seed gain over its capacity; failed cells get no gain"""
    baselines = {
        row["seed"]: row["capacity"]
        for row in frame.to_dict("records")
        if row["policy"] == baseline.value
    }
    frame = frame.assign(baseline=baseline.value)
    frame["gain"] = [
        format_gain(baselines[seed], value)
        if _known(baselines.get(seed)) and _known(value)
        else ""
        for seed, value in zip(frame["seed"], frame["capacity"])
    ]
    return frame


def _known(capacity: Optional[float]) -> bool:
    return capacity is not None and not pd.isna(capacity) and capacity > 0
