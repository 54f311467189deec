"""
Evaluation metrics over a finished run

aggregate turns the raw run log into a RunReport: per-request rows, aggregates, the
dispatch-time memory series and probe rows. Percentiles use the nearest-rank method.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.ndimage import gaussian_filter1d

from blocksim.autoscaler import ProvisionRecord
from blocksim.core import Request, Seconds
from blocksim.errors import IncompleteRun, NoCapacity
from blocksim.scheduler import rank_of

logger = logging.getLogger(__name__)

DEFAULT_SLO_TTFT_P99: Seconds = 3.0
FINE_STEP = 0.1


def percentile(values: Sequence[float], q: float) -> float:
    """
    Nearest-rank percentile, nan for an empty sample

    >>> percentile([5.0] * 100, 99)
    5.0
    >>> percentile([1.0, 2.0, 3.0, 4.0], 50)
    2.0
    """
    if not len(values):
        return math.nan
    return float(np.percentile(values, q, method="inverted_cdf"))


# ==============
# RAW RUN LOG
# ==============


@dataclass
class DispatchSample:
    time: Seconds
    free_blocks: Sequence[int]
    cumulative_preemptions: int


@dataclass
class ProbeRecord:
    request_id: int
    dispatched_instance: int
    predicted: Dict[int, Seconds]
    accumulated_error: Optional[float] = None
    counterfactual: Optional[Dict[int, Seconds]] = None


@dataclass
class RunLog:
    """Everything a run observed, collected by the harness"""

    requests: List[Request] = field(default_factory=list)
    predicted_e2e: Dict[int, Seconds] = field(default_factory=dict)
    samples: List[DispatchSample] = field(default_factory=list)
    probes: List[ProbeRecord] = field(default_factory=list)
    provisions: List[ProvisionRecord] = field(default_factory=list)
    fallbacks: int = 0
    cache_hits: int = 0
    cache_misses: int = 0


# ==============
# REPORT
# ==============


class RequestRow(BaseModel):
    request_id: int
    instance_id: Optional[int]
    prompt_tokens: int
    output_tokens: int
    arrival_s: Seconds
    ttft_s: Optional[Seconds]
    e2e_s: Optional[Seconds]
    overhead_s: Optional[Seconds]
    preempt_count: int
    predicted_e2e_s: Optional[Seconds]
    censored: bool


class SeriesRow(BaseModel):
    time_s: Seconds
    free_blocks_mean: float
    free_blocks_var: float
    free_blocks_mean_smoothed: float
    free_blocks_var_smoothed: float
    cumulative_preemptions: int
    instances: int


class ProbeRow(BaseModel):
    """One (probed request, instance) pair"""

    request_id: int
    instance_id: int
    selected: bool
    predicted_s: Seconds
    realized_s: Optional[Seconds]
    predicted_rank: int
    accumulated_error: Optional[float]
    counterfactual_s: Optional[Seconds] = None
    realized_rank: Optional[int] = None


class Aggregates(BaseModel):
    requests: int = 0
    finished: int = 0
    unfinished: int = 0
    ttft_mean: Seconds = math.nan
    ttft_p50: Seconds = math.nan
    ttft_p99: Seconds = math.nan
    e2e_mean: Seconds = math.nan
    e2e_p50: Seconds = math.nan
    e2e_p99: Seconds = math.nan
    overhead_mean: Seconds = math.nan
    overhead_p50: Seconds = math.nan
    overhead_p99: Seconds = math.nan
    throughput: float = 0.0
    total_preemptions: int = 0
    fallbacks: int = 0
    over_threshold: int = 0
    prediction_error: Optional[float] = None
    cache_hit_rate: Optional[float] = None
    free_blocks_var_mean: float = 0.0
    instances_final: int = 0
    provisions: int = 0


class RunReport(BaseModel):
    aggregates: Aggregates = Field(default_factory=Aggregates)
    requests: List[RequestRow] = Field(default_factory=list)
    series: List[SeriesRow] = Field(default_factory=list)
    probes: List[ProbeRow] = Field(default_factory=list)
    provisions: List[Dict] = Field(default_factory=list)

    def meets_slo(self, slo: Seconds = DEFAULT_SLO_TTFT_P99) -> bool:
        """P99 TTFT strictly under {slo}"""
        return self.aggregates.ttft_p99 < slo


def relative_error(predicted: Seconds, realized: Seconds) -> float:
    return abs(predicted - realized) / realized


def aggregate(
    log: RunLog,
    e2e_threshold: Optional[Seconds] = None,
    strict: bool = False,
    smoothing_sigma: float = 0.0,
) -> RunReport:
    """
    Build the report of a completed run

    Unfinished requests are kept as censored rows and excluded from latency statistics.
    The memory series carries raw columns next to gaussian-smoothed ones.

    :raise IncompleteRun if {strict} and unfinished requests remain
    """
    finished = [request for request in log.requests if request.is_finished]
    unfinished = len(log.requests) - len(finished)
    if unfinished:
        if strict:
            raise IncompleteRun(unfinished)
        logger.warning("%d requests unfinished at log end, rows censored", unfinished)

    rows = [_request_row(request, log.predicted_e2e.get(request.id)) for request in log.requests]
    series = _series(log.samples, smoothing_sigma)
    ttfts = [r.ttft for r in finished if r.ttft is not None]
    e2es = [r.e2e_latency for r in finished if r.e2e_latency is not None]
    overheads = [
        r.scheduling_overhead for r in log.requests if r.scheduling_overhead is not None
    ]

    aggregates = Aggregates(
        requests=len(log.requests),
        finished=len(finished),
        unfinished=unfinished,
        ttft_mean=_mean(ttfts),
        ttft_p50=percentile(ttfts, 50),
        ttft_p99=percentile(ttfts, 99),
        e2e_mean=_mean(e2es),
        e2e_p50=percentile(e2es, 50),
        e2e_p99=percentile(e2es, 99),
        overhead_mean=_mean(overheads),
        overhead_p50=percentile(overheads, 50),
        overhead_p99=percentile(overheads, 99),
        throughput=_throughput(log.requests, finished),
        total_preemptions=sum(request.preemptions for request in log.requests),
        fallbacks=log.fallbacks,
        over_threshold=(
            sum(e2e > e2e_threshold for e2e in e2es) if e2e_threshold is not None else 0
        ),
        prediction_error=_prediction_error(finished, log.predicted_e2e),
        cache_hit_rate=_hit_rate(log.cache_hits, log.cache_misses),
        free_blocks_var_mean=_mean([row.free_blocks_var for row in series]) if series else 0.0,
        instances_final=series[-1].instances if series else 0,
        provisions=len(log.provisions),
    )
    return RunReport(
        aggregates=aggregates,
        requests=rows,
        series=series,
        probes=_probe_rows(log.probes, {request.id: request for request in log.requests}),
        provisions=[
            {
                "instance_id": record.instance_id,
                "requested_s": record.requested_at,
                "live_s": record.live_at,
                "trigger_s": record.trigger_value,
            }
            for record in log.provisions
        ],
    )


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else math.nan


def _throughput(requests: Sequence[Request], finished: Sequence[Request]) -> float:
    if not finished:
        return 0.0
    first_arrival = min(request.arrival_time for request in requests)
    last_finish = max(request.finish_time for request in finished)  # type: ignore
    span = last_finish - first_arrival
    return len(finished) / span if span > 0 else 0.0


def _prediction_error(
    finished: Sequence[Request], predicted: Dict[int, Seconds]
) -> Optional[float]:
    errors = [
        relative_error(predicted[request.id], request.e2e_latency)  # type: ignore
        for request in finished
        if request.id in predicted
    ]
    return _mean(errors) if errors else None


def _hit_rate(hits: int, misses: int) -> Optional[float]:
    return hits / (hits + misses) if hits + misses else None


def _request_row(request: Request, predicted: Optional[Seconds]) -> RequestRow:
    return RequestRow.construct(
        request_id=request.id,
        instance_id=request.instance_id,
        prompt_tokens=request.prompt_tokens,
        output_tokens=request.true_output_tokens,
        arrival_s=request.arrival_time,
        ttft_s=request.ttft,
        e2e_s=request.e2e_latency,
        overhead_s=request.scheduling_overhead,
        preempt_count=request.preemptions,
        predicted_e2e_s=predicted,
        censored=not request.is_finished,
    )


def _series(samples: Sequence[DispatchSample], sigma: float) -> List[SeriesRow]:
    frees = [np.asarray(sample.free_blocks, dtype=float) for sample in samples]
    means = [float(free.mean()) for free in frees]
    variances = [float(free.var()) for free in frees]
    return [
        SeriesRow.construct(
            time_s=sample.time,
            free_blocks_mean=mean,
            free_blocks_var=variance,
            free_blocks_mean_smoothed=float(mean_smoothed),
            free_blocks_var_smoothed=float(var_smoothed),
            cumulative_preemptions=sample.cumulative_preemptions,
            instances=len(free),
        )
        for sample, free, mean, variance, mean_smoothed, var_smoothed in zip(
            samples, frees, means, variances, smooth(means, sigma), smooth(variances, sigma)
        )
    ]


def _probe_rows(probes: Sequence[ProbeRecord], requests: Dict[int, Request]) -> List[ProbeRow]:
    rows = []
    for probe in probes:
        realized = requests[probe.request_id].e2e_latency
        predicted_rank = rank_of(probe.dispatched_instance, probe.predicted)
        realized_rank = (
            rank_of(probe.dispatched_instance, probe.counterfactual)
            if probe.counterfactual
            else None
        )
        for instance_id in sorted(probe.predicted):
            rows.append(
                ProbeRow.construct(
                    request_id=probe.request_id,
                    instance_id=instance_id,
                    selected=instance_id == probe.dispatched_instance,
                    predicted_s=probe.predicted[instance_id],
                    realized_s=realized,
                    predicted_rank=predicted_rank,
                    accumulated_error=probe.accumulated_error,
                    counterfactual_s=(
                        probe.counterfactual.get(instance_id) if probe.counterfactual else None
                    ),
                    realized_rank=realized_rank,
                )
            )
    return rows


# ==============
# PROBING
# ==============


def probe_sample(request_ids: Sequence[int], probability: float, seed: int) -> Set[int]:
    """
    Seeded Bernoulli selection of probed requests

    >>> sorted(probe_sample([1, 2, 3], 1.0, seed=0))
    [1, 2, 3]
    >>> probe_sample([1, 2, 3], 0.0, seed=0)
    set()
    """
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must be within [0, 1]")

    draws = np.random.default_rng(seed).random(len(request_ids))
    return {request_id for request_id, draw in zip(request_ids, draws) if draw < probability}


# ==============
# CAPACITY
# ==============


class CapacityResult(BaseModel):
    capacity: float
    bracket: Tuple[float, Optional[float]]
    points: Dict[float, bool]
    monotone: bool


Runner = Callable[[float], RunReport]


def capacity_search(
    runner: Runner,
    slo: Seconds = DEFAULT_SLO_TTFT_P99,
    qps_range: Tuple[int, int] = (1, 64),
    binary: bool = False,
) -> CapacityResult:
    """
    Largest QPS whose report keeps P99 TTFT under {slo}

    An integer sweep (or binary search) finds the bracket (q, q + 1); a 0.1 sweep inside it
    picks the capacity. Every fine point is evaluated so a non-monotone runner is flagged.

    :raise NoCapacity if the lowest QPS already violates the SLO
    """
    low, high = qps_range
    if low > high:
        raise ValueError("empty qps range")

    points: Dict[float, bool] = {}

    def passes(qps: float) -> bool:
        if qps not in points:
            points[qps] = runner(qps).meets_slo(slo)
            logger.info("qps %.1f: %s", qps, "pass" if points[qps] else "fail")
        return points[qps]

    if not passes(float(low)):
        raise NoCapacity(float(low))

    passing = _binary_bracket(passes, low, high) if binary else _linear_bracket(passes, low, high)
    if passing == high and passes(float(high)):
        return CapacityResult(
            capacity=float(high), bracket=(float(high), None), points=points, monotone=True
        )

    for step in range(1, 10):
        passes(round(passing + step * FINE_STEP, 1))

    in_bracket = sorted(qps for qps in points if passing <= qps < passing + 1)
    capacity = max(qps for qps in in_bracket if points[qps])
    return CapacityResult(
        capacity=capacity,
        bracket=(float(passing), float(passing + 1)),
        points=points,
        monotone=_is_monotone(points),
    )


def _linear_bracket(passes: Callable[[float], bool], low: int, high: int) -> int:
    passing = low
    for qps in range(low + 1, high + 1):
        if not passes(float(qps)):
            break
        passing = qps
    return passing


def _binary_bracket(passes: Callable[[float], bool], low: int, high: int) -> int:
    if passes(float(high)):
        return high
    while high - low > 1:
        middle = (low + high) // 2
        if passes(float(middle)):
            low = middle
        else:
            high = middle
    return low


def _is_monotone(points: Dict[float, bool]) -> bool:
    """No passing point above a failing one"""
    failed = False
    for qps in sorted(points):
        if not points[qps]:
            failed = True
        elif failed:
            return False
    return True


def format_gain(baseline: float, improved: float) -> str:
    """
    Relative capacity gain

    >>> format_gain(12.0, 14.0)
    '16.7%'
    """
    return f"{(improved - baseline) / baseline * 100:.1f}%"


# ==============
# SMOOTHING
# ==============


def smooth(series: Sequence[float], sigma: float) -> np.ndarray:
    """
    Gaussian smoothing with reflective boundary; sigma 0 returns the series unchanged

    >>> smooth([1.0, 5.0, 2.0], 0).tolist()
    [1.0, 5.0, 2.0]
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")

    values = np.asarray(series, dtype=float)
    if sigma == 0 or not len(values):
        return values.copy()
    return gaussian_filter1d(values, sigma, mode="reflect")
