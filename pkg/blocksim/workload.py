"""
Traces, arrival processes and response-length estimation

Trace format: one JSON object per line with id, prompt_tokens, output_tokens and optional
estimated_output_tokens and arrival_offset_s.
"""
import logging
import math
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, root_validator

from blocksim.core import Request, Seconds
from blocksim.errors import InvalidRecord
from blocksim.repositories.base import JsonLinesRepo

logger = logging.getLogger(__name__)


class TraceRecord(BaseModel):
    id: int = Field(..., ge=0)
    prompt_tokens: int = Field(..., ge=1)
    output_tokens: int = Field(..., ge=1)
    estimated_output_tokens: Optional[int] = Field(None, ge=1)
    arrival_offset_s: Optional[float] = Field(None, ge=0)

    class Config:
        frozen = True


class TraceRepo(JsonLinesRepo[TraceRecord]):
    def validate_all(self, entities: List[TraceRecord]) -> None:
        seen = set()
        for line, record in enumerate(entities, start=1):
            if record.id in seen:
                raise InvalidRecord("id", line, f"duplicate id {record.id}")
            seen.add(record.id)


def load_trace(path: str) -> List[TraceRecord]:
    """
    Records in file order

    :raise ParseError with the line number
    :raise InvalidRecord naming the field
    """
    records = TraceRepo().read(path)
    logger.info("loaded %d trace records from %s", len(records), path)
    return records


def parse_trace(lines: Iterable[str]) -> List[TraceRecord]:
    return TraceRepo().parse(lines)


def write_trace(records: Iterable[TraceRecord], path: str) -> None:
    TraceRepo().write(records, path)


# ==============
# ARRIVALS
# ==============

Arrival = Tuple[Seconds, TraceRecord]


def generate_arrivals(records: Sequence[TraceRecord], qps: float, seed: int) -> List[Arrival]:
    """
    Poisson arrivals in trace order

    >>> records = [TraceRecord(id=i, prompt_tokens=1, output_tokens=1) for i in range(3)]
    >>> times = [t for t, _ in generate_arrivals(records, qps=2.0, seed=7)]
    >>> times == sorted(times) and times[0] > 0
    True
    """
    if qps <= 0:
        raise ValueError("qps must be > 0")

    rng = np.random.default_rng(seed)
    times = np.cumsum(rng.exponential(1.0 / qps, size=len(records)))
    return [(float(t), record) for t, record in zip(times, records)]


def replay_arrivals(records: Sequence[TraceRecord]) -> List[Arrival]:
    """Arrivals at the trace's own offsets, stably sorted by time"""
    arrivals = [(float(record.arrival_offset_s or 0.0), record) for record in records]
    return sorted(arrivals, key=lambda arrival: arrival[0])


def arrivals_for(records: Sequence[TraceRecord], qps: float, seed: int) -> List[Arrival]:
    """Trace offsets when every record carries one, Poisson arrivals otherwise"""
    with_offsets = sum(record.arrival_offset_s is not None for record in records)
    if records and with_offsets == len(records):
        return replay_arrivals(records)
    if with_offsets:
        logger.warning(
            "%d of %d records carry arrival offsets, using Poisson arrivals for all",
            with_offsets,
            len(records),
        )
    return generate_arrivals(records, qps, seed)


# ==============
# LENGTH ESTIMATION
# ==============


class EstimatorKind(str, Enum):
    oracle = "Oracle"
    fixed = "Fixed"
    noisy = "Noisy"


class LengthEstimator(BaseModel):
    kind: EstimatorKind = EstimatorKind.oracle
    value: Optional[int] = None
    mean_abs_rel_error: float = Field(0.244, ge=0)
    seed: Optional[int] = None

    class Config:
        frozen = True

    @root_validator(skip_on_failure=True)
    def check_parameters(cls, values: Dict) -> Dict:
        kind = values["kind"]
        if kind is EstimatorKind.fixed and (values.get("value") or 0) < 1:
            raise ValueError("Fixed estimator needs value >= 1")
        if kind is EstimatorKind.noisy and values.get("seed") is None:
            raise ValueError("Noisy estimator needs an explicit seed")
        return values


# E|z| of a standard normal
_HALF_NORMAL_MEAN = math.sqrt(2.0 / math.pi)


def estimate_length(estimator: LengthEstimator, record: TraceRecord) -> int:
    """
    Estimated response length of {record}

    Noisy errors are e = s * |z| * scale with s a fair sign and z standard normal, scaled so
    E|e| is the configured mean error. Each record draws from a stream seeded by
    (seed, record id), so estimates do not depend on trace order.

    >>> record = TraceRecord(id=0, prompt_tokens=10, output_tokens=300)
    >>> estimate_length(LengthEstimator(), record)
    300
    >>> estimate_length(LengthEstimator(kind="Fixed", value=256), record)
    256
    """
    if estimator.kind is EstimatorKind.oracle:
        return record.output_tokens
    if estimator.kind is EstimatorKind.fixed:
        assert estimator.value is not None
        return estimator.value

    rng = np.random.default_rng([estimator.seed, record.id])
    sign = 1.0 if rng.random() < 0.5 else -1.0
    error = sign * abs(rng.standard_normal()) * estimator.mean_abs_rel_error / _HALF_NORMAL_MEAN
    return max(1, int(round(record.output_tokens * (1.0 + error))))


def tag_records(records: Sequence[TraceRecord], estimator: LengthEstimator) -> List[TraceRecord]:
    """Fill estimated lengths; records tagged upstream keep their estimate"""
    return [
        record
        if record.estimated_output_tokens is not None
        else record.copy(update={"estimated_output_tokens": estimate_length(estimator, record)})
        for record in records
    ]


def to_requests(arrivals: Sequence[Arrival]) -> List[Request]:
    """Requests with ids in arrival order; records must already be tagged"""
    requests = []
    for request_id, (arrival_time, record) in enumerate(arrivals):
        assert record.estimated_output_tokens is not None, f"record {record.id} is untagged"
        requests.append(
            Request(
                id=request_id,
                prompt_tokens=record.prompt_tokens,
                true_output_tokens=record.output_tokens,
                estimated_output_tokens=record.estimated_output_tokens,
                arrival_time=arrival_time,
            )
        )
    return requests


class EstimatorAccuracy(BaseModel):
    mean_abs_rel_error: float
    acc_50: float
    acc_100: float


def estimator_accuracy(
    estimator: LengthEstimator, records: Sequence[TraceRecord]
) -> EstimatorAccuracy:
    """Mean relative error and the share of records within 50 and 100 tokens"""
    truth = np.array([record.output_tokens for record in records], dtype=float)
    estimates = np.array([estimate_length(estimator, record) for record in records], dtype=float)
    absolute = np.abs(estimates - truth)
    return EstimatorAccuracy(
        mean_abs_rel_error=float(np.mean(absolute / truth)),
        acc_50=float(np.mean(absolute < 50)),
        acc_100=float(np.mean(absolute < 100)),
    )


# ==============
# TRACE SOURCES
# ==============


def synthesize_trace(
    count: int,
    seed: int,
    prompt_median: int = 256,
    output_median: int = 200,
    sigma: float = 1.0,
    max_prompt_tokens: int = 4096,
    max_output_tokens: int = 2048,
) -> List[TraceRecord]:
    """Heavy-tailed log-normal prompt and output lengths"""
    rng = np.random.default_rng(seed)
    prompts = rng.lognormal(math.log(prompt_median), sigma, size=count)
    outputs = rng.lognormal(math.log(output_median), sigma, size=count)
    prompts = np.clip(np.rint(prompts), 1, max_prompt_tokens).astype(int)
    outputs = np.clip(np.rint(outputs), 1, max_output_tokens).astype(int)
    return [
        TraceRecord(id=i, prompt_tokens=int(prompt), output_tokens=int(output))
        for i, (prompt, output) in enumerate(zip(prompts, outputs))
    ]


def _word_count(text: str) -> int:
    return len(text.split())


def convert_sharegpt(conversations: Iterable[Mapping[str, Any]]) -> List[TraceRecord]:
    """
    One record per human turn answered by a gpt turn

    Token counts are whitespace word counts; pairs with an empty side are skipped.

    >>> dump = [{"id": "a", "conversations": [{"from": "human", "value": "hi there"},
    ...                                       {"from": "gpt", "value": "hello"}]}]
    >>> [(r.prompt_tokens, r.output_tokens) for r in convert_sharegpt(dump)]
    [(2, 1)]
    """
    records: List[TraceRecord] = []
    for conversation in conversations:
        turns = conversation.get("conversations") or []
        for asked, answered in zip(turns, turns[1:]):
            if asked.get("from") != "human" or answered.get("from") != "gpt":
                continue
            prompt = _word_count(asked.get("value", ""))
            output = _word_count(answered.get("value", ""))
            if prompt and output:
                records.append(
                    TraceRecord(id=len(records), prompt_tokens=prompt, output_tokens=output)
                )
    return records


BURSTGPT_COLUMNS = ("Timestamp", "Request tokens", "Response tokens")


def convert_burstgpt(frame: pd.DataFrame) -> List[TraceRecord]:
    """
    Records from a BurstGPT-style length trace

    Timestamps become arrival offsets from the first row; failed rows without a response are
    skipped.
    """
    missing = [column for column in BURSTGPT_COLUMNS if column not in frame.columns]
    if missing:
        raise InvalidRecord(missing[0], message="column missing")

    rows = frame[(frame["Request tokens"] > 0) & (frame["Response tokens"] > 0)]
    if rows.empty:
        return []

    start = float(rows["Timestamp"].min())
    return [
        TraceRecord(
            id=i,
            prompt_tokens=int(prompt),
            output_tokens=int(output),
            arrival_offset_s=float(timestamp) - start,
        )
        for i, (timestamp, prompt, output) in enumerate(
            zip(rows["Timestamp"], rows["Request tokens"], rows["Response tokens"])
        )
    ]
