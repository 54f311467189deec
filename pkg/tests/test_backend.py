from typing import Dict, List, Tuple

import numpy as np
import pytest

from blocksim.backend import (
    BatchPlan,
    ChunkedPrefillPlanner,
    InstanceState,
    MemoryManager,
    batch_latency,
)
from blocksim.core import CostModelParams, InstanceConfig, LocalPolicy, Request, RequestState
from blocksim.errors import EmptyPlan, RequestTooLarge
from tests.conftest import RequestFactory


def run_to_idle(instance: InstanceState, now: float = 0.0) -> float:
    while not instance.is_idle:
        now = instance.execute_step(now).end
        instance.audit()
    return now


def test_batch_latency_is_linear_in_plan_tokens() -> None:
    plan = BatchPlan(
        decode_ids=(1, 2),
        prefill_segments=((3, 100),),
        total_prefill_tokens=100,
        context_tokens=300,
    )

    expected = 0.01 + 1e-4 * 100 + 1e-3 * 2 + 1e-7 * 300
    assert batch_latency(plan, CostModelParams()) == pytest.approx(expected)


def test_batch_latency_rejects_empty_plan() -> None:
    with pytest.raises(EmptyPlan):
        batch_latency(BatchPlan(), CostModelParams())


def test_memory_manager_conserves_blocks() -> None:
    memory = MemoryManager(total_blocks=10, block_size=16)

    assert memory.grow_to(1, 17) == 2
    assert memory.grow_to(1, 20) == 0
    assert memory.grow_to(2, 16) == 1
    assert memory.free_blocks == 7 and memory.is_consistent()
    assert memory.release(1) == 2
    assert memory.free_blocks == 9 and memory.is_consistent()


def test_memory_manager_refuses_overallocation() -> None:
    memory = MemoryManager(total_blocks=2, block_size=16)

    with pytest.raises(ValueError):
        memory.grow_to(1, 33)


def test_single_request_hand_calculation(
    instance_config: InstanceConfig, make_request: RequestFactory
) -> None:
    instance = InstanceState(instance_config)
    request = make_request(1, prompt_tokens=100, output_tokens=3)
    instance.admit(request)

    run_to_idle(instance)

    # prefill step then two decode steps over a growing context
    assert request.first_token_time == pytest.approx(0.02)
    assert request.finish_time == pytest.approx(0.02 + 0.0110101 + 0.0110102)
    assert request.state is RequestState.finished
    assert request.decoded_tokens == 3
    assert instance.memory.free_blocks == instance_config.total_blocks


def test_chunked_prefill_splits_long_prompt_by_budget(
    instance_config: InstanceConfig, make_request: RequestFactory
) -> None:
    instance = InstanceState(instance_config)
    request = make_request(1, prompt_tokens=1200, output_tokens=2)
    instance.admit(request)

    chunks = []
    now = 0.0
    while request.first_token_time is None:
        outcome = instance.execute_step(now)
        chunks.append(outcome.plan.total_prefill_tokens)
        now = outcome.end

    assert chunks == [512, 512, 176]
    assert request.first_token_time == pytest.approx(0.0612 + 0.0612 + 0.0276)


def test_chunked_prefill_keeps_decoders_running(
    instance_config: InstanceConfig, make_request: RequestFactory
) -> None:
    instance = InstanceState(instance_config)
    instance.admit(make_request(1, prompt_tokens=100, output_tokens=5))
    instance.execute_step(0.0)
    instance.admit(make_request(2, prompt_tokens=100, output_tokens=5))

    plan = instance.form_batch()

    assert plan.decode_ids == (1,)
    assert plan.prefill_segments == ((2, 100),)
    assert plan.new_ids == (2,)


def test_prefill_priority_stalls_decoders_for_waiting_prompts(
    instance_config: InstanceConfig, make_request: RequestFactory
) -> None:
    config = instance_config.copy(update={"local_policy": LocalPolicy.prefill_priority})
    instance = InstanceState(config)
    instance.admit(make_request(1, prompt_tokens=100, output_tokens=5))
    instance.execute_step(0.0)
    instance.admit(make_request(2, prompt_tokens=100, output_tokens=5))

    plan = instance.form_batch()

    assert not plan.decode_ids
    assert plan.prefill_segments == ((2, 100),)


def decode_gaps(
    config: InstanceConfig, make_request: RequestFactory
) -> Tuple[List[float], List[BatchPlan]]:
    """Inter-token gaps of a steady decoder while long prompts keep arriving"""
    instance = InstanceState(config)
    decoder = make_request(1, prompt_tokens=100, output_tokens=30)
    instance.admit(decoder)
    now, step = 0.0, 0
    token_times: List[float] = []
    plans: List[BatchPlan] = []
    while not decoder.is_finished:
        if step in (5, 10, 15):
            instance.admit(make_request(100 + step, prompt_tokens=2000, output_tokens=2))
        decoded = decoder.decoded_tokens
        outcome = instance.execute_step(now)
        now = outcome.end
        plans.append(outcome.plan)
        if decoder.decoded_tokens > decoded:
            token_times.append(now)
        step += 1
    return list(np.diff(token_times)), plans


def test_prefill_priority_stalls_a_steady_decoder(
    instance_config: InstanceConfig, make_request: RequestFactory
) -> None:
    prefill_first = instance_config.copy(update={"local_policy": LocalPolicy.prefill_priority})

    stalled, plans = decode_gaps(prefill_first, make_request)
    hybrid, _ = decode_gaps(instance_config, make_request)

    assert all(not plan.decode_ids or not plan.prefill_segments for plan in plans)
    assert max(stalled) > 10 * min(stalled)
    assert max(stalled) > max(hybrid)


def test_chunked_planner_respects_batch_slots(make_request: RequestFactory) -> None:
    config = InstanceConfig(max_batch_size=2)
    waiting = [make_request(i, prompt_tokens=10) for i in range(4)]

    plan = ChunkedPrefillPlanner(config, MemoryManager(1056, 16), [], waiting)()

    assert plan.new_ids == (0, 1)


def test_admit_rejects_request_larger_than_memory(
    small_config: InstanceConfig, make_request: RequestFactory
) -> None:
    instance = InstanceState(small_config)

    with pytest.raises(RequestTooLarge):
        instance.admit(make_request(1, prompt_tokens=60, output_tokens=10))


def test_idle_instance_has_no_plan(instance_config: InstanceConfig) -> None:
    with pytest.raises(EmptyPlan):
        InstanceState(instance_config).begin_step(0.0)


def test_preemption_evicts_newest_and_recomputes(
    small_config: InstanceConfig, make_request: RequestFactory
) -> None:
    instance = InstanceState(small_config)
    first = make_request(1, prompt_tokens=16, output_tokens=40)
    second = make_request(2, prompt_tokens=16, output_tokens=40)
    instance.admit(first)
    instance.admit(second)

    run_to_idle(instance)

    assert instance.total_preemptions == 1
    assert (first.preemptions, second.preemptions) == (0, 1)
    assert second.prefilled_total == 32
    assert first.finish_time < second.finish_time  # type: ignore
    assert first.is_finished and second.is_finished


def test_begin_step_commits_eagerly_until_complete(
    instance_config: InstanceConfig, make_request: RequestFactory
) -> None:
    instance = InstanceState(instance_config)
    request = make_request(1, prompt_tokens=100, output_tokens=3)
    instance.admit(request)

    outcome = instance.begin_step(0.0)

    assert instance.is_busy and instance.busy_until == outcome.end
    assert request.prefill_progress == 100 and outcome.first_tokens == [1]
    instance.complete_step()
    assert not instance.is_busy and instance.busy_until is None


def test_snapshot_round_trips_through_from_snapshot(
    instance_config: InstanceConfig, make_request: RequestFactory
) -> None:
    instance = InstanceState(instance_config)
    for i in range(5):
        instance.admit(make_request(i, prompt_tokens=300 + i, output_tokens=50))
    now = 0.0
    for _ in range(3):
        now = instance.execute_step(now).end

    snapshot = instance.snapshot(now, qpm=5)
    rebuilt = InstanceState.from_snapshot(snapshot, instance_config)

    assert snapshot.qpm == 5 and snapshot.batch_size == len(instance.running)
    assert [r.id for r in rebuilt.running] == [r.id for r in instance.running]
    assert [r.id for r in rebuilt.waiting] == [r.id for r in instance.waiting]
    assert rebuilt.memory.free_blocks == instance.memory.free_blocks
    rebuilt.audit()


@pytest.mark.parametrize("local_policy", list(LocalPolicy))
def test_instance_invariants_hold_over_random_workload(local_policy: LocalPolicy) -> None:
    config = InstanceConfig(
        total_blocks=64,
        block_size=16,
        max_batch_size=8,
        chunk_budget=64,
        local_policy=local_policy,
    )
    instance = InstanceState(config)
    rng = np.random.default_rng(2024)
    requests: Dict[int, Request] = {}
    now, steps = 0.0, 0

    while steps < 10_000:
        if rng.random() < 0.1:
            request_id = len(requests)
            output = int(rng.integers(1, 100))
            requests[request_id] = Request(
                id=request_id,
                prompt_tokens=int(rng.integers(1, 200)),
                true_output_tokens=output,
                estimated_output_tokens=output,
                arrival_time=now,
                dispatch_time=now,
            )
            instance.admit(requests[request_id])
        if instance.is_idle:
            now += 0.01
            continue

        outcome = instance.execute_step(now)
        steps += 1
        instance.audit()
        assert 0 <= instance.memory.free_blocks <= config.total_blocks
        assert outcome.end > outcome.start
        if local_policy is LocalPolicy.chunked_prefill:
            plan = outcome.plan
            assert len(plan.decode_ids) + plan.total_prefill_tokens <= config.chunk_budget
        for request_id in outcome.completions:
            finished = requests[request_id]
            assert finished.decoded_tokens == finished.true_output_tokens
            assert finished.finish_time == outcome.end
        now = outcome.end

    run_to_idle(instance, now)

    assert all(request.is_finished for request in requests.values())
    assert instance.memory.free_blocks == config.total_blocks
    for request in requests.values():
        assert request.first_token_time <= request.finish_time  # type: ignore
        if request.preemptions == 0:
            assert request.prefilled_total == request.prompt_tokens
        else:
            assert request.prefilled_total > request.prompt_tokens
