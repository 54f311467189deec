import os
from typing import Dict, List, Sequence

import aiohttp
import pytest
from aiohttp.test_utils import TestClient, TestServer

from blocksim.backend import InstanceState
from blocksim.core import InstanceConfig, InstanceSnapshot, Request
from blocksim.errors import PredictionFailure, PredictorUnavailable
from blocksim.harness.config import parse_config
from blocksim.harness.runner import build_requests, simulate
from blocksim.harness.service import (
    SERVICE_TIME_HEADER,
    BackendService,
    GenerateRequest,
    HttpPredictor,
    PredictorService,
    Role,
    SchedulerService,
    build_app,
)
from blocksim.json_ import JsonRepo
from blocksim.predictor import (
    Candidate,
    InProcessPredictor,
    PredictionRequest,
    predict,
    predict_across,
)
from blocksim.scheduler import Dispatcher, Policy, PolicyKind
from blocksim.utils import model_to_primitive

FIXTURES_DIR = os.path.join(os.path.dirname(__file__), "fixtures")
GOLDEN: List[Dict] = JsonRepo[Dict](FIXTURES_DIR).read("dispatch_golden.json")["cases"]
UNREACHABLE = "http://127.0.0.1:9"

ROUTES = {
    Role.backend: {"/status", "/generate", "/requests/{request_id}"},
    Role.predictor: {"/predict"},
    Role.scheduler: {"/select", "/dispatch"},
}


class FakeClock:
    def __init__(self, now: float = 100.0) -> None:
        self.now = now

    def __call__(self) -> float:
        return self.now


def golden(name: str) -> Dict:
    return next(case for case in GOLDEN if case["name"] == name)


def golden_inputs(case: Dict) -> tuple:
    snapshots = [InstanceSnapshot.parse_obj(raw) for raw in case["snapshots"]]
    configs = {s.instance_id: InstanceConfig(instance_id=s.instance_id) for s in snapshots}
    return snapshots, configs, GenerateRequest.parse_obj(case["request"])


def idle_prediction_request(config: InstanceConfig, prompt_tokens: int = 100) -> Dict:
    return model_to_primitive(
        PredictionRequest(
            snapshot=InstanceState(config).snapshot(0.0),
            candidate=Candidate(prompt_tokens=prompt_tokens, estimated_output_tokens=3),
            instance_config=config,
        )
    )


# ==============
# BACKEND
# ==============


@pytest.mark.asyncio
async def test_backend_accepts_requests_and_reports_progress() -> None:
    clock = FakeClock()
    backend = BackendService(InstanceConfig(), clock=clock)

    async with TestClient(TestServer(backend.create_app(paced=False))) as client:
        accepted = await client.post(
            "/generate", json={"id": 1, "prompt_tokens": 100, "output_tokens": 3}
        )
        assert accepted.status == 200
        assert await accepted.json() == {"request_id": 1, "instance_id": 0}
        assert float(accepted.headers[SERVICE_TIME_HEADER]) >= 0

        status = await (await client.get("/status")).json()
        clock.now += 1.0
        progress = await (await client.get("/requests/1")).json()

    assert (status["batch_size"], status["qpm"]) == (1, 1)
    assert status["busy_until"] == pytest.approx(0.02)
    assert progress["state"] == "Finished" and progress["decoded_tokens"] == 3
    assert progress["ttft_s"] == pytest.approx(0.02)
    assert progress["e2e_s"] == pytest.approx(0.0420203)


@pytest.mark.asyncio
@pytest.mark.parametrize(
    "body",
    [
        {"id": 1, "prompt_tokens": 0, "output_tokens": 3},
        {"id": 1, "prompt_tokens": 20000, "output_tokens": 3},
        {"prompt_tokens": 10, "output_tokens": 3},
    ],
)
async def test_backend_rejects_bad_generate_bodies(body: Dict) -> None:
    backend = BackendService(InstanceConfig(), clock=FakeClock())

    async with TestClient(TestServer(backend.create_app(paced=False))) as client:
        response = await client.post("/generate", json=body)
        payload = await response.json()

    assert response.status == 400
    assert payload["code"] == "bad-schema"
    assert SERVICE_TIME_HEADER in response.headers
    assert not backend.requests


@pytest.mark.asyncio
async def test_backend_error_codes() -> None:
    backend = BackendService(InstanceConfig(), clock=FakeClock())
    body = {"id": 1, "prompt_tokens": 10, "output_tokens": 3}

    async with TestClient(TestServer(backend.create_app(paced=False))) as client:
        not_json = await client.post("/generate", data="not json")
        await client.post("/generate", json=body)
        duplicate = await client.post("/generate", json=body)
        unknown = await client.get("/requests/99")
        codes = [
            (response.status, (await response.json())["code"])
            for response in (not_json, duplicate, unknown)
        ]

    assert codes == [(400, "bad-schema"), (400, "bad-schema"), (404, "request-unknown")]


def test_backend_timeline_does_not_depend_on_tick_length() -> None:
    def finish_time(ticks: Sequence[float]) -> float:
        clock = FakeClock()
        backend = BackendService(InstanceConfig(), clock=clock)
        request = backend.generate(GenerateRequest(id=1, prompt_tokens=700, output_tokens=20))
        for tick in ticks:
            clock.now += tick
            backend.advance(backend.now())
        assert request.finish_time is not None
        return request.finish_time

    assert finish_time([0.001] * 2000) == pytest.approx(finish_time([2.0]), abs=1e-12)


# ==============
# PREDICTOR
# ==============


@pytest.mark.asyncio
async def test_predictor_service_matches_in_process_prediction() -> None:
    config = InstanceConfig()
    body = idle_prediction_request(config)

    async with TestClient(TestServer(PredictorService().create_app())) as client:
        response = await client.post("/predict", json=body)
        payload = await response.json()

    assert response.status == 200
    assert payload["metrics"] == predict(PredictionRequest.parse_obj(body)).metrics
    assert payload["simulated_steps"] == 3
    assert "cache_hits" not in payload and "cache_misses" not in payload


@pytest.mark.asyncio
async def test_predictor_service_error_codes() -> None:
    mismatched = idle_prediction_request(InstanceConfig())
    mismatched["instance_config"]["instance_id"] = 5

    async with TestClient(TestServer(PredictorService().create_app())) as client:
        too_large = await client.post(
            "/predict", json=idle_prediction_request(InstanceConfig(), prompt_tokens=20000)
        )
        wrong_instance = await client.post("/predict", json=mismatched)
        codes = [
            (response.status, (await response.json())["code"])
            for response in (too_large, wrong_instance)
        ]

    assert codes == [(422, "prediction-failed"), (400, "bad-schema")]


@pytest.mark.asyncio
async def test_http_predictor_spreads_instances_over_replicas() -> None:
    configs = {i: InstanceConfig(instance_id=i) for i in range(3)}
    snapshots = [InstanceState(configs[i]).snapshot(0.0) for i in range(3)]
    candidate = Candidate(prompt_tokens=100, estimated_output_tokens=3)
    first, second = PredictorService(), PredictorService()

    async with TestServer(first.create_app()) as one, TestServer(second.create_app()) as two:
        async with aiohttp.ClientSession() as session:
            urls = [str(one.make_url("/")), str(two.make_url("/"))]
            results = await HttpPredictor(session, urls).predict_across(
                snapshots, configs, candidate
            )

    expected = predict_across(snapshots, configs, candidate)
    assert {i: r.metrics for i, r in results.items()} == {
        i: r.metrics for i, r in expected.items()
    }
    assert first.cache.misses > 0 and second.cache.misses > 0


@pytest.mark.asyncio
async def test_http_predictor_raises_prediction_failure_on_422() -> None:
    config = InstanceConfig(instance_id=4)
    snapshot = InstanceState(config).snapshot(0.0)

    async with TestServer(PredictorService().create_app()) as server:
        async with aiohttp.ClientSession() as session:
            predictor = HttpPredictor(session, [str(server.make_url("/"))])
            with pytest.raises(PredictionFailure) as exc_info:
                await predictor.predict(
                    snapshot, config, Candidate(prompt_tokens=20000, estimated_output_tokens=1)
                )

    assert exc_info.value.instance_id == 4


@pytest.mark.asyncio
async def test_http_predictor_raises_unavailable_when_unreachable() -> None:
    config = InstanceConfig()

    async with aiohttp.ClientSession() as session:
        predictor = HttpPredictor(session, [UNREACHABLE], timeout_s=1.0)
        with pytest.raises(PredictorUnavailable):
            await predictor.predict(
                InstanceState(config).snapshot(0.0),
                config,
                Candidate(prompt_tokens=10, estimated_output_tokens=1),
            )


def test_http_predictor_needs_a_url() -> None:
    with pytest.raises(ValueError):
        HttpPredictor(None, [])  # type: ignore


# ==============
# SCHEDULER
# ==============


@pytest.mark.parametrize("case", GOLDEN, ids=[case["name"] for case in GOLDEN])
def test_in_process_dispatch_matches_golden(case: Dict) -> None:
    snapshots, configs, body = golden_inputs(case)
    dispatcher = Dispatcher(Policy.parse_obj(case["policy"]), configs, InProcessPredictor())
    request = Request(
        id=body.id,
        prompt_tokens=body.prompt_tokens,
        true_output_tokens=body.output_tokens,
        estimated_output_tokens=body.estimate,
        arrival_time=0.0,
    )

    decision = dispatcher.dispatch(request, snapshots)

    assert decision.instance_id == case["expected"]
    assert not decision.fallback


@pytest.mark.asyncio
@pytest.mark.parametrize("case", GOLDEN, ids=[case["name"] for case in GOLDEN])
async def test_scheduler_service_matches_golden(case: Dict) -> None:
    snapshots, configs, body = golden_inputs(case)

    async with TestServer(PredictorService().create_app()) as predictor:
        scheduler = SchedulerService(
            Policy.parse_obj(case["policy"]),
            InstanceConfig(),
            predictor_urls=[str(predictor.make_url("/"))],
        )
        async with TestClient(TestServer(scheduler.create_app())) as client:
            response = await client.post(
                "/select", json={"request": case["request"], "snapshots": case["snapshots"]}
            )
            payload = await response.json()

    assert response.status == 200
    assert payload["instance_id"] == case["expected"]
    assert payload["fallback"] is False
    if case["policy"]["kind"] == PolicyKind.block.value:
        expected = predict_across(snapshots, configs, body.candidate())
        assert payload["predictions"] == {str(i): r.metrics for i, r in expected.items()}
    else:
        assert payload["predictions"] == {}


@pytest.mark.asyncio
async def test_scheduler_falls_back_when_predictor_is_unreachable() -> None:
    case = golden("block-avoids-long-running-request")
    scheduler = SchedulerService(
        Policy(kind=PolicyKind.block),
        InstanceConfig(),
        predictor_urls=[UNREACHABLE],
        timeout_s=1.0,
    )

    async with TestClient(TestServer(scheduler.create_app())) as client:
        response = await client.post(
            "/select", json={"request": case["request"], "snapshots": case["snapshots"]}
        )
        payload = await response.json()

    assert payload == {"instance_id": 1, "fallback": True, "predictions": {}}
    assert scheduler.dispatcher.fallbacks == 1


@pytest.mark.asyncio
async def test_scheduler_error_codes() -> None:
    scheduler = SchedulerService(Policy(kind=PolicyKind.llumnix), InstanceConfig())
    request = {"id": 1, "prompt_tokens": 10, "output_tokens": 3}

    async with TestClient(TestServer(scheduler.create_app())) as client:
        empty = await client.post("/select", json={"request": request, "snapshots": []})
        malformed = await client.post("/select", json={"request": request})
        codes = [
            (response.status, (await response.json())["code"])
            for response in (empty, malformed)
        ]

    assert codes == [(404, "instance-unknown"), (400, "bad-schema")]


@pytest.mark.asyncio
async def test_scheduler_dispatch_forwards_to_chosen_backend() -> None:
    backends = [
        BackendService(InstanceConfig(instance_id=i), clock=FakeClock()) for i in range(2)
    ]

    async with TestServer(backends[0].create_app(paced=False)) as zero, TestServer(
        backends[1].create_app(paced=False)
    ) as one:
        scheduler = SchedulerService(
            Policy(kind=PolicyKind.llumnix),
            InstanceConfig(),
            backends={0: str(zero.make_url("/")), 1: str(one.make_url("/"))},
        )
        async with TestClient(TestServer(scheduler.create_app())) as client:
            chosen = []
            for request_id in (1, 2):
                response = await client.post(
                    "/dispatch",
                    json={"id": request_id, "prompt_tokens": 100, "output_tokens": 50},
                )
                assert response.status == 200
                chosen.append((await response.json())["instance_id"])

    assert chosen == [0, 1]
    assert list(backends[0].requests) == [1]
    assert list(backends[1].requests) == [2]


@pytest.mark.asyncio
async def test_service_mode_matches_in_process_run() -> None:
    config = parse_config(
        {
            "cluster": {"instances": 2},
            "workload": {"seed": 1, "qps": 4.0, "synthetic": {"count": 100, "seed": 2}},
        }
    )
    requests = build_requests(config, config.workload.qps, config.workload.seed)
    in_process = {row.request_id: row for row in simulate(config).report.requests}
    clock = FakeClock(now=0.0)
    backends = [BackendService(InstanceConfig(instance_id=i), clock=clock) for i in range(2)]

    async with TestServer(PredictorService().create_app()) as predictor, TestServer(
        backends[0].create_app(paced=False)
    ) as zero, TestServer(backends[1].create_app(paced=False)) as one:
        scheduler = SchedulerService(
            Policy(kind=PolicyKind.block),
            InstanceConfig(),
            backends={0: str(zero.make_url("/")), 1: str(one.make_url("/"))},
            predictor_urls=[str(predictor.make_url("/"))],
        )
        async with TestClient(TestServer(scheduler.create_app())) as client:
            chosen: Dict[int, int] = {}
            for request in requests:
                clock.now = request.arrival_time
                response = await client.post(
                    "/dispatch",
                    json={
                        "id": request.id,
                        "prompt_tokens": request.prompt_tokens,
                        "output_tokens": request.true_output_tokens,
                        "estimated_output_tokens": request.estimated_output_tokens,
                    },
                )
                payload = await response.json()
                assert payload["fallback"] is False
                chosen[request.id] = payload["instance_id"]

    clock.now = 1e6
    for backend in backends:
        backend.advance(backend.now())
    served = {
        request_id: tracked
        for backend in backends
        for request_id, tracked in backend.requests.items()
    }

    assert len(served) == len(requests) == 100
    for request_id, row in in_process.items():
        assert chosen[request_id] == row.instance_id
        assert served[request_id].e2e_latency == pytest.approx(row.e2e_s, abs=0.01)
        assert served[request_id].ttft == pytest.approx(row.ttft_s, abs=0.01)


@pytest.mark.parametrize("role", list(Role))
def test_build_app_routes_each_role(role: Role) -> None:
    config = parse_config({"workload": {"seed": 1}})

    app = build_app(role, config)

    assert {resource.canonical for resource in app.router.resources()} == ROUTES[role]
