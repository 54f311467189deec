"""
Networked service mode

Three roles share one JSON schema: a backend serves GET /status, POST /generate and
GET /requests/{id} over a paced simulated clock; a predictor serves POST /predict; a scheduler
serves POST /select (decision only) and POST /dispatch (decision plus forwarding). Every
response carries its handling time in the X-Service-Time header.
"""
import asyncio
import json
import logging
import time
from enum import Enum
from typing import AsyncIterator, Awaitable, Callable, Dict, List, Mapping, Optional, Sequence

import aiohttp
from aiohttp import web
from pydantic import BaseModel, Field, ValidationError

from blocksim.backend import InstanceState
from blocksim.core import InstanceConfig, InstanceSnapshot, Request, RequestState, Seconds
from blocksim.errors import (
    EmptyPlan,
    NoInstances,
    PredictionFailure,
    PredictorUnavailable,
    RequestTooLarge,
)
from blocksim.harness.config import ExperimentConfig
from blocksim.predictor import (
    Candidate,
    LatencyCache,
    PredictionRequest,
    PredictionResult,
    predict,
)
from blocksim.scheduler import Decision, Dispatcher, Policy, QpmTracker, record_dispatch
from blocksim.utils import error_field, model_to_primitive

logger = logging.getLogger(__name__)

SERVICE_TIME_HEADER = "X-Service-Time"


class Role(str, Enum):
    backend = "backend"
    predictor = "predictor"
    scheduler = "scheduler"


class ErrorCode(str, Enum):
    bad_schema = "bad-schema"
    instance_unknown = "instance-unknown"
    request_unknown = "request-unknown"
    predictor_timeout = "predictor-timeout"
    prediction_failed = "prediction-failed"


class ServiceError(Exception):
    def __init__(self, code: ErrorCode, status: int, message: str) -> None:
        self.code = code
        self.status = status
        super().__init__(message)


def error_response(code: ErrorCode, status: int, message: str) -> web.Response:
    return web.json_response({"code": code.value, "message": message}, status=status)


@web.middleware
async def service_middleware(
    request: web.Request, handler: Callable[[web.Request], Awaitable[web.StreamResponse]]
) -> web.StreamResponse:
    """Map errors to coded JSON bodies and stamp the service time"""
    started = time.perf_counter()
    response: web.StreamResponse
    try:
        response = await handler(request)
    except ValidationError as exc:
        response = error_response(ErrorCode.bad_schema, 400, f"{error_field(exc)}: {exc}")
    except json.JSONDecodeError as exc:
        response = error_response(ErrorCode.bad_schema, 400, f"body is not JSON: {exc.msg}")
    except ServiceError as exc:
        response = error_response(exc.code, exc.status, str(exc))
    except PredictionFailure as exc:
        response = error_response(ErrorCode.prediction_failed, 422, str(exc))
    except PredictorUnavailable as exc:
        response = error_response(ErrorCode.predictor_timeout, 504, str(exc))
    except NoInstances as exc:
        response = error_response(ErrorCode.instance_unknown, 404, str(exc))

    response.headers[SERVICE_TIME_HEADER] = f"{time.perf_counter() - started:.6f}"
    return response


def make_app() -> web.Application:
    return web.Application(middlewares=[service_middleware])


class GenerateRequest(BaseModel):
    id: int
    prompt_tokens: int = Field(..., ge=1)
    output_tokens: int = Field(..., ge=1)
    estimated_output_tokens: Optional[int] = Field(None, ge=1)

    @property
    def estimate(self) -> int:
        return self.estimated_output_tokens or self.output_tokens

    def candidate(self) -> Candidate:
        return Candidate(prompt_tokens=self.prompt_tokens, estimated_output_tokens=self.estimate)


# ==============
# BACKEND
# ==============


class BackendService:
    """
    One simulated instance paced against wall time

    The simulated clock is the wall time elapsed since start. Steps are begun eagerly and
    completed once the clock passes their end; a late tick catches up step by step, so the
    simulated timeline does not depend on the tick length.
    """

    def __init__(
        self,
        config: InstanceConfig,
        tick_s: Seconds = 0.01,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.state = InstanceState(config)
        self.tick_s = tick_s
        self.clock = clock
        self.started = clock()
        self.tracker = QpmTracker()
        self.requests: Dict[int, Request] = {}

    def now(self) -> Seconds:
        return self.clock() - self.started

    def advance(self, now: Seconds) -> None:
        """Complete every step ending by {now} and begin the next ones"""
        while True:
            if self.state.is_busy:
                end = self.state.busy_until
                assert end is not None
                if end > now:
                    return
                self.state.complete_step()
                start = end
            else:
                start = now
            try:
                self.state.begin_step(start)
            except EmptyPlan:
                return

    def snapshot(self) -> InstanceSnapshot:
        now = self.now()
        self.advance(now)
        return self.state.snapshot(now, self.tracker.qpm(self.state.instance_id, now))

    def generate(self, body: GenerateRequest) -> Request:
        """:raise ServiceError on a duplicate or oversized request"""
        if body.id in self.requests:
            raise ServiceError(ErrorCode.bad_schema, 400, f"request {body.id} already exists")

        now = self.now()
        self.advance(now)
        request = Request(
            id=body.id,
            prompt_tokens=body.prompt_tokens,
            true_output_tokens=body.output_tokens,
            estimated_output_tokens=body.estimate,
            arrival_time=now,
            dispatch_time=now,
            state=RequestState.dispatched,
        )
        try:
            self.state.admit(request)
        except RequestTooLarge as exc:
            raise ServiceError(ErrorCode.bad_schema, 400, str(exc)) from exc
        self.requests[request.id] = request
        record_dispatch(self.tracker, self.state.instance_id, now)
        self.advance(now)
        return request

    async def handle_status(self, request: web.Request) -> web.Response:
        return web.json_response(model_to_primitive(self.snapshot()))

    async def handle_generate(self, request: web.Request) -> web.Response:
        body = GenerateRequest.parse_obj(await request.json())
        accepted = self.generate(body)
        return web.json_response(
            {"request_id": accepted.id, "instance_id": self.state.instance_id}
        )

    async def handle_request(self, request: web.Request) -> web.Response:
        request_id = int(request.match_info["request_id"])
        tracked = self.requests.get(request_id)
        if tracked is None:
            raise ServiceError(ErrorCode.request_unknown, 404, f"request {request_id} unknown")
        self.advance(self.now())
        return web.json_response(
            {
                "id": tracked.id,
                "state": tracked.state.value,
                "decoded_tokens": tracked.decoded_tokens,
                "preemptions": tracked.preemptions,
                "ttft_s": tracked.ttft,
                "e2e_s": tracked.e2e_latency,
            }
        )

    async def _pace(self, app: web.Application) -> AsyncIterator[None]:
        async def tick() -> None:
            while True:
                await asyncio.sleep(self.tick_s)
                self.advance(self.now())

        task = asyncio.ensure_future(tick())
        yield
        task.cancel()
        try:
            await task
        except asyncio.CancelledError:
            pass

    def create_app(self, paced: bool = True) -> web.Application:
        app = make_app()
        app.router.add_get("/status", self.handle_status)
        app.router.add_post("/generate", self.handle_generate)
        app.router.add_get("/requests/{request_id}", self.handle_request)
        if paced:
            app.cleanup_ctx.append(self._pace)
        return app


# ==============
# PREDICTOR
# ==============

# Cache counters differ between identical calls, so they stay off the wire
_WIRE_EXCLUDE = ["cache_hits", "cache_misses"]


class PredictorService:
    """Stateless predict endpoint; replicas share nothing but the schema"""

    def __init__(self, cache: Optional[LatencyCache] = None) -> None:
        self.cache = cache or LatencyCache()

    async def handle_predict(self, request: web.Request) -> web.Response:
        body = PredictionRequest.parse_obj(await request.json())
        result = predict(body, self.cache)
        return web.json_response(model_to_primitive(result, exclude=_WIRE_EXCLUDE))

    def create_app(self) -> web.Application:
        app = make_app()
        app.router.add_post("/predict", self.handle_predict)
        return app


class HttpPredictor:
    """
    Predict API client spreading instances over predictor replicas

    :raise PredictorUnavailable on timeouts, connection errors and unexpected statuses
    :raise PredictionFailure when a replica reports a failed simulation
    """

    def __init__(
        self, session: aiohttp.ClientSession, urls: Sequence[str], timeout_s: Seconds = 5.0
    ) -> None:
        if not urls:
            raise ValueError("at least one predictor url is required")
        self.session = session
        self.urls = list(urls)
        self.timeout = aiohttp.ClientTimeout(total=timeout_s)

    async def predict(
        self, snapshot: InstanceSnapshot, config: InstanceConfig, candidate: Candidate
    ) -> PredictionResult:
        url = self.urls[snapshot.instance_id % len(self.urls)].rstrip("/") + "/predict"
        body = model_to_primitive(
            PredictionRequest.construct(
                snapshot=snapshot, candidate=candidate, instance_config=config
            )
        )
        try:
            async with self.session.post(url, json=body, timeout=self.timeout) as response:
                payload = await response.json()
                status = response.status
        except (asyncio.TimeoutError, aiohttp.ClientError) as exc:
            raise PredictorUnavailable(f"{url}: {exc!r}") from exc

        if status == 422:
            raise PredictionFailure(snapshot.instance_id, payload.get("message", ""))
        if status != 200:
            raise PredictorUnavailable(f"{url} answered {status}: {payload}")
        return PredictionResult.parse_obj(payload)

    async def predict_across(
        self,
        snapshots: Sequence[InstanceSnapshot],
        configs: Mapping[int, InstanceConfig],
        candidate: Candidate,
    ) -> Dict[int, PredictionResult]:
        results = await asyncio.gather(
            *(
                self.predict(snapshot, configs[snapshot.instance_id], candidate)
                for snapshot in snapshots
            )
        )
        return {snapshot.instance_id: result for snapshot, result in zip(snapshots, results)}


# ==============
# SCHEDULER
# ==============


class SelectRequest(BaseModel):
    request: GenerateRequest
    snapshots: List[InstanceSnapshot]


class SchedulerService:
    """
    Global scheduler replica

    Instances without an explicit config get the cluster template with their id.
    """

    def __init__(
        self,
        policy: Policy,
        template: InstanceConfig,
        backends: Optional[Mapping[int, str]] = None,
        predictor_urls: Sequence[str] = (),
        timeout_s: Seconds = 5.0,
    ) -> None:
        self.template = template
        self.backends = dict(backends or {})
        self.predictor_urls = list(predictor_urls)
        self.timeout_s = timeout_s
        self.configs: Dict[int, InstanceConfig] = {}
        self.dispatcher = Dispatcher(policy, self.configs)
        self.session: Optional[aiohttp.ClientSession] = None
        self.predictor: Optional[HttpPredictor] = None

    async def select(
        self, body: GenerateRequest, snapshots: Sequence[InstanceSnapshot]
    ) -> Decision:
        if not snapshots:
            raise NoInstances("no instance to dispatch to")
        for snapshot in snapshots:
            if snapshot.instance_id not in self.configs:
                self.configs[snapshot.instance_id] = self.template.copy(
                    update={"instance_id": snapshot.instance_id}
                )

        predictions = None
        if self.dispatcher.needs_predictions:
            try:
                if self.predictor is None:
                    raise PredictorUnavailable("no predictor configured")
                predictions = await self.predictor.predict_across(
                    snapshots, self.configs, body.candidate()
                )
            except (PredictorUnavailable, PredictionFailure) as exc:
                return self.dispatcher.fall_back(body.id, snapshots, exc)
        return self.dispatcher.choose(snapshots, predictions)

    async def handle_select(self, request: web.Request) -> web.Response:
        body = SelectRequest.parse_obj(await request.json())
        decision = await self.select(body.request, body.snapshots)
        return web.json_response(decision_to_primitive(decision))

    async def handle_dispatch(self, request: web.Request) -> web.Response:
        body = GenerateRequest.parse_obj(await request.json())
        snapshots = await self._fetch_snapshots()
        decision = await self.select(body, snapshots)
        await self._forward(decision.instance_id, body)
        return web.json_response(decision_to_primitive(decision))

    async def _fetch_snapshots(self) -> List[InstanceSnapshot]:
        async def fetch(instance_id: int, url: str) -> InstanceSnapshot:
            assert self.session is not None
            async with self.session.get(url.rstrip("/") + "/status", timeout=self._timeout) as r:
                r.raise_for_status()
                return InstanceSnapshot.parse_obj(await r.json())

        return list(
            await asyncio.gather(*(fetch(i, url) for i, url in sorted(self.backends.items())))
        )

    async def _forward(self, instance_id: int, body: GenerateRequest) -> None:
        url = self.backends.get(instance_id)
        if url is None:
            raise ServiceError(ErrorCode.instance_unknown, 404, f"instance {instance_id} unknown")
        assert self.session is not None
        async with self.session.post(
            url.rstrip("/") + "/generate", json=model_to_primitive(body), timeout=self._timeout
        ) as response:
            response.raise_for_status()

    @property
    def _timeout(self) -> aiohttp.ClientTimeout:
        return aiohttp.ClientTimeout(total=self.timeout_s)

    async def _client_session(self, app: web.Application) -> AsyncIterator[None]:
        self.session = aiohttp.ClientSession()
        if self.predictor_urls:
            self.predictor = HttpPredictor(self.session, self.predictor_urls, self.timeout_s)
        yield
        await self.session.close()

    def create_app(self) -> web.Application:
        app = make_app()
        app.router.add_post("/select", self.handle_select)
        app.router.add_post("/dispatch", self.handle_dispatch)
        app.cleanup_ctx.append(self._client_session)
        return app


def decision_to_primitive(decision: Decision) -> Dict:
    return {
        "instance_id": decision.instance_id,
        "fallback": decision.fallback,
        "predictions": {
            str(instance_id): result.metrics
            for instance_id, result in sorted((decision.predictions or {}).items())
        },
    }


# ==============
# ENTRY POINT
# ==============


def build_app(role: Role, config: ExperimentConfig) -> web.Application:
    service = config.service
    if role is Role.backend:
        instance = config.cluster.instance_config(service.instance_id)
        return BackendService(instance, tick_s=service.tick_s).create_app()
    if role is Role.predictor:
        return PredictorService(LatencyCache(config.scheduler.context_bucket)).create_app()
    return SchedulerService(
        config.scheduler.to_policy(),
        config.cluster.instance,
        backends=service.backends,
        predictor_urls=service.predictors,
        timeout_s=service.timeout_s,
    ).create_app()


def serve(role: Role, config: ExperimentConfig) -> None:
    """Run one service role until interrupted"""
    app = build_app(role, config)
    logger.info("serving %s on %s:%d", role.value, config.service.host, config.service.port)
    web.run_app(app, host=config.service.host, port=config.service.port, print=None)


__all__ = [
    "BackendService",
    "HttpPredictor",
    "PredictorService",
    "Role",
    "SchedulerService",
    "serve",
]
