"""HTTP service recommending denoising steps per prompt.

``create_app`` builds the recommender: ``GET /healthz``, ``POST /v1/recommend``
and ``POST /v1/generate``, which forwards a txt2img request with the
recommended step count to an external diffusion backend. ``create_mock_backend``
is a stand-in backend that sleeps in proportion to the requested steps.

Backend contract (field names can be remapped with ``ServiceConfig.backend_fields``)::

    POST <backend_url>  {"prompt": str, "steps": int, "seed": int, "width": int, "height": int}
    200                 {"image": <base64 PNG>, "parameters": {...}}
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import io
import json
import os
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import httpx
import uvicorn
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from . import _tsv
from .classifier import LinearStepClassifier, StepPredictor
from .report import LinearTimeModel, TimingSample, fit_time_model

__all__ = [
    "ServiceConfig",
    "Recommendation",
    "RecommendError",
    "recommend",
    "create_app",
    "batch_recommend",
    "BatchSummary",
    "tally_recommendations",
    "create_mock_backend",
    "MockTiming",
    "BackgroundServer",
    "parse_listen",
    "ENV_MODEL",
    "ENV_BACKEND_URL",
    "ENV_LISTEN",
]

ENV_MODEL = "STEPSAVER_MODEL"
ENV_BACKEND_URL = "STEPSAVER_BACKEND_URL"
ENV_LISTEN = "STEPSAVER_LISTEN"

DEFAULT_BACKEND_FIELDS = {"prompt": "prompt", "steps": "steps", "seed": "seed", "width": "width", "height": "height"}
TRANSIENT_STATUS = frozenset({502, 503, 504})


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:8000"
    model_path: str | None = None
    backend_url: str | None = None
    backend_timeout_ms: int = 120_000
    max_prompt_bytes: int = 2048
    default_steps: int = 50
    max_in_flight: int = 8
    backend_retries: int = 1
    backend_fields: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_BACKEND_FIELDS))
    default_seed: int = 0
    default_size: int = 512

    def __post_init__(self):
        if self.backend_timeout_ms <= 0:
            raise ValueError("backend_timeout_ms must be positive")
        if self.max_prompt_bytes < 1:
            raise ValueError("max_prompt_bytes must be positive")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        missing = set(DEFAULT_BACKEND_FIELDS) - set(self.backend_fields)
        if missing:
            raise ValueError(f"backend_fields lacks mappings for {sorted(missing)}")

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **kwargs) -> "ServiceConfig":
        """Defaults overridden by ``STEPSAVER_*`` variables, overridden by explicit kwargs."""
        env = os.environ if env is None else env
        values = {}
        for key, var in (("model_path", ENV_MODEL), ("backend_url", ENV_BACKEND_URL), ("listen", ENV_LISTEN)):
            if env.get(var):
                values[key] = env[var]
        values.update({k: v for k, v in kwargs.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class Recommendation:
    prompt: str
    steps: int
    probability: float
    model_version: str
    latency_micros: int


class RecommendError(ValueError):
    def __init__(self, status: int, error: str, detail: str):
        super().__init__(detail)
        self.status = status
        self.error = error


def recommend(predictor: StepPredictor, prompt: str, max_prompt_bytes: int = 2048) -> Recommendation:
    if not isinstance(prompt, str) or not prompt.strip():
        raise RecommendError(422, "empty_prompt", "prompt must be a non-empty string")
    size = len(prompt.encode("utf-8"))
    if size > max_prompt_bytes:
        raise RecommendError(413, "prompt_too_large", f"prompt is {size} bytes; the limit is {max_prompt_bytes}")
    start = time.perf_counter_ns()
    steps, prob = predictor.predict(prompt)
    elapsed = (time.perf_counter_ns() - start) // 1000
    return Recommendation(prompt, int(steps), float(prob), predictor.version, int(elapsed))


class RecommendRequest(BaseModel):
    prompt: str


class GenerateRequest(BaseModel):
    prompt: str
    overrides: dict[str, Any] | None = None


def _error(status: int, error: str, detail: str, **extra) -> JSONResponse:
    return JSONResponse({"error": error, "detail": detail, **extra}, status_code=status)


def create_app(config: ServiceConfig, predictor: StepPredictor | None = None) -> FastAPI:
    """Build the recommender app.

    Without an explicit ``predictor`` the model is loaded from
    ``config.model_path``; a missing file raises here, so the service never
    starts without a model.
    """
    if predictor is None:
        if not config.model_path:
            raise FileNotFoundError("no model path configured")
        if not Path(config.model_path).is_file():
            raise FileNotFoundError(f"model file not found: {config.model_path}")
        predictor = LinearStepClassifier.load(config.model_path)
    if config.default_steps not in predictor.classes:
        raise ValueError(f"default_steps {config.default_steps} is not a model class {predictor.classes}")

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        timeout = httpx.Timeout(config.backend_timeout_ms / 1000)
        limits = httpx.Limits(max_connections=config.max_in_flight)
        async with httpx.AsyncClient(timeout=timeout, limits=limits) as client:
            app.state.backend = client
            app.state.in_flight = asyncio.Semaphore(config.max_in_flight)
            yield

    app = FastAPI(title="denoise step recommender", lifespan=lifespan)
    app.state.predictor = predictor
    app.state.config = config

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        return _error(422, "invalid_request", str(exc.errors()[:3]))

    def _recommend(prompt: str) -> Recommendation:
        pred = app.state.predictor
        if pred is None:
            raise RecommendError(503, "model_not_loaded", "no model is loaded")
        return recommend(pred, prompt, config.max_prompt_bytes)

    @app.get("/healthz")
    async def healthz():
        pred = app.state.predictor
        if pred is None:
            return _error(503, "model_not_loaded", "no model is loaded")
        return {"status": "ok", "model_version": pred.version, "classes": list(pred.classes),
                "default_steps": config.default_steps, "backend_configured": bool(config.backend_url)}

    @app.post("/v1/recommend")
    async def recommend_endpoint(req: RecommendRequest):
        try:
            return asdict(_recommend(req.prompt))
        except RecommendError as exc:
            return _error(exc.status, exc.error, str(exc))

    @app.post("/v1/generate")
    async def generate(req: GenerateRequest):
        try:
            rec = _recommend(req.prompt)
        except RecommendError as exc:
            return _error(exc.status, exc.error, str(exc))
        rec_doc = asdict(rec)
        if not config.backend_url:
            return _error(503, "backend_not_configured", "no backend URL configured", recommendation=rec_doc)

        overrides = dict(req.overrides or {})
        params = {"prompt": req.prompt, "steps": rec.steps, "seed": config.default_seed,
                  "width": config.default_size, "height": config.default_size}
        for key in list(overrides):
            if key in params and key != "prompt":
                params[key] = overrides.pop(key)
        try:
            steps_used = int(params["steps"])
            if steps_used < 1:
                raise ValueError
        except (TypeError, ValueError):
            return _error(422, "invalid_override", f"steps override must be a positive integer, got {params['steps']!r}")
        params["steps"] = steps_used
        fields = config.backend_fields
        body = {fields[k]: v for k, v in params.items()}
        body.update(overrides)

        client: httpx.AsyncClient = app.state.backend
        started = time.perf_counter_ns()
        last_exc: Exception | None = None
        resp = None
        async with app.state.in_flight:
            for _ in range(1 + config.backend_retries):
                try:
                    resp = await client.post(config.backend_url, json=body)
                except httpx.TransportError as exc:
                    last_exc, resp = exc, None
                    continue
                if resp.status_code not in TRANSIENT_STATUS:
                    break
        backend_latency = (time.perf_counter_ns() - started) // 1000

        if resp is None:
            status = 504 if isinstance(last_exc, httpx.TimeoutException) else 502
            return _error(status, "backend_unavailable", f"{type(last_exc).__name__}: {last_exc}",
                          recommendation=rec_doc, backend_latency_micros=backend_latency)
        payload = _json_or_text(resp)
        if 400 <= resp.status_code < 500:
            return _error(resp.status_code, "backend_rejected", f"backend returned {resp.status_code}",
                          backend_error=payload, recommendation=rec_doc)
        if resp.status_code >= 500:
            return _error(502, "backend_error", f"backend returned {resp.status_code}",
                          backend_error=payload, recommendation=rec_doc, backend_latency_micros=backend_latency)
        image = payload.get("image") if isinstance(payload, dict) else None
        return {
            "image": image,
            "steps_used": steps_used,
            "recommendation": rec_doc,
            "recommend_latency_micros": rec.latency_micros,
            "backend_latency_micros": backend_latency,
            "backend_parameters": payload.get("parameters") if isinstance(payload, dict) else None,
        }

    return app


def _json_or_text(resp: httpx.Response):
    try:
        return resp.json()
    except (json.JSONDecodeError, UnicodeDecodeError):
        return resp.text


@dataclass
class BatchSummary:
    lines: int = 0
    errors: int = 0
    counts: dict[int, int] = field(default_factory=dict)


def batch_recommend(predictor: StepPredictor, source: str | Path, dest: str | Path,
                    max_prompt_bytes: int = 2048) -> BatchSummary:
    """Recommend steps for one raw prompt per input line.

    Writes ``prompt TAB steps TAB probability`` per line, in input order, with
    the prompt escaped. A line that cannot be used becomes
    ``#error TAB <line number> TAB <cause>`` and processing continues.
    """
    summary = BatchSummary()
    with open(source, "rb") as src, open(dest, "w", encoding="utf-8") as out:
        for lineno, raw in enumerate(src, 1):
            summary.lines += 1
            raw = raw.rstrip(b"\n").rstrip(b"\r")
            try:
                prompt = raw.decode("utf-8")
                if not prompt.strip():
                    raise ValueError("empty prompt")
                if len(raw) > max_prompt_bytes:
                    raise ValueError(f"prompt exceeds {max_prompt_bytes} bytes")
                steps, prob = predictor.predict(prompt)
            except (UnicodeDecodeError, ValueError) as exc:
                summary.errors += 1
                out.write(f"#error\t{lineno}\t{_tsv.escape(str(exc))}\n")
                continue
            summary.counts[steps] = summary.counts.get(steps, 0) + 1
            out.write(f"{_tsv.escape(prompt)}\t{steps}\t{prob!r}\n")
    summary.counts = dict(sorted(summary.counts.items()))
    return summary


def tally_recommendations(path: str | Path) -> dict[int, int]:
    """Per-step prompt counts of a ``batch_recommend`` output file, skipping error records."""
    counts: dict[int, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#error\t"):
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 TAB-separated fields")
            steps = int(fields[1])
            counts[steps] = counts.get(steps, 0) + 1
    return dict(sorted(counts.items()))


# Mock backend ---------------------------------------------------------------

REFERENCE_STEP_TIMES = {30: 2.25, 50: 3.72, 100: 7.36}


@dataclass
class MockTiming:
    """Seconds per image by step count; unlisted step counts use a linear fit."""

    per_step: dict[int, float] = field(default_factory=lambda: dict(REFERENCE_STEP_TIMES))
    scale: float = 1.0

    def __post_init__(self):
        self._fit: LinearTimeModel | None = None
        if len(self.per_step) >= 2:
            self._fit = fit_time_model([TimingSample(s, t) for s, t in self.per_step.items()])

    def seconds(self, steps: int) -> float:
        if steps in self.per_step:
            base = self.per_step[steps]
        elif self._fit is not None:
            base = max(self._fit(steps), 0.0)
        else:
            raise ValueError(f"no timing for {steps} steps")
        return base * self.scale


class Txt2ImgRequest(BaseModel):
    model_config = ConfigDict(extra="allow")

    prompt: str
    steps: int = Field(ge=1)
    seed: int = 0
    width: int = Field(default=64, ge=1, le=4096)
    height: int = Field(default=64, ge=1, le=4096)


def placeholder_png(params: Mapping[str, Any], size: int = 8) -> bytes:
    """Deterministic tiny PNG derived from the request parameters."""
    from PIL import Image

    digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode("utf-8")).digest()
    pixels = (digest * (3 * size * size // len(digest) + 1))[: 3 * size * size]
    buf = io.BytesIO()
    Image.frombytes("RGB", (size, size), pixels).save(buf, format="PNG")
    return buf.getvalue()


def create_mock_backend(timing: MockTiming | None = None, fail_first: int = 0, fail_status: int = 503) -> FastAPI:
    """A txt2img stand-in: sleeps ``timing.seconds(steps)`` and echoes its input.

    The first ``fail_first`` requests answer ``fail_status`` for fault injection.
    """
    timing = timing or MockTiming()
    app = FastAPI(title="mock txt2img backend")
    app.state.requests = []
    app.state.failures_left = fail_first

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "scale": timing.scale}

    @app.post("/txt2img")
    async def txt2img(req: Txt2ImgRequest):
        params = req.model_dump()
        app.state.requests.append(params)
        if app.state.failures_left > 0:
            app.state.failures_left -= 1
            return JSONResponse({"error": "injected failure"}, status_code=fail_status)
        delay = timing.seconds(req.steps)
        await asyncio.sleep(delay)
        image = base64.b64encode(placeholder_png(params)).decode("ascii")
        return {"image": image, "parameters": params, "sleep_seconds": delay}

    return app


# Running apps ------------------------------------------------------------------

def parse_listen(listen: str) -> tuple[str, int]:
    host, sep, port = listen.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"listen address must be host:port, got {listen!r}")
    return host or "127.0.0.1", int(port)


class BackgroundServer:
    """Run an ASGI app with uvicorn on a daemon thread (port 0 picks a free port)."""

    def __init__(self, app, host: str = "127.0.0.1", port: int = 0):
        self.config = uvicorn.Config(app, host=host, port=port, log_level="warning", access_log=False)
        self.server = uvicorn.Server(self.config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    @property
    def url(self) -> str:
        sock = self.server.servers[0].sockets[0]
        host, port = sock.getsockname()[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "BackgroundServer":
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if not self.thread.is_alive() or time.monotonic() > deadline:
                raise RuntimeError("server failed to start")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)
