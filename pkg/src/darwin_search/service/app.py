"""FastAPI app serving the generation and reward wire protocols from mock backends."""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass

import uvicorn
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..backends.base import GenerationRequest, ProtocolError, score_batch
from ..backends.http import RESPONSE_MARKER
from ..backends.mocks import mock_suite
from ..backends.prompts import candidate_from_prompt, format_numbered, requested_count
from ..core import Instruction, response_text
from .schemas import CompletionRequest, CompletionResponse, Health, ScoreRequest, ScoreResponse


def create_app(mock: str = "count-A") -> FastAPI:
    suite = mock_suite(mock)
    app = FastAPI(title="darwin-search mock backends", version="1")
    app.state.suite = suite

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc.errors()[:3])})

    @app.exception_handler(ProtocolError)
    async def _protocol(request: Request, exc: ProtocolError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=Health)
    def health():
        return Health(mock=suite.name)

    @app.post("/v1/completions", response_model=CompletionResponse, response_model_exclude_none=True)
    def completions(body: CompletionRequest):
        instruction, _, prefix = body.prompt.partition(RESPONSE_MARKER)
        candidate = candidate_from_prompt(instruction)
        if candidate is not None:
            n = requested_count(instruction) or 5
            reply = format_numbered(suite.mutator.propose(candidate, n))
            return CompletionResponse(text=reply, finish_reason="stop")
        request = GenerationRequest(
            instruction_text=instruction,
            prefix_tokens=tuple(prefix),
            max_tokens=body.max_tokens,
            temperature=body.temperature,
            sampling_top_k=body.top_k,
            rng_substream=body.seed,
        )
        (result,) = suite.generator.generate_batch([request])
        return CompletionResponse(
            text=response_text(result.new_tokens),
            finish_reason="stop" if result.finished else "length",
            tokens=list(result.new_tokens),
        )

    @app.post("/v1/score", response_model=ScoreResponse)
    def score(body: ScoreRequest):
        seed = Instruction.seed(body.instruction)
        return ScoreResponse(scores=score_batch(suite.reward, seed, body.responses))

    return app


@dataclass
class MockServerHandle:
    server: uvicorn.Server
    thread: threading.Thread
    host: str
    port: int

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self, timeout: float = 5.0) -> None:
        self.server.should_exit = True
        self.thread.join(timeout)

    def __enter__(self) -> "MockServerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_mock(port: int = 0, mock: str = "count-A", host: str = "127.0.0.1", timeout: float = 10.0) -> MockServerHandle:
    """Start the mock service on a background thread.

    ``port=0`` picks a free port. Raises ``OSError`` if the port is taken.
    """
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind((host, port))
    sock.listen(128)
    bound_port = sock.getsockname()[1]
    config = uvicorn.Config(create_app(mock), log_level="warning", lifespan="off")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True)
    thread.start()
    deadline = time.monotonic() + timeout
    while not server.started:
        if not thread.is_alive() or time.monotonic() > deadline:
            sock.close()
            raise RuntimeError("mock server failed to start")
        time.sleep(0.01)
    return MockServerHandle(server, thread, host, bound_port)

