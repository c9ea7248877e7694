"""HTTP clients for the completion and reward wire protocols.

Generation goes through a text-completions endpoint so a beam can be resumed
mid-response: the chat template is applied client-side and the partial
response is appended to the prompt.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Sequence

import httpx

from ..core import EOS
from .base import (
    GenerationBackend,
    GenerationRequest,
    GenerationResult,
    ProtocolError,
    RetriableBackendError,
    RewardBackend,
)

log = logging.getLogger(__name__)

RESPONSE_MARKER = "\n\n### Response:\n"
DEFAULT_PROMPT_TEMPLATE = "{instruction}" + RESPONSE_MARKER


def build_prompt(instruction: str, prefix_tokens: Sequence[str], template: str = DEFAULT_PROMPT_TEMPLATE) -> str:
    return template.format(instruction=instruction) + "".join(prefix_tokens)


class _HTTPClient:
    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 0.25,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.base_url = base_url.rstrip("/")
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout, transport=transport)

    def _post(self, path: str, body: dict[str, Any], index: int | None = None) -> dict[str, Any]:
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(path, json=body)
            except httpx.TransportError as exc:
                last = exc
                log.debug("POST %s%s failed (attempt %d): %s", self.base_url, path, attempt + 1, exc)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = RuntimeError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProtocolError(f"POST {path} -> HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = json.loads(resp.content)
            except ValueError as exc:
                raise ProtocolError(f"POST {path}: reply is not JSON") from exc
            if not isinstance(data, dict):
                raise ProtocolError(f"POST {path}: reply is not a JSON object")
            return data
        raise RetriableBackendError(f"POST {self.base_url}{path} failed: {last}", index)

    def health(self) -> bool:
        try:
            return self.client.get("/health").status_code == 200
        except httpx.HTTPError:
            return False

    def close(self) -> None:
        self.client.close()


class HTTPGenerationBackend(_HTTPClient, GenerationBackend):
    """Client for ``POST /v1/completions``.

    A reply may carry an optional ``tokens`` list; otherwise the whole text is
    one segment, followed by the eos marker when ``finish_reason`` is ``stop``.
    """

    def __init__(self, base_url: str, *, prompt_template: str = DEFAULT_PROMPT_TEMPLATE, max_workers: int = 8, **kwargs):
        super().__init__(base_url, **kwargs)
        self.prompt_template = prompt_template
        self.max_workers = max_workers

    def _one(self, index: int, req: GenerationRequest) -> GenerationResult:
        body = {
            "prompt": build_prompt(req.instruction_text, req.prefix_tokens, self.prompt_template),
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "top_k": req.sampling_top_k,
            "seed": req.rng_substream,
        }
        data = self._post("/v1/completions", body, index)
        if "choices" in data and "text" not in data:
            choices = data.get("choices") or [{}]
            data = {**choices[0], **{k: v for k, v in data.items() if k == "tokens"}}
        text = data.get("text")
        reason = data.get("finish_reason")
        if not isinstance(text, str) or reason not in ("stop", "length"):
            raise ProtocolError(f"request {index}: malformed completion reply {data!r:.200}")
        finished = reason == "stop"
        tokens = data.get("tokens")
        if tokens is not None:
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise ProtocolError(f"request {index}: 'tokens' must be a list of strings")
            new_tokens = tuple(tokens)
            if finished and new_tokens[-1:] != (EOS,):
                new_tokens += (EOS,)
        else:
            new_tokens = ((text,) if text else ()) + ((EOS,) if finished else ())
        return GenerationResult(new_tokens, finished)

    def generate_batch(self, requests):
        if len(requests) == 1 or self.max_workers <= 1:
            return [self._one(i, r) for i, r in enumerate(requests)]
        with ThreadPoolExecutor(max_workers=min(self.max_workers, len(requests))) as pool:
            return list(pool.map(self._one, range(len(requests)), requests))

    def describe(self) -> str:
        return self.base_url


class HTTPRewardBackend(_HTTPClient, RewardBackend):
    """Client for ``POST /v1/score``. Non-finite scores are protocol errors."""

    def score(self, instruction, responses):
        data = self._post("/v1/score", {"instruction": instruction, "responses": list(responses)})
        scores = data.get("scores")
        if not isinstance(scores, list):
            raise ProtocolError(f"malformed score reply {data!r:.200}")
        return scores

    def describe(self) -> str:
        return self.base_url


def backends_from_env(env: dict[str, str] | None = None) -> tuple[HTTPGenerationBackend, HTTPRewardBackend]:
    env = os.environ if env is None else env
    gen_url = env.get("GENERATION_URL")
    rew_url = env.get("REWARD_URL")
    if not gen_url or not rew_url:
        raise RetriableBackendError("GENERATION_URL and REWARD_URL must both be set (or use a mock)")
    api_key = env.get("API_KEY") or None
    return HTTPGenerationBackend(gen_url, api_key=api_key), HTTPRewardBackend(rew_url, api_key=api_key)
