from __future__ import annotations

import logging
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Sequence

from ..core import EOS, CallCounts, Instruction

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Base class for generation/reward/mutation backend failures."""


class RetriableBackendError(BackendError):
    """Transport failure; the same request may succeed if retried."""

    def __init__(self, message: str, request_index: int | None = None):
        super().__init__(message if request_index is None else f"request {request_index}: {message}")
        self.request_index = request_index


class ProtocolError(BackendError):
    """A backend replied with something that violates the wire contract."""


class MutationError(BackendError):
    pass


class RewardDisciplineError(ValueError):
    """A non-seed instruction was about to be sent to the reward model."""


@dataclass(frozen=True)
class GenerationRequest:
    instruction_text: str
    prefix_tokens: tuple[str, ...] = ()
    max_tokens: int = 40
    temperature: float = 0.7
    sampling_top_k: int = 40
    rng_substream: int = 0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationResult:
    new_tokens: tuple[str, ...]
    finished: bool

    def __post_init__(self):
        if EOS in self.new_tokens[:-1]:
            raise ValueError("the eos marker may only terminate new_tokens")


@dataclass(frozen=True)
class RewardRequest:
    """Score request; can only be built from the run's seed instruction."""

    instruction_text: str
    response_texts: tuple[str, ...]

    @classmethod
    def for_seed(cls, seed: Instruction, responses: Sequence[str]) -> "RewardRequest":
        if not seed.is_seed:
            raise RewardDisciplineError(
                f"reward requests must use the seed instruction, got mutated {seed.id!r}"
            )
        return cls(seed.text, tuple(responses))


class GenerationBackend(ABC):
    @abstractmethod
    def generate_batch(self, requests: Sequence[GenerationRequest]) -> list[GenerationResult]:
        """Continue each request's prefix by up to ``max_tokens`` tokens."""

    def health(self) -> bool:
        return True

    def describe(self) -> str:
        return type(self).__name__


class RewardBackend(ABC):
    @abstractmethod
    def score(self, instruction: str, responses: Sequence[str]) -> list[float]:
        ...

    def health(self) -> bool:
        return True

    def describe(self) -> str:
        return type(self).__name__


class MutationBackend(ABC):
    @abstractmethod
    def propose(self, candidate_text: str, n: int) -> list[str]:
        """Up to ``n`` rewritten variants of ``candidate_text`` (may return fewer)."""

    def describe(self) -> str:
        return type(self).__name__


@dataclass
class Instrumented(GenerationBackend, RewardBackend):
    """Exact call accounting around a generation and/or reward backend.

    Counters are updated under a lock so concurrent batches tally correctly.
    ``reward_instructions`` logs the instruction text of every score batch.
    """

    generator: GenerationBackend | None = None
    reward: RewardBackend | None = None
    counts: CallCounts = field(default_factory=CallCounts)
    reward_instructions: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def generate_batch(self, requests):
        results = self.generator.generate_batch(requests)
        with self._lock:
            self.counts.generation_calls += len(requests)
            self.counts.generated_tokens += sum(len(r.new_tokens) for r in results)
        return results

    def score(self, instruction, responses):
        scores = self.reward.score(instruction, responses)
        with self._lock:
            self.counts.reward_calls += 1
            self.counts.reward_items += len(responses)
            self.reward_instructions.append(instruction)
        return scores

    def health(self) -> bool:
        return all(b.health() for b in (self.generator, self.reward) if b is not None)

    def snapshot(self) -> CallCounts:
        with self._lock:
            return CallCounts(**self.counts.to_dict())


def generate_batch(backend: GenerationBackend, requests: Sequence[GenerationRequest]) -> list[GenerationResult]:
    """Run a generation batch and check the reply against the request contract."""
    if not requests:
        raise ValueError("generate_batch needs at least one request")
    results = backend.generate_batch(list(requests))
    if len(results) != len(requests):
        raise ProtocolError(f"expected {len(requests)} results, got {len(results)}")
    for i, (req, res) in enumerate(zip(requests, results)):
        if len(res.new_tokens) > req.max_tokens + (1 if res.new_tokens[-1:] == (EOS,) else 0):
            raise ProtocolError(f"request {i}: {len(res.new_tokens)} tokens exceeds cap {req.max_tokens}")
    return results


def score_batch(backend: RewardBackend, seed_instruction: Instruction, responses: Sequence[str]) -> list[float]:
    """Score responses against the seed instruction; scores are positionally aligned."""
    if not responses:
        raise ValueError("score_batch needs at least one response")
    request = RewardRequest.for_seed(seed_instruction, responses)
    scores = backend.score(request.instruction_text, list(request.response_texts))
    if len(scores) != len(responses):
        raise ProtocolError(f"expected {len(responses)} scores, got {len(scores)}")
    out = []
    for i, s in enumerate(scores):
        try:
            value = float(s)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"score {i} is not a number: {s!r}") from exc
        if not math.isfinite(value):
            raise ProtocolError(f"score {i} is not finite: {s!r}")
        out.append(value)
    return out


def pad_mutations(texts: Sequence[str], candidate_text: str, n: int) -> tuple[list[str], bool]:
    """Truncate or pad proposals to exactly ``n``; padding repeats the candidate."""
    texts = [t for t in texts if t.strip()][:n]
    if not texts:
        raise MutationError("mutator returned no usable instructions")
    degraded = len(texts) < n
    if degraded:
        log.warning("mutator returned %d of %d instructions; padding with the candidate", len(texts), n)
        texts = texts + [candidate_text] * (n - len(texts))
    return texts, degraded


def mutate_with_status(
    backend: MutationBackend,
    candidate: Instruction,
    n: int,
    origin_cycle: int = 1,
) -> tuple[list[Instruction], bool]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if origin_cycle < 1:
        raise ValueError("mutations are created in cycles >= 1")
    texts, degraded = pad_mutations(backend.propose(candidate.text, n), candidate.text, n)
    instructions = [
        Instruction(id=f"mc{origin_cycle}-{j}", text=text, parent_id=candidate.id, origin_cycle=origin_cycle)
        for j, text in enumerate(texts)
    ]
    return instructions, degraded


def mutate(backend: MutationBackend, candidate: Instruction, n: int, origin_cycle: int = 1) -> list[Instruction]:
    return mutate_with_status(backend, candidate, n, origin_cycle)[0]
