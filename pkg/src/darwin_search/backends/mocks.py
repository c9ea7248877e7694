"""Deterministic in-process backends whose behaviour is exactly computable.

Every mock generator is a pure function of ``(instruction_text, prefix_tokens,
max_tokens, rng_substream)``, so identical requests give identical results in
any process.  Mock tokens are single characters; eos is the ``EOS`` marker.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..core import EOS
from .base import (
    GenerationBackend,
    GenerationRequest,
    GenerationResult,
    MutationBackend,
    RewardBackend,
)


class _MockGenerator(GenerationBackend):
    def __init__(self):
        self._lock = threading.Lock()
        self.requests: list[GenerationRequest] = []

    def generate_batch(self, requests: Sequence[GenerationRequest]) -> list[GenerationResult]:
        results = [self.generate_one(req) for req in requests]
        with self._lock:
            self.requests.extend(requests)
        return results

    def generate_one(self, request: GenerationRequest) -> GenerationResult:
        raise NotImplementedError


class RuleGenerator(_MockGenerator):
    """Emits ``rule(instruction_text)`` every step and never finishes."""

    def __init__(self, rule: Callable[[str], str]):
        super().__init__()
        self.rule = rule

    def generate_one(self, request):
        return GenerationResult((self.rule(request.instruction_text),) * request.max_tokens, False)


def bang_rule(instruction_text: str) -> str:
    return "A" if "!" in instruction_text else "B"


class BiasedCoinGenerator(_MockGenerator):
    """Categorical sampler over a small vocabulary.

    Token weights come from a hash of the instruction text, so different
    instructions steer generation differently; draws come from the request's
    rng_substream.  Temperature sharpens/flattens the weights and
    ``sampling_top_k`` truncates to the most likely tokens, as in a real sampler.
    """

    def __init__(self, vocab: Sequence[str] = ("A", "B", "C"), eos_prob: float = 0.02):
        super().__init__()
        if not 0.0 <= eos_prob < 1.0:
            raise ValueError("eos_prob must lie in [0, 1)")
        self.vocab = tuple(vocab)
        self.eos_prob = eos_prob

    def token_probs(self, instruction_text: str, temperature: float = 1.0, top_k: int | None = None) -> np.ndarray:
        digest = hashlib.sha256(instruction_text.encode("utf-8")).digest()
        raw = np.array([1 + digest[i] for i in range(len(self.vocab))], dtype=float)
        logits = np.log(raw / raw.sum()) / temperature
        if top_k is not None and top_k < len(self.vocab):
            cutoff = np.sort(logits)[-top_k]
            logits = np.where(logits >= cutoff, logits, -np.inf)
        probs = np.exp(logits - logits.max())
        return probs / probs.sum()

    def generate_one(self, request):
        rng = np.random.default_rng(request.rng_substream)
        probs = self.token_probs(request.instruction_text, request.temperature, request.sampling_top_k)
        out: list[str] = []
        for _ in range(request.max_tokens):
            if rng.random() < self.eos_prob:
                out.append(EOS)
                return GenerationResult(tuple(out), True)
            out.append(self.vocab[rng.choice(len(self.vocab), p=probs)])
        return GenerationResult(tuple(out), False)


class PrefixMonotoneGenerator(_MockGenerator):
    """Two-token urn: P(next = high) = (count(high) + 1) / (len + 2).

    The more high-reward tokens a prefix already holds, the likelier the next one
    is, so a beam's current reward stochastically dominates its future reward.
    Instruction text, temperature and top-k are ignored.
    """

    def __init__(self, high: str = "A", low: str = "B"):
        super().__init__()
        self.high = high
        self.low = low

    def generate_one(self, request):
        rng = np.random.default_rng(request.rng_substream)
        count = sum(1 for t in request.prefix_tokens if t == self.high)
        length = len(request.prefix_tokens)
        out = []
        for _ in range(request.max_tokens):
            if rng.random() < (count + 1) / (length + 2):
                out.append(self.high)
                count += 1
            else:
                out.append(self.low)
            length += 1
        return GenerationResult(tuple(out), False)


class ScriptedGenerator(_MockGenerator):
    """Replays fixed token sequences keyed by instruction text.

    Each call returns the next ``max_tokens`` tokens after the prefix; reaching
    the end of the script finishes the beam with eos.
    """

    def __init__(self, scripts: Mapping[str, Sequence[str]]):
        super().__init__()
        self.scripts = {k: tuple(v) for k, v in scripts.items()}

    def generate_one(self, request):
        script = self.scripts[request.instruction_text]
        start = len(request.prefix_tokens)
        chunk = script[start : start + request.max_tokens]
        if len(chunk) < request.max_tokens:
            return GenerationResult(chunk + (EOS,), True)
        return GenerationResult(chunk, False)


# --------------------------------------------------------------------------- rewards


class _MockReward(RewardBackend):
    def __init__(self):
        self._lock = threading.Lock()
        self.calls: list[tuple[str, tuple[str, ...]]] = []

    def score(self, instruction, responses):
        with self._lock:
            self.calls.append((instruction, tuple(responses)))
        return [float(self.score_one(instruction, r)) for r in responses]

    def score_one(self, instruction: str, response: str) -> float:
        raise NotImplementedError


class CountReward(_MockReward):
    """Number of occurrences of ``token`` in the response text."""

    def __init__(self, token: str = "A"):
        super().__init__()
        self.token = token

    def score_one(self, instruction, response):
        return float(response.count(self.token))


class WeightedSubstringReward(_MockReward):
    """Sum of ``weight * overlapping occurrences`` over a substring table."""

    def __init__(self, weights: Mapping[str, float]):
        super().__init__()
        self.weights = dict(weights)

    def score_one(self, instruction, response):
        total = 0.0
        for sub, w in self.weights.items():
            hits = sum(1 for i in range(len(response) - len(sub) + 1) if response.startswith(sub, i))
            total += w * hits
        return total


class PreferencePairReward(_MockReward):
    """Prefers ``aligned`` over ``unaligned``.

    Scores a response by how many leading characters it shares with the
    aligned answer minus those shared with the unaligned one, normalised by the
    longer answer's length.
    """

    def __init__(self, aligned: str, unaligned: str):
        super().__init__()
        if aligned == unaligned:
            raise ValueError("aligned and unaligned responses must differ")
        self.aligned = aligned
        self.unaligned = unaligned

    @staticmethod
    def _common_prefix(a: str, b: str) -> int:
        n = 0
        for x, y in zip(a, b):
            if x != y:
                break
            n += 1
        return n

    def score_one(self, instruction, response):
        scale = max(len(self.aligned), len(self.unaligned))
        return (self._common_prefix(response, self.aligned) - self._common_prefix(response, self.unaligned)) / scale


# --------------------------------------------------------------------------- mutators


@dataclass
class SuffixMutator(MutationBackend):
    """Mutation i (1-based) appends ``template.format(i=i)``."""

    template: str = " #{i}"

    def propose(self, candidate_text, n):
        return [f"{candidate_text}{self.template.format(i=i)}" for i in range(1, n + 1)]


@dataclass
class AppendMutator(MutationBackend):
    suffix: str = "!"

    def propose(self, candidate_text, n):
        return [candidate_text + self.suffix] * n


@dataclass
class IdentityMutator(MutationBackend):
    def propose(self, candidate_text, n):
        return [candidate_text] * n


@dataclass
class ListMutator(MutationBackend):
    """Returns a fixed proposal list regardless of the candidate; for tests."""

    proposals: list[str] = field(default_factory=list)

    def propose(self, candidate_text, n):
        return list(self.proposals[:n])


# --------------------------------------------------------------------------- named suites


@dataclass
class MockSuite:
    name: str
    generator: GenerationBackend
    reward: RewardBackend
    mutator: MutationBackend


def _count_a() -> MockSuite:
    return MockSuite("count-A", BiasedCoinGenerator(), CountReward("A"), SuffixMutator())


def _monotone() -> MockSuite:
    return MockSuite("monotone", PrefixMonotoneGenerator(), CountReward("A"), SuffixMutator())


def _bang() -> MockSuite:
    return MockSuite("bang", RuleGenerator(bang_rule), CountReward("A"), AppendMutator("!"))


def _substring() -> MockSuite:
    return MockSuite(
        "substring",
        BiasedCoinGenerator(),
        WeightedSubstringReward({"AB": 2.0, "C": -0.5}),
        SuffixMutator(),
    )


MOCK_SUITES: dict[str, Callable[[], MockSuite]] = {
    "count-A": _count_a,
    "monotone": _monotone,
    "bang": _bang,
    "substring": _substring,
}


def mock_suite(name: str) -> MockSuite:
    try:
        return MOCK_SUITES[name]()
    except KeyError:
        raise ValueError(f"unknown mock {name!r}; choose from {', '.join(MOCK_SUITES)}") from None
