"""One-shot mutator prompt and the LLM-backed mutation backend."""

from __future__ import annotations

import re
from typing import Sequence

from ..core import derive_seed, response_text
from .base import GenerationBackend, GenerationRequest, MutationBackend, generate_batch

SLOT = "|exprompt|"

MUTATOR_TEMPLATE = (
    "You are a professional prompt engineer. You are given an original instruction and your goal is "
    "to mutate the instruction into 5 different instruction that will improve the clarity of original "
    "instruction. The mutated instruction should not deviate from the original instruction and they "
    "should provide the same general intention.\n"
    "\n"
    "Hint: Think of adding more details,removing details in the instruction or change certain phrasing "
    "when mutating the instruction.\n"
    "Only give the mutated instruction in a list order.\n"
    "Original instruction: How to make a cake?\n"
    "1. How to bake a delicious cake?\n"
    "2. Step-by-step guide to making a perfect cake from scratch\n"
    "3. How to bake a cake?\n"
    "4. Detailed instructions for creating a professional-quality cake at home\n"
    "5. How to prepare a beautiful homemade cake?\n"
    "Original instruction: " + SLOT
)

_COUNT_PHRASE = "into 5 different instruction"
_ITEM = re.compile(r"^\s*(\d+)\s*[.)]\s*(.*?)\s*$")


def render_mutator_prompt(candidate_text: str, n: int = 5) -> str:
    """The mutator prompt with ``candidate_text`` in the slot.

    For ``n == 5`` the output is the template verbatim; other counts only change
    the number in the request sentence (the one-shot example keeps five items).
    """
    prompt = MUTATOR_TEMPLATE
    if n != 5:
        prompt = prompt.replace(_COUNT_PHRASE, f"into {n} different instruction", 1)
    return prompt.replace(SLOT, candidate_text)


def requested_count(prompt: str) -> int | None:
    m = re.search(r"into (\d+) different instruction", prompt)
    return int(m.group(1)) if m else None


def candidate_from_prompt(prompt: str) -> str | None:
    """Recover the candidate from a rendered prompt (text after the last slot label)."""
    marker = "Original instruction: "
    if not prompt.startswith(MUTATOR_TEMPLATE.split(".")[0]) or marker not in prompt:
        return None
    return prompt.rsplit(marker, 1)[1]


def parse_numbered_list(reply: str) -> list[str]:
    items = []
    for line in reply.splitlines():
        m = _ITEM.match(line)
        if m and m.group(2):
            items.append(m.group(2))
    return items


class LLMMutator(MutationBackend):
    """Asks a generation backend to rewrite the candidate and parses the list it returns."""

    def __init__(
        self,
        generator: GenerationBackend,
        max_tokens: int = 512,
        temperature: float = 0.7,
        sampling_top_k: int = 40,
        seed: int = 0,
    ):
        self.generator = generator
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.sampling_top_k = sampling_top_k
        self.seed = seed
        self.last_reply: str | None = None

    def propose(self, candidate_text: str, n: int) -> list[str]:
        request = GenerationRequest(
            instruction_text=render_mutator_prompt(candidate_text, n),
            max_tokens=self.max_tokens,
            temperature=self.temperature,
            sampling_top_k=self.sampling_top_k,
            rng_substream=derive_seed(self.seed, "mutation", candidate_text, n),
        )
        (result,) = generate_batch(self.generator, [request])
        self.last_reply = response_text(result.new_tokens)
        return parse_numbered_list(self.last_reply)

    def describe(self) -> str:
        return f"llm-mutator({self.generator.describe()})"


def mock_mutation_reply(candidate_text: str, n: int, template: str = " #{i}") -> str:
    """What the mock server answers to a mutator prompt: a numbered suffix list."""
    return "\n".join(f"{i}. {candidate_text}{template.format(i=i)}" for i in range(1, n + 1))


def format_numbered(items: Sequence[str]) -> str:
    return "\n".join(f"{i}. {text}" for i, text in enumerate(items, start=1))
