"""Domain types, search configuration and seeded random streams."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

EOS = "</s>"
SEED_ID = "seed"


class ConfigError(ValueError):
    """Unknown configuration key or unreadable config document."""


class ConfigValidationError(ConfigError):
    """A configuration value violates a SearchConfig invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class Instruction:
    id: str
    text: str
    parent_id: str | None = None
    origin_cycle: int = 0

    def __post_init__(self):
        if not self.text:
            raise ValueError("instruction text must be non-empty")
        if self.origin_cycle < 0:
            raise ValueError("origin_cycle must be >= 0")
        if (self.parent_id is None) != (self.origin_cycle == 0):
            raise ValueError("parent_id must be absent exactly when origin_cycle == 0")

    @property
    def is_seed(self) -> bool:
        return self.parent_id is None

    @classmethod
    def seed(cls, text: str, id: str = SEED_ID) -> "Instruction":
        return cls(id=id, text=text)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Instruction":
        return cls(
            id=data["id"],
            text=data["text"],
            parent_id=data.get("parent_id"),
            origin_cycle=int(data.get("origin_cycle", 0)),
        )


def response_text(tokens: Iterable[str]) -> str:
    """Join token segments into response text, dropping the eos marker."""
    return "".join(tok for tok in tokens if tok != EOS)


@dataclass(frozen=True)
class BeamState:
    """A partially decoded response bound to its guiding instruction."""

    beam_index: int
    instruction_id: str
    tokens: tuple[str, ...] = ()
    finished: bool = False
    reward_history: tuple[tuple[int, float], ...] = ()
    copy_of: int | None = None

    @property
    def text(self) -> str:
        return response_text(self.tokens)

    @property
    def ended_with_eos(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def extend(self, new_tokens: Iterable[str], finished: bool) -> "BeamState":
        if self.finished:
            raise ValueError(f"beam {self.beam_index} is finished and cannot be extended")
        return dataclasses.replace(
            self, tokens=self.tokens + tuple(new_tokens), finished=finished
        )

    def with_reward(self, cycle: int, reward: float) -> "BeamState":
        if self.reward_history and self.reward_history[-1][0] >= cycle:
            raise ValueError("reward_history cycle indices must be strictly increasing")
        return dataclasses.replace(
            self, reward_history=self.reward_history + ((cycle, float(reward)),)
        )

    def copied_from(self, source: "BeamState") -> "BeamState":
        """This beam slot overwritten by a deep copy of ``source``."""
        if self.finished:
            raise ValueError(f"beam {self.beam_index} is finished and cannot be replaced")
        return BeamState(
            beam_index=self.beam_index,
            instruction_id=source.instruction_id,
            tokens=tuple(source.tokens),
            finished=source.finished,
            reward_history=tuple(source.reward_history),
            copy_of=source.beam_index,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "beam_index": self.beam_index,
            "instruction_id": self.instruction_id,
            "tokens": list(self.tokens),
            "finished": self.finished,
            "reward_history": [[c, r] for c, r in self.reward_history],
            "copy_of": self.copy_of,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BeamState":
        return cls(
            beam_index=int(data["beam_index"]),
            instruction_id=data["instruction_id"],
            tokens=tuple(data.get("tokens", ())),
            finished=bool(data.get("finished", False)),
            reward_history=tuple((int(c), float(r)) for c, r in data.get("reward_history", ())),
            copy_of=data.get("copy_of"),
        )


@dataclass(frozen=True)
class Admission:
    instruction_id: str
    beat_candidate_id: str
    reward_vs_seed: float
    candidate_reward: float


@dataclass(frozen=True)
class Archive:
    """The evolving instruction set. Entries keep insertion order."""

    entries: tuple[Instruction, ...]
    seed_id: str
    admission_log: tuple[Admission, ...] = ()

    @classmethod
    def from_seed(cls, seed: Instruction) -> "Archive":
        return cls(entries=(seed,), seed_id=seed.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, instruction_id: object) -> bool:
        return any(e.id == instruction_id for e in self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def reference_reward(self, instruction_id: str) -> float:
        """Seed-instruction reward an entry achieved when admitted.

        The seed has no admission record and no state decoded under it, so its
        reference is -inf: any winner of a seed-candidate cycle may be admitted.
        """
        for rec in reversed(self.admission_log):
            if rec.instruction_id == instruction_id:
                return rec.reward_vs_seed
        return -math.inf

    def check_invariants(self) -> None:
        if self.seed_id not in self:
            raise AssertionError("seed instruction missing from archive")
        logged = {rec.instruction_id: rec for rec in self.admission_log}
        for entry in self.entries:
            if entry.id == self.seed_id:
                continue
            rec = logged.get(entry.id)
            if rec is None:
                raise AssertionError(f"archive entry {entry.id} has no admission record")
            if not rec.reward_vs_seed > rec.candidate_reward:
                raise AssertionError(f"archive entry {entry.id} did not beat its candidate")


@dataclass(frozen=True)
class SearchConfig:
    mutation_cycles: int = 1
    mutations_per_cycle: int = 5
    beams_per_mutation: int = 1
    replacement_period: int = 40
    top_k: int = 3
    archive_top_p: int = 3
    lookahead: int = 0
    max_new_tokens: int = 2048
    temperature: float = 0.7
    sampling_top_k: int = 40
    rng_seed: int = 0
    rbo_persistence: float = 0.9
    smoothing_window: int = 5
    archive_replace_candidate: bool = False

    def __post_init__(self):
        _validate(self)

    @property
    def beam_count(self) -> int:
        return self.mutations_per_cycle * self.beams_per_mutation

    @property
    def max_replacement_cycles(self) -> int:
        return math.ceil(self.max_new_tokens / self.replacement_period)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **overrides: Any) -> "SearchConfig":
        return new_config(overrides, base=self)


# Short names used throughout the literature for the same knobs.
ALIASES = {
    "N": "mutation_cycles",
    "n": "mutations_per_cycle",
    "n_b": "beams_per_mutation",
    "m": "replacement_period",
    "k": "top_k",
    "p_archive": "archive_top_p",
    "l": "lookahead",
    "p_rbo": "rbo_persistence",
}

_FIELDS = {f.name: f for f in dataclasses.fields(SearchConfig)}
_INT_FIELDS = {name for name, f in _FIELDS.items() if f.type == "int"}
_FLOAT_FIELDS = {name for name, f in _FIELDS.items() if f.type == "float"}


def _validate(cfg: SearchConfig) -> None:
    for name in _INT_FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigValidationError(name, f"expected an integer, got {value!r}")
    for name in _FLOAT_FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigValidationError(name, f"expected a finite number, got {value!r}")
    if not isinstance(cfg.archive_replace_candidate, bool):
        raise ConfigValidationError("archive_replace_candidate", "expected a boolean")

    positive = (
        "mutation_cycles",
        "mutations_per_cycle",
        "beams_per_mutation",
        "replacement_period",
        "top_k",
        "archive_top_p",
        "max_new_tokens",
        "sampling_top_k",
        "smoothing_window",
    )
    for name in positive:
        if getattr(cfg, name) < 1:
            raise ConfigValidationError(name, "must be >= 1")
    if cfg.lookahead < 0:
        raise ConfigValidationError("lookahead", "must be >= 0")
    if cfg.top_k > cfg.beam_count:
        raise ConfigValidationError(
            "top_k", f"k exceeds beam count ({cfg.top_k} > {cfg.beam_count})"
        )
    if cfg.temperature <= 0:
        raise ConfigValidationError("temperature", "must be > 0")
    if not 0.0 < cfg.rbo_persistence < 1.0:
        raise ConfigValidationError("rbo_persistence", "must lie in (0, 1)")
    if not 0 <= cfg.rng_seed < 2**64:
        raise ConfigValidationError("rng_seed", "must be an unsigned 64-bit integer")


def new_config(overrides: Mapping[str, Any] | None = None, *, base: SearchConfig | None = None) -> SearchConfig:
    """Default configuration with ``overrides`` applied.

    Keys may be full field names or the short aliases in ``ALIASES``.
    """
    values = (base or SearchConfig()).to_dict()
    for key, value in (overrides or {}).items():
        name = ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigError(f"unknown configuration key: {key!r}")
        if name in _FLOAT_FIELDS and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        values[name] = value
    return SearchConfig(**values)


def load_config(path: str | Path) -> SearchConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    return new_config(data)


def config_from_json(text: str) -> SearchConfig:
    data = json.loads(text)
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    return new_config(data)


def _label_words(label: str) -> list[int]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Independent, reproducible random stream keyed by ``(seed, stream_label)``.

    Streams with different labels never share state, so drawing from one cannot
    perturb another.
    """
    entropy = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, *_label_words(stream_label)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *parts: object) -> int:
    """A 63-bit seed for a sub-stream, e.g. one beam's segment at one cycle."""
    key = "/".join([str(seed), *map(str, parts)])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# --------------------------------------------------------------------------- trace records


@dataclass(frozen=True)
class CycleTopK:
    t: int
    instruction_ids: tuple[str, ...]


@dataclass(frozen=True)
class ReplacementCycleRecord:
    """One decode -> score -> replace iteration.

    ``beam_instructions`` and ``finished`` describe the beams as they were
    scored, before replacement.
    """

    t: int
    rewards: tuple[float, ...]
    ranking: tuple[int, ...]
    beam_instructions: tuple[str, ...]
    finished: tuple[bool, ...]
    k: int
    replacements: tuple[tuple[int, int], ...] = ()

    @property
    def top_k_beams(self) -> tuple[int, ...]:
        return self.ranking[: self.k]

    def top_k(self, k: int | None = None) -> CycleTopK:
        k = self.k if k is None else k
        ids: list[str] = []
        for beam in self.ranking[:k]:
            iid = self.beam_instructions[beam]
            if iid not in ids:
                ids.append(iid)
        return CycleTopK(self.t, tuple(ids))

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "rewards": list(self.rewards),
            "ranking": list(self.ranking),
            "beam_instructions": list(self.beam_instructions),
            "finished": list(self.finished),
            "k": self.k,
            "top_k_beams": list(self.top_k_beams),
            "top_k_instructions": list(self.top_k().instruction_ids),
            "replacements": [list(ev) for ev in self.replacements],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReplacementCycleRecord":
        return cls(
            t=int(data["t"]),
            rewards=tuple(float(r) for r in data["rewards"]),
            ranking=tuple(int(i) for i in data["ranking"]),
            beam_instructions=tuple(data["beam_instructions"]),
            finished=tuple(bool(f) for f in data["finished"]),
            k=int(data["k"]),
            replacements=tuple((int(a), int(b)) for a, b in data.get("replacements", ())),
        )


@dataclass
class MutationCycleRecord:
    index: int
    candidate: Instruction
    mutations: list[Instruction]
    degraded: bool = False
    cycles: list[ReplacementCycleRecord] = field(default_factory=list)
    final_beams: list[BeamState] = field(default_factory=list)
    final_rewards: list[float] = field(default_factory=list)
    top_k_instructions: list[str] = field(default_factory=list)
    admitted: list[str] = field(default_factory=list)


@dataclass
class CallCounts:
    generation_calls: int = 0
    generated_tokens: int = 0
    reward_calls: int = 0
    reward_items: int = 0

    def to_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)


@dataclass
class SearchTrace:
    run_id: str
    strategy: str
    config: SearchConfig
    seed_instruction: Instruction
    mutation_cycle_records: list[MutationCycleRecord] = field(default_factory=list)
    final_answer: BeamState | None = None
    final_reward: float | None = None
    final_mutation_cycle: int | None = None
    backend_call_counts: CallCounts = field(default_factory=CallCounts)
    archive: Archive | None = None
    complete: bool = False
