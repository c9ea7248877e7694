"""Sample-N, Best-of-N, reward-guided beam replacement and the full mutation/replacement search."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .backends.base import (
    BackendError,
    GenerationBackend,
    GenerationRequest,
    Instrumented,
    MutationBackend,
    RewardBackend,
    generate_batch,
    mutate_with_status,
    score_batch,
)
from .core import (
    Admission,
    Archive,
    BeamState,
    CycleTopK,
    Instruction,
    MutationCycleRecord,
    ReplacementCycleRecord,
    SearchConfig,
    SearchTrace,
    derive_seed,
    response_text,
    seeded_rng,
)
from .trace import build_event

log = logging.getLogger(__name__)

Sink = Callable[[dict], None]

STRATEGIES = ("darwin", "sample-best", "sample-replace", "mutate-best")


class SearchAborted(RuntimeError):
    """A backend failed mid-run; ``trace`` holds everything recorded so far."""

    def __init__(self, cause: BaseException, trace: SearchTrace):
        super().__init__(f"search aborted: {cause}")
        self.cause = cause
        self.trace = trace


@dataclass(frozen=True)
class RankedBeams:
    ordering: tuple[int, ...]
    rewards: tuple[float, ...]

    def top(self, k: int) -> tuple[int, ...]:
        return self.ordering[:k]


def rank_beams(rewards: Sequence[float]) -> RankedBeams:
    """Order beam indices by reward, descending; ties go to the lower index."""
    ordering = tuple(sorted(range(len(rewards)), key=lambda i: (-rewards[i], i)))
    return RankedBeams(ordering, tuple(float(r) for r in rewards))


# --------------------------------------------------------------------------- exploitation


def best_of_n(
    reward: RewardBackend, seed_instruction: Instruction, beams: Sequence[BeamState]
) -> tuple[BeamState, list[float]]:
    if not beams:
        raise ValueError("best_of_n needs at least one beam")
    rewards = score_batch(reward, seed_instruction, [b.text for b in beams])
    return beams[select_best(beams, rewards)], rewards


def select_best(beams: Sequence[BeamState], rewards: Sequence[float]) -> int:
    """Position of the highest-reward beam; ties go to the lowest beam_index."""
    return min(range(len(beams)), key=lambda i: (-rewards[i], beams[i].beam_index))


def replacement_step(
    beams: Sequence[BeamState],
    rewards: Sequence[float],
    k: int,
    rng: np.random.Generator,
) -> tuple[list[BeamState], list[tuple[int, int]]]:
    """Overwrite every unfinished beam outside the top-k with a copy of a top-k beam.

    All beams, finished ones included, take part in the ranking; finished beams
    are never overwritten.  Sources are drawn uniformly from the top-k, one draw
    per target in ascending beam order.  ``beams[i]`` must have beam_index ``i``.
    """
    if len(beams) != len(rewards):
        raise ValueError("beams and rewards differ in length")
    if not 1 <= k <= len(beams):
        raise ValueError(f"k must lie in [1, {len(beams)}], got {k}")
    top = rank_beams(rewards).top(k)
    top_set = set(top)
    out = list(beams)
    events = []
    for target in range(len(beams)):
        if target in top_set or beams[target].finished:
            continue
        source = top[int(rng.integers(k))]
        out[target] = beams[target].copied_from(beams[source])
        events.append((target, source))
    return out, events


# --------------------------------------------------------------------------- decoding


def _segment_length(config: SearchConfig, t: int) -> int:
    return min(config.replacement_period, config.max_new_tokens - (t - 1) * config.replacement_period)


def _decode_segment(
    generator: GenerationBackend,
    beams: list[BeamState],
    texts: Mapping[str, str],
    config: SearchConfig,
    t: int,
    mutation_cycle: int,
) -> list[BeamState]:
    """Extend every unfinished beam by one segment under its own guiding instruction."""
    live = [b for b in beams if not b.finished]
    if not live:
        return beams
    seg = _segment_length(config, t)
    last = t >= config.max_replacement_cycles
    requests = [
        GenerationRequest(
            instruction_text=texts[b.instruction_id],
            prefix_tokens=b.tokens,
            max_tokens=seg,
            temperature=config.temperature,
            sampling_top_k=config.sampling_top_k,
            rng_substream=derive_seed(config.rng_seed, "generation", mutation_cycle, b.beam_index, t),
        )
        for b in live
    ]
    results = generate_batch(generator, requests)
    out = list(beams)
    for b, res in zip(live, results):
        out[b.beam_index] = b.extend(res.new_tokens, finished=res.finished or last)
    return out


def _lookahead_texts(
    generator: GenerationBackend,
    beams: list[BeamState],
    texts: Mapping[str, str],
    config: SearchConfig,
    t: int,
    mutation_cycle: int,
) -> list[str]:
    """Response texts extended by ``lookahead`` scratch tokens; beams stay untouched.

    Beams that already emitted eos are scored as they are.
    """
    scored = [b.text for b in beams]
    open_beams = [b for b in beams if not b.ended_with_eos]
    if config.lookahead == 0 or not open_beams:
        return scored
    requests = [
        GenerationRequest(
            instruction_text=texts[b.instruction_id],
            prefix_tokens=b.tokens,
            max_tokens=config.lookahead,
            temperature=config.temperature,
            sampling_top_k=config.sampling_top_k,
            rng_substream=derive_seed(config.rng_seed, "lookahead", mutation_cycle, b.beam_index, t),
        )
        for b in open_beams
    ]
    for b, res in zip(open_beams, generate_batch(generator, requests)):
        scored[b.beam_index] = b.text + response_text(res.new_tokens)
    return scored


def sample_n(
    generator: GenerationBackend,
    instruction: Instruction,
    count: int,
    config: SearchConfig,
    *,
    mutation_cycle: int = 1,
) -> list[BeamState]:
    """``count`` independent beams under one instruction, each decoded to the end.

    Decoding proceeds in replacement-period segments with the same per-beam
    random sub-streams a replacement search would use.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    texts = {instruction.id: instruction.text}
    beams = [BeamState(beam_index=i, instruction_id=instruction.id) for i in range(count)]
    for t in range(1, config.max_replacement_cycles + 1):
        beams = _decode_segment(generator, beams, texts, config, t, mutation_cycle)
        if all(b.finished for b in beams):
            break
    return beams


@dataclass
class ReplacementOutcome:
    beams: list[BeamState]
    records: list[ReplacementCycleRecord]
    final_rewards: list[float]


def run_replacement_search(
    generator: GenerationBackend,
    reward: RewardBackend,
    seed_instruction: Instruction,
    guided_beams: Sequence[tuple[Instruction, BeamState]],
    config: SearchConfig,
    *,
    mutation_cycle: int = 1,
    replace: bool = True,
    on_cycle: Callable[[ReplacementCycleRecord], None] | None = None,
) -> ReplacementOutcome:
    """Alternate segment decoding and reward-guided replacement until every beam ends.

    Every cycle scores all beams against the seed instruction (with look-ahead
    previews when ``config.lookahead > 0``), records the ranking and top-k
    instructions, then replaces.  With look-ahead the final beams are re-scored
    without preview so the reported rewards describe the actual answers.
    """
    if not guided_beams:
        raise ValueError("run_replacement_search needs at least one beam")
    texts = {instr.id: instr.text for instr, _ in guided_beams}
    texts.setdefault(seed_instruction.id, seed_instruction.text)
    beams = [b for _, b in guided_beams]
    if [b.beam_index for b in beams] != list(range(len(beams))):
        raise ValueError("beam indices must be 0..n-1 in order")
    k = min(config.top_k, len(beams)) if replace else len(beams)
    rng = seeded_rng(config.rng_seed, f"replacement/{mutation_cycle}")
    records: list[ReplacementCycleRecord] = []
    rewards: list[float] = []

    for t in range(1, config.max_replacement_cycles + 1):
        beams = _decode_segment(generator, beams, texts, config, t, mutation_cycle)
        scored = _lookahead_texts(generator, beams, texts, config, t, mutation_cycle)
        rewards = score_batch(reward, seed_instruction, scored)
        beams = [b.with_reward(t, r) for b, r in zip(beams, rewards)]
        ranking = rank_beams(rewards).ordering
        pre = beams
        beams, events = replacement_step(beams, rewards, k, rng)
        record = ReplacementCycleRecord(
            t=t,
            rewards=tuple(rewards),
            ranking=ranking,
            beam_instructions=tuple(b.instruction_id for b in pre),
            finished=tuple(b.finished for b in pre),
            k=k,
            replacements=tuple(events),
        )
        records.append(record)
        if on_cycle is not None:
            on_cycle(record)
        if all(b.finished for b in beams):
            break

    if config.lookahead > 0:
        rewards = score_batch(reward, seed_instruction, [b.text for b in beams])
    return ReplacementOutcome(beams, records, list(rewards))


def top_k_instructions(records: Sequence[CycleTopK], k: int) -> list[str]:
    """The ``k`` instruction ids appearing in the most per-cycle top-k sets.

    Ties go to the earlier first-appearance cycle, then to the smaller id.
    """
    if not records:
        raise ValueError("top_k_instructions needs at least one cycle")
    freq: Counter[str] = Counter()
    first: dict[str, int] = {}
    for rec in records:
        for iid in dict.fromkeys(rec.instruction_ids):
            freq[iid] += 1
            first.setdefault(iid, rec.t)
    return sorted(freq, key=lambda iid: (-freq[iid], first[iid], iid))[:k]


# --------------------------------------------------------------------------- archive


def archive_sample(archive: Archive, rng: np.random.Generator) -> Instruction:
    if not archive.entries:
        raise ValueError("archive is empty")
    return archive.entries[int(rng.integers(len(archive.entries)))]


def archive_update(
    archive: Archive,
    candidate: Instruction,
    winners: Sequence[tuple[Instruction, float]],
    candidate_reward: float,
    p_archive: int,
    *,
    replace_candidate: bool = False,
) -> Archive:
    """Admit the (at most ``p_archive``) best winners that beat the candidate.

    Admitted instructions are added; the seed is never removed.  With
    ``replace_candidate`` a non-seed candidate is dropped once something beats it.
    """
    beating = [(instr, r) for instr, r in winners if r > candidate_reward and instr.id not in archive]
    order = sorted(range(len(beating)), key=lambda i: (-beating[i][1], i))
    admitted = [beating[i] for i in order[:p_archive]]
    if not admitted:
        return archive
    entries = list(archive.entries)
    if replace_candidate and candidate.id != archive.seed_id:
        entries = [e for e in entries if e.id != candidate.id]
    entries.extend(instr for instr, _ in admitted)
    log_ = archive.admission_log + tuple(
        Admission(instr.id, candidate.id, float(r), float(candidate_reward)) for instr, r in admitted
    )
    return Archive(entries=tuple(entries), seed_id=archive.seed_id, admission_log=log_)


def _winner_rewards(
    ids: Sequence[str],
    outcome: ReplacementOutcome,
) -> dict[str, float]:
    """Best seed-instruction reward reached under each instruction.

    Uses the final beams it guides; an instruction that no longer guides any
    final beam falls back to its best beam reward in the last cycle where it
    guided one.
    """
    out: dict[str, float] = {}
    for iid in ids:
        finals = [r for b, r in zip(outcome.beams, outcome.final_rewards) if b.instruction_id == iid]
        if finals:
            out[iid] = max(finals)
            continue
        for rec in reversed(outcome.records):
            seen = [r for g, r in zip(rec.beam_instructions, rec.rewards) if g == iid]
            if seen:
                out[iid] = max(seen)
                break
    return out


# --------------------------------------------------------------------------- orchestration


@dataclass
class Backends:
    generator: GenerationBackend
    reward: RewardBackend
    mutator: MutationBackend | None = None
    last_meter: Instrumented | None = field(default=None, init=False, repr=False)

    def new_meter(self) -> Instrumented:
        """Fresh call counters for one run; kept as ``last_meter`` for inspection."""
        self.last_meter = Instrumented(generator=self.generator, reward=self.reward)
        return self.last_meter


def make_run_id(strategy: str, seed_text: str, config: SearchConfig) -> str:
    digest = hashlib.sha256(f"{strategy}\0{seed_text}\0{config.to_json()}".encode("utf-8")).hexdigest()
    return f"{strategy}-{digest[:16]}"


class _Recorder:
    """Mirrors trace progress to ``sink`` as serialized events."""

    def __init__(self, trace: SearchTrace, sink: Sink | None):
        self.trace = trace
        self.sink = sink

    def emit(self, kind: str, **payload) -> None:
        if self.sink is not None:
            self.sink(build_event(kind, self.trace, **payload))


def _as_seed(seed_instruction: Instruction | str) -> Instruction:
    if isinstance(seed_instruction, str):
        return Instruction.seed(seed_instruction)
    if not seed_instruction.is_seed:
        raise ValueError("the seed instruction must not be a mutation")
    return seed_instruction


def darwin_run(
    backends: Backends,
    seed_instruction: Instruction | str,
    config: SearchConfig,
    *,
    strategy: str = "darwin",
    replace: bool = True,
    sink: Sink | None = None,
) -> tuple[BeamState, SearchTrace]:
    """Mutation cycles of instruction exploration plus replacement exploitation.

    Each cycle samples a candidate from the archive, mutates it into ``n``
    instructions, decodes ``n_b`` beams per instruction with reward-guided
    replacement, picks the most frequent top-k instructions and admits those that
    beat the candidate.  The answer is the best final beam over all cycles.
    ``replace=False`` disables replacement (mutation + Best-of-N).
    """
    if backends.mutator is None:
        raise ValueError("darwin_run needs a mutation backend")
    seed = _as_seed(seed_instruction)
    meter = backends.new_meter()
    trace = SearchTrace(
        run_id=make_run_id(strategy, seed.text, config),
        strategy=strategy,
        config=config,
        seed_instruction=seed,
    )
    rec = _Recorder(trace, sink)
    rec.emit("header")
    archive = Archive.from_seed(seed)
    archive_rng = seeded_rng(config.rng_seed, "archive-sample")
    best: tuple[float, int, int] | None = None  # (reward, cycle, position)

    try:
        for i in range(1, config.mutation_cycles + 1):
            candidate = archive_sample(archive, archive_rng)
            mutations, degraded = mutate_with_status(backends.mutator, candidate, config.mutations_per_cycle, i)
            mc = MutationCycleRecord(index=i, candidate=candidate, mutations=mutations, degraded=degraded)
            trace.mutation_cycle_records.append(mc)
            rec.emit("mutation_cycle_start", mutation_cycle=i)

            guided = []
            for j, instr in enumerate(mutations):
                for b in range(config.beams_per_mutation):
                    idx = j * config.beams_per_mutation + b
                    guided.append((instr, BeamState(beam_index=idx, instruction_id=instr.id)))

            def on_cycle(record: ReplacementCycleRecord, _mc=mc) -> None:
                _mc.cycles.append(record)
                rec.emit("replacement_cycle", mutation_cycle=_mc.index, record=record)

            outcome = run_replacement_search(
                meter, meter, seed, guided, config, mutation_cycle=i, replace=replace, on_cycle=on_cycle
            )
            mc.final_beams = outcome.beams
            mc.final_rewards = outcome.final_rewards

            # Frequency aggregation skips the first replacement cycle unless it
            # is the only one: after one segment the ranking is mostly noise.
            window = outcome.records[1:] if len(outcome.records) > 1 else outcome.records
            k = min(config.top_k, len(guided)) if replace else len(guided)
            mc.top_k_instructions = top_k_instructions([r.top_k(k) for r in window], k)
            by_id = {m.id: m for m in mutations}
            rewards = _winner_rewards(mc.top_k_instructions, outcome)
            winners = [(by_id[iid], rewards[iid]) for iid in mc.top_k_instructions if iid in rewards]
            before = set(archive.ids)
            archive = archive_update(
                archive,
                candidate,
                winners,
                archive.reference_reward(candidate.id),
                config.archive_top_p,
                replace_candidate=config.archive_replace_candidate,
            )
            mc.admitted = [iid for iid in archive.ids if iid not in before]
            trace.archive = archive

            pos = select_best(outcome.beams, outcome.final_rewards)
            reward_here = outcome.final_rewards[pos]
            if best is None or reward_here > best[0]:
                best = (reward_here, i, pos)
            rec.emit("mutation_cycle_end", mutation_cycle=i)
    except BackendError as exc:
        trace.backend_call_counts = meter.snapshot()
        rec.emit("abort", error=str(exc))
        raise SearchAborted(exc, trace) from exc

    reward_best, cycle_best, pos_best = best
    trace.final_answer = trace.mutation_cycle_records[cycle_best - 1].final_beams[pos_best]
    trace.final_reward = reward_best
    trace.final_mutation_cycle = cycle_best
    trace.backend_call_counts = meter.snapshot()
    trace.archive = archive
    trace.complete = True
    rec.emit("result")
    return trace.final_answer, trace


def sample_run(
    backends: Backends,
    seed_instruction: Instruction | str,
    config: SearchConfig,
    *,
    replace: bool = False,
    sink: Sink | None = None,
) -> tuple[BeamState, SearchTrace]:
    """Sample-N baselines over ``N * n * n_b`` beams guided by the seed itself.

    ``replace=False`` is Sample-N + Best-of-N; ``replace=True`` runs reward-guided
    replacement over the copies and takes the best final beam.
    """
    seed = _as_seed(seed_instruction)
    meter = backends.new_meter()
    strategy = "sample-replace" if replace else "sample-best"
    count = config.mutation_cycles * config.beam_count
    trace = SearchTrace(
        run_id=make_run_id(strategy, seed.text, config),
        strategy=strategy,
        config=config,
        seed_instruction=seed,
    )
    rec = _Recorder(trace, sink)
    rec.emit("header")
    mc = MutationCycleRecord(index=1, candidate=seed, mutations=[seed])
    trace.mutation_cycle_records.append(mc)
    rec.emit("mutation_cycle_start", mutation_cycle=1)
    try:
        if replace:
            guided = [(seed, BeamState(beam_index=i, instruction_id=seed.id)) for i in range(count)]

            def on_cycle(record):
                mc.cycles.append(record)
                rec.emit("replacement_cycle", mutation_cycle=1, record=record)

            outcome = run_replacement_search(meter, meter, seed, guided, config, mutation_cycle=1, on_cycle=on_cycle)
            beams, rewards = outcome.beams, outcome.final_rewards
        else:
            beams = sample_n(meter, seed, count, config, mutation_cycle=1)
            _, rewards = best_of_n(meter, seed, beams)
    except BackendError as exc:
        trace.backend_call_counts = meter.snapshot()
        rec.emit("abort", error=str(exc))
        raise SearchAborted(exc, trace) from exc
    mc.final_beams = beams
    mc.final_rewards = rewards
    mc.top_k_instructions = [seed.id]
    pos = select_best(beams, rewards)
    rec.emit("mutation_cycle_end", mutation_cycle=1)
    trace.final_answer = beams[pos]
    trace.final_reward = rewards[pos]
    trace.final_mutation_cycle = 1
    trace.backend_call_counts = meter.snapshot()
    trace.archive = Archive.from_seed(seed)
    trace.complete = True
    rec.emit("result")
    return trace.final_answer, trace


def run_strategy(
    strategy: str,
    backends: Backends,
    seed_instruction: Instruction | str,
    config: SearchConfig,
    *,
    sink: Sink | None = None,
) -> tuple[BeamState, SearchTrace]:
    if strategy == "darwin":
        return darwin_run(backends, seed_instruction, config, sink=sink)
    if strategy == "mutate-best":
        return darwin_run(backends, seed_instruction, config, strategy=strategy, replace=False, sink=sink)
    if strategy == "sample-best":
        return sample_run(backends, seed_instruction, config, sink=sink)
    if strategy == "sample-replace":
        return sample_run(backends, seed_instruction, config, replace=True, sink=sink)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
