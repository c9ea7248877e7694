"""JSON Lines trace format.

One event per line; the first line is a header carrying ``schema_version`` and
the config.  Events are written as the search progresses, so an aborted run
still leaves a readable (incomplete) trace.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Iterator

from .core import (
    Admission,
    Archive,
    BeamState,
    CallCounts,
    Instruction,
    MutationCycleRecord,
    ReplacementCycleRecord,
    SearchTrace,
    new_config,
)

SCHEMA_VERSION = "1"


class TraceFormatError(ValueError):
    pass


def _archive_dict(archive: Archive | None) -> dict[str, Any] | None:
    if archive is None:
        return None
    return {
        "seed_id": archive.seed_id,
        "entries": [e.to_dict() for e in archive.entries],
        "admission_log": [
            {
                "instruction_id": a.instruction_id,
                "beat_candidate_id": a.beat_candidate_id,
                "reward_vs_seed": a.reward_vs_seed,
                # -inf (the seed's reference reward) has no JSON literal
                "candidate_reward": a.candidate_reward if math.isfinite(a.candidate_reward) else None,
            }
            for a in archive.admission_log
        ],
    }


def _archive_from(data: dict[str, Any] | None) -> Archive | None:
    if data is None:
        return None
    return Archive(
        entries=tuple(Instruction.from_dict(e) for e in data["entries"]),
        seed_id=data["seed_id"],
        admission_log=tuple(
            Admission(
                a["instruction_id"],
                a["beat_candidate_id"],
                float(a["reward_vs_seed"]),
                -math.inf if a["candidate_reward"] is None else float(a["candidate_reward"]),
            )
            for a in data["admission_log"]
        ),
    )


def _cycle(trace: SearchTrace, index: int) -> MutationCycleRecord:
    return trace.mutation_cycle_records[index - 1]


def build_event(kind: str, trace: SearchTrace, **payload: Any) -> dict[str, Any]:
    """Serialize one event from the current state of ``trace``."""
    if kind == "header":
        return {
            "type": "header",
            "schema_version": SCHEMA_VERSION,
            "run_id": trace.run_id,
            "strategy": trace.strategy,
            "config": trace.config.to_dict(),
            "seed_instruction": trace.seed_instruction.to_dict(),
        }
    if kind == "mutation_cycle_start":
        mc = _cycle(trace, payload["mutation_cycle"])
        return {
            "type": kind,
            "mutation_cycle": mc.index,
            "candidate": mc.candidate.to_dict(),
            "mutations": [m.to_dict() for m in mc.mutations],
            "degraded": mc.degraded,
        }
    if kind == "replacement_cycle":
        record: ReplacementCycleRecord = payload["record"]
        return {"type": kind, "mutation_cycle": payload["mutation_cycle"], **record.to_dict()}
    if kind == "mutation_cycle_end":
        mc = _cycle(trace, payload["mutation_cycle"])
        return {
            "type": kind,
            "mutation_cycle": mc.index,
            "final_beams": [b.to_dict() for b in mc.final_beams],
            "final_rewards": list(mc.final_rewards),
            "top_k_instructions": list(mc.top_k_instructions),
            "admitted": list(mc.admitted),
        }
    if kind == "result":
        return {
            "type": kind,
            "final_mutation_cycle": trace.final_mutation_cycle,
            "final_answer": trace.final_answer.to_dict() if trace.final_answer else None,
            "final_reward": trace.final_reward,
            "answer_text": trace.final_answer.text if trace.final_answer else None,
            "backend_call_counts": trace.backend_call_counts.to_dict(),
            "archive": _archive_dict(trace.archive),
        }
    if kind == "abort":
        return {
            "type": kind,
            "error": payload["error"],
            "backend_call_counts": trace.backend_call_counts.to_dict(),
        }
    raise ValueError(f"unknown event type {kind!r}")


def to_events(trace: SearchTrace) -> list[dict[str, Any]]:
    events = [build_event("header", trace)]
    for mc in trace.mutation_cycle_records:
        events.append(build_event("mutation_cycle_start", trace, mutation_cycle=mc.index))
        for rec in mc.cycles:
            events.append(build_event("replacement_cycle", trace, mutation_cycle=mc.index, record=rec))
        if mc.final_beams:
            events.append(build_event("mutation_cycle_end", trace, mutation_cycle=mc.index))
    if trace.complete:
        events.append(build_event("result", trace))
    return events


def dumps_event(event: dict[str, Any]) -> str:
    return json.dumps(event, sort_keys=True, ensure_ascii=False, allow_nan=False, separators=(",", ":"))


def dumps(trace: SearchTrace) -> str:
    return "".join(dumps_event(e) + "\n" for e in to_events(trace))


class TraceWriter:
    """Appends events to a JSONL file, flushing after each one."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8", newline="\n")

    def __call__(self, event: dict[str, Any]) -> None:
        self._fh.write(dumps_event(event) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def iter_events(lines: Iterable[str]) -> Iterator[dict[str, Any]]:
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"line {n}: invalid JSON ({exc})") from exc


def from_events(events: Iterable[dict[str, Any]]) -> SearchTrace:
    it = iter(events)
    header = next(it, None)
    if header is None or header.get("type") != "header":
        raise TraceFormatError("trace must start with a header event")
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise TraceFormatError(f"unsupported trace schema_version {version!r} (expected {SCHEMA_VERSION!r})")
    try:
        trace = SearchTrace(
            run_id=header["run_id"],
            strategy=header["strategy"],
            config=new_config(header["config"]),
            seed_instruction=Instruction.from_dict(header["seed_instruction"]),
        )
        cycles: dict[int, MutationCycleRecord] = {}
        for ev in it:
            kind = ev.get("type")
            if kind == "mutation_cycle_start":
                mc = MutationCycleRecord(
                    index=int(ev["mutation_cycle"]),
                    candidate=Instruction.from_dict(ev["candidate"]),
                    mutations=[Instruction.from_dict(m) for m in ev["mutations"]],
                    degraded=bool(ev.get("degraded", False)),
                )
                cycles[mc.index] = mc
                trace.mutation_cycle_records.append(mc)
            elif kind == "replacement_cycle":
                cycles[int(ev["mutation_cycle"])].cycles.append(ReplacementCycleRecord.from_dict(ev))
            elif kind == "mutation_cycle_end":
                mc = cycles[int(ev["mutation_cycle"])]
                mc.final_beams = [BeamState.from_dict(b) for b in ev["final_beams"]]
                mc.final_rewards = [float(r) for r in ev["final_rewards"]]
                mc.top_k_instructions = list(ev["top_k_instructions"])
                mc.admitted = list(ev["admitted"])
            elif kind == "result":
                trace.final_mutation_cycle = ev["final_mutation_cycle"]
                trace.final_answer = BeamState.from_dict(ev["final_answer"]) if ev["final_answer"] else None
                trace.final_reward = ev["final_reward"]
                trace.backend_call_counts = CallCounts(**ev["backend_call_counts"])
                trace.archive = _archive_from(ev.get("archive"))
                trace.complete = True
            elif kind == "abort":
                trace.backend_call_counts = CallCounts(**ev["backend_call_counts"])
            else:
                raise TraceFormatError(f"unknown event type {kind!r}")
    except (KeyError, TypeError) as exc:
        raise TraceFormatError(f"malformed trace event: {exc!r}") from exc
    return trace


def read_trace(path: str | Path) -> SearchTrace:
    with Path(path).open(encoding="utf-8") as fh:
        return from_events(iter_events(fh))


def loads(text: str) -> SearchTrace:
    return from_events(iter_events(text.splitlines()))


def content_hash(data: bytes) -> str:
    """Git blob hash of ``data`` (what ``git hash-object`` prints)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def trace_hash(trace: SearchTrace) -> str:
    return content_hash(dumps(trace).encode("utf-8"))


def file_hash(path: str | Path) -> str:
    return content_hash(Path(path).read_bytes())
