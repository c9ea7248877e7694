"""Beam-dynamics metrics over search traces.

A *unit* is one mutation cycle of one trace: its replacement cycles, in
order.  Series are indexed by replacement step ``t`` (1-based) and averaged
across units, then smoothed with a trailing moving average.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .core import ReplacementCycleRecord, SearchTrace
from .search import top_k_instructions

log = logging.getLogger(__name__)

REPORT_VERSION = "1"
METRICS = ("jaccard", "rbo", "win_probability")


def jaccard(set_a: Iterable[Hashable], set_b: Iterable[Hashable]) -> float:
    a, b = set(set_a), set(set_b)
    if not a and not b:
        log.debug("jaccard of two empty sets taken as 1.0")
        return 1.0
    return len(a & b) / len(a | b)


def rbo(list_s: Sequence[Hashable], list_t: Sequence[Hashable], p: float) -> float:
    """Rank-biased overlap truncated at the shorter list's depth (no extrapolation).

    Identical lists of length D score ``1 - p**D``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    depth = min(len(list_s), len(list_t))
    seen_s: set = set()
    seen_t: set = set()
    overlap = 0
    total = 0.0
    for d in range(1, depth + 1):
        x, y = list_s[d - 1], list_t[d - 1]
        if x == y:
            overlap += 1
        else:
            overlap += (x in seen_t) + (y in seen_s)
        seen_s.add(x)
        seen_t.add(y)
        total += p ** (d - 1) * overlap / d
    return (1.0 - p) * total


def smooth(values: Sequence[float], window: int) -> list[float]:
    """Trailing moving average; the first ``window - 1`` points average what exists."""
    if window < 1:
        raise ValueError("window must be >= 1")
    return [sum(values[max(0, i - window + 1) : i + 1]) / min(i + 1, window) for i in range(len(values))]


@dataclass
class MetricSeries:
    name: str
    values: list[tuple[int, float]]
    smoothing_window: int
    raw: list[tuple[int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "smoothing_window": self.smoothing_window,
            "raw": [[t, v] for t, v in self.raw],
            "values": [[t, v] for t, v in self.values],
        }


def _series(name: str, raw: list[tuple[int, float]], window: int) -> MetricSeries:
    smoothed = smooth([v for _, v in raw], window)
    return MetricSeries(name, [(t, v) for (t, _), v in zip(raw, smoothed)], window, raw)


def units(traces: Sequence[SearchTrace]) -> list[list[ReplacementCycleRecord]]:
    return [list(mc.cycles) for tr in traces for mc in tr.mutation_cycle_records if mc.cycles]


def _check_k(traces: Sequence[SearchTrace], k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    for tr in traces:
        if k > tr.config.top_k and tr.strategy != "mutate-best":
            log.warning("analysis k=%d exceeds the run's top_k=%d (%s)", k, tr.config.top_k, tr.run_id)


def _pairwise_series(name, traces, k, window, compare) -> MetricSeries:
    _check_k(traces, k)
    usable = [u for u in units(traces) if len(u) >= 2]
    raw: list[tuple[int, float]] = []
    if usable:
        steps = min(len(u) for u in usable) - 1
        for i in range(steps):
            vals = [compare(u[i].top_k(k).instruction_ids, u[i + 1].top_k(k).instruction_ids) for u in usable]
            raw.append((usable[0][i].t, sum(vals) / len(vals)))
    return _series(name, raw, window)


def avg_jaccard_series(traces: Sequence[SearchTrace], k: int, window: int = 5) -> MetricSeries:
    """Mean Jaccard similarity of top-k instruction sets at steps t and t+1."""
    return _pairwise_series("jaccard", traces, k, window, jaccard)


def avg_rbo_series(traces: Sequence[SearchTrace], k: int, p: float = 0.9, window: int = 5) -> MetricSeries:
    """Mean RBO of ranked top-k instruction lists at steps t and t+1."""
    return _pairwise_series("rbo", traces, k, window, lambda a, b: rbo(a, b, p))


def winning_instruction(trace: SearchTrace, mutation_cycle_index: int, k: int | None = None) -> str:
    """Most frequent instruction across one mutation cycle's top-k sets."""
    mc = next((m for m in trace.mutation_cycle_records if m.index == mutation_cycle_index), None)
    if mc is None or not mc.cycles:
        raise KeyError(f"mutation cycle {mutation_cycle_index} has no replacement cycles")
    return top_k_instructions([rec.top_k(k) for rec in mc.cycles], 1)[0]


def win_probability_series(traces: Sequence[SearchTrace], k: int, window: int = 5) -> MetricSeries:
    """Fraction of units whose winning instruction is in step t's top-k set.

    Units that ended before step t are left out of that step's denominator.
    """
    if not traces:
        raise ValueError("need at least one trace")
    _check_k(traces, k)
    hits: dict[int, list[int]] = {}
    for tr in traces:
        for mc in tr.mutation_cycle_records:
            if not mc.cycles:
                continue
            win = winning_instruction(tr, mc.index, k)
            for rec in mc.cycles:
                hits.setdefault(rec.t, []).append(int(win in rec.top_k(k).instruction_ids))
    raw = [(t, sum(h) / len(h)) for t, h in sorted(hits.items())]
    return _series("win_probability", raw, window)


def build_report(
    traces: Sequence[SearchTrace],
    *,
    names: Sequence[str] | None = None,
    metrics: Sequence[str] = METRICS,
    k: int = 3,
    p: float = 0.9,
    window: int = 5,
) -> dict:
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metric(s): {', '.join(sorted(unknown))}")
    out: dict[str, dict] = {}
    if "jaccard" in metrics:
        out["jaccard"] = avg_jaccard_series(traces, k, window).to_dict()
    if "rbo" in metrics:
        out["rbo"] = avg_rbo_series(traces, k, p, window).to_dict()
    if "win_probability" in metrics:
        out["win_probability"] = win_probability_series(traces, k, window).to_dict()
    empty_pairs = sum(
        1
        for u in units(traces)
        for a, b in zip(u, u[1:])
        if not a.top_k(k).instruction_ids and not b.top_k(k).instruction_ids
    )
    return {
        "schema_version": REPORT_VERSION,
        "traces": list(names) if names is not None else [tr.run_id for tr in traces],
        "n_traces": len(traces),
        "n_units": len(units(traces)),
        "k": k,
        "p": p,
        "window": window,
        "metrics": out,
        "flags": {"empty_jaccard_pairs": empty_pairs},
    }


def write_csv(series: dict, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "raw", "smoothed"])
        for (t, raw), (_, val) in zip(series["raw"], series["values"]):
            writer.writerow([t, repr(raw), repr(val)])


_SERIES_SCHEMA = {
    "type": "object",
    "required": ["name", "smoothing_window", "raw", "values"],
    "properties": {
        "name": {"type": "string"},
        "smoothing_window": {"type": "integer", "minimum": 1},
        "raw": {"type": "array", "items": {"$ref": "#/$defs/point"}},
        "values": {"type": "array", "items": {"$ref": "#/$defs/point"}},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "traces", "n_traces", "n_units", "k", "p", "window", "metrics", "flags"],
    "properties": {
        "schema_version": {"const": REPORT_VERSION},
        "traces": {"type": "array", "items": {"type": "string"}},
        "n_traces": {"type": "integer", "minimum": 1},
        "n_units": {"type": "integer", "minimum": 0},
        "k": {"type": "integer", "minimum": 1},
        "p": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "window": {"type": "integer", "minimum": 1},
        "metrics": {
            "type": "object",
            "properties": {name: _SERIES_SCHEMA for name in METRICS},
            "additionalProperties": False,
        },
        "flags": {"type": "object"},
    },
    "$defs": {
        "point": {
            "type": "array",
            "prefixItems": [{"type": "integer", "minimum": 1}, {"type": "number", "minimum": 0, "maximum": 1}],
            "minItems": 2,
            "maxItems": 2,
        }
    },
}
