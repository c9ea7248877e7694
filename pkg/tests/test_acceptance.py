"""Acceptance suite: ten end-to-end checks, each reported as one PASS/FAIL line.

The summary lines are printed at the end of the pytest run (see conftest).
"""

import itertools
import json
import math
import random

import jsonschema
import numpy as np
import pytest

from darwin_search.analysis import REPORT_SCHEMA, avg_jaccard_series, avg_rbo_series, jaccard, rbo, smooth
from darwin_search.analysis import win_probability_series
from darwin_search.backends import (
    CountReward,
    IdentityMutator,
    RuleGenerator,
    SuffixMutator,
    WeightedSubstringReward,
    mock_suite,
)
from darwin_search.backends.prompts import render_mutator_prompt
from darwin_search.cli import main
from darwin_search.core import Archive, BeamState, Instruction, new_config, seeded_rng
from darwin_search.search import (
    Backends,
    archive_sample,
    archive_update,
    best_of_n,
    darwin_run,
    rank_beams,
    replacement_step,
    run_strategy,
    sample_n,
)
from darwin_search.service import serve_mock
from darwin_search.trace import dumps, trace_hash

from . import oracles
from .test_analysis import random_trace

SEED = Instruction.seed("hi")

# Mean (sample-replace - sample-best) final reward from the standalone urn
# simulation, 4000 pairs: n=5, m=10, k=3, 60 tokens (standard error ~0.2).
ORACLE_MONOTONE_MARGIN = 3.59


@pytest.fixture
def record(acceptance_results):
    def _record(number, passed, detail):
        acceptance_results[number] = (passed, detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        assert passed, detail

    return _record


def test_01_replacement_structure(record):
    rng = random.Random(1)
    violations = 0
    steps = 600
    for trial in range(steps):
        n = rng.randint(1, 12)
        k = rng.randint(1, n)
        rewards = [rng.choice([0.0, 0.5, 1.0, 1.5, rng.random()]) for _ in range(n)]
        finished = [rng.random() < 0.3 for _ in range(n)]
        beams = [BeamState(i, f"I{i % 4}", (f"tok{i}",) * rng.randint(1, 3), finished[i]) for i in range(n)]
        out, events = replacement_step(beams, rewards, k, seeded_rng(trial, "replacement"))
        top = rank_beams(rewards).top(k)
        top_tokens = {beams[i].tokens for i in top}
        for i, b in enumerate(out):
            if not (beams[i].finished or i in top or b.tokens in top_tokens):
                violations += 1
            if beams[i].finished and b != beams[i]:
                violations += 1
        violations += sum(1 for tgt, src in events if src not in top or beams[tgt].finished)
    record(1, violations == 0, f"{steps} randomized replacement steps, {violations} violations")


def test_02_best_of_n_oracle(record):
    rng = random.Random(2)
    hits = 0
    instances = 100
    for _ in range(instances):
        vocab = rng.choice([("A", "B"), ("A",), ("B", "A")])
        length = rng.randint(1, 8)
        completions = ["".join(p) for p in itertools.product(vocab, repeat=length)]
        rng.shuffle(completions)
        if rng.random() < 0.5:
            reward = CountReward("A")
            truth = [c.count("A") for c in completions]
        else:
            weights = {"AB": rng.uniform(-1, 2), "BA": rng.uniform(-1, 2), "A": rng.uniform(-1, 1)}
            reward = WeightedSubstringReward(weights)
            truth = [
                sum(w * sum(1 for i in range(len(c)) if c.startswith(s, i)) for s, w in weights.items())
                for c in completions
            ]
        beams = [BeamState(i, "seed", (c,)) for i, c in enumerate(completions)]
        winner, _ = best_of_n(reward, SEED, beams)
        best = max(truth)
        expected = next(i for i, v in enumerate(truth) if math.isclose(v, best, rel_tol=0, abs_tol=1e-12))
        hits += winner.beam_index == expected
    record(2, hits == instances, f"best_of_n matched exhaustive argmax {hits}/{instances}")


def test_03_metric_oracles(record):
    tol = 1e-12
    worst = 0.0

    def diff(a, b):
        assert [t for t, _ in a] == [t for t, _ in b]
        return max((abs(x - y) for (_, x), (_, y) in zip(a, b)), default=0.0)

    rng = random.Random(3)
    for case in range(200):
        traces = [random_trace(rng, f"r{case}-{j}") for j in range(rng.randint(1, 3))]
        texts = [dumps(tr) for tr in traces]
        k = rng.randint(1, 4)
        p = rng.choice([0.3, 0.7, 0.9])
        w = rng.randint(1, 6)
        worst = max(
            worst,
            diff(avg_jaccard_series(traces, k, w).values, oracles.smoothed(oracles.jaccard_series(texts, k), w)),
            diff(avg_rbo_series(traces, k, p, w).values, oracles.smoothed(oracles.rbo_series(texts, k, p), w)),
            diff(win_probability_series(traces, k, w).values, oracles.smoothed(oracles.win_probability_series(texts, k), w)),
        )
        a = rng.sample("abcdefgh", rng.randint(0, 5))
        b = rng.sample("abcdefgh", rng.randint(0, 5))
        vals = [rng.random() for _ in range(rng.randint(0, 12))]
        worst = max(
            worst,
            abs(jaccard(a, b) - oracles.jaccard(a, b)),
            abs(rbo(a, b, p) - oracles.rbo(a, b, p)),
            max((abs(x - y) for x, y in zip(smooth(vals, w), oracles.smooth(vals, w))), default=0.0),
        )
    hand = (
        abs(rbo(["a", "b"], ["b", "a"], 0.9) - 0.09) <= tol
        and abs(rbo(["a", "b", "c"], ["a", "b", "c"], 0.9) - 0.271) <= tol
        and all(abs(x - y) <= tol for x, y in zip(smooth([0, 0, 1, 1, 1], 5), [0, 0, 1 / 3, 1 / 2, 3 / 5]))
    )
    record(3, worst <= tol and hand, f"200 random traces, max abs deviation {worst:.1e}; hand values {'ok' if hand else 'WRONG'}")


def accounting_case(n, n_b, m, max_new_tokens):
    """Per-mutation-cycle reward items (l=0) and extra look-ahead tokens (l=25)."""
    tau = math.ceil(max_new_tokens / m)
    counts = {}
    cycles_seen = set()
    for l in (0, 25):
        config = new_config({"N": 2, "n": n, "n_b": n_b, "m": m, "max_new_tokens": max_new_tokens, "l": l, "k": 3})
        # never emits eos, so no beam finishes early
        backends = Backends(RuleGenerator(lambda s: "A"), CountReward(), SuffixMutator())
        _, trace = darwin_run(backends, "hi", config)
        counts[l] = trace.backend_call_counts
        cycles_seen |= {len(mc.cycles) for mc in trace.mutation_cycle_records}
    beams = n * n_b
    items = counts[0].reward_items / 2
    extra = (counts[25].generated_tokens - counts[0].generated_tokens) / 2
    ok = cycles_seen == {tau} and items == beams * tau and extra == beams * tau * 25
    return ok, f"({n},{n_b},{m},{max_new_tokens}) items {items:g}/{beams * tau} tokens {extra:g}/{beams * tau * 25}"


def test_04_reward_call_accounting(record):
    results = [accounting_case(*case) for case in [(5, 1, 40, 400), (5, 2, 20, 200), (3, 1, 10, 100)]]
    record(4, all(ok for ok, _ in results), "per mutation cycle, got/expected: " + "; ".join(d for _, d in results))


def test_05_determinism(record):
    rng = random.Random(5)
    mismatches = 0
    for i in range(20):
        n = rng.randint(1, 4)
        nb = rng.randint(1, 2)
        config = new_config(
            {
                "N": rng.randint(1, 3),
                "n": n,
                "n_b": nb,
                "k": rng.randint(1, n * nb),
                "m": rng.randint(1, 8),
                "max_new_tokens": rng.randint(1, 24),
                "l": rng.choice([0, 0, 4]),
                "temperature": rng.choice([0.5, 0.7, 1.3]),
                "rng_seed": rng.getrandbits(64),
            }
        )
        mock = rng.choice(["count-A", "monotone", "substring", "bang"])
        hashes = set()
        for _ in range(2):
            suite = mock_suite(mock)
            _, trace = darwin_run(Backends(suite.generator, suite.reward, suite.mutator), "hi", config)
            hashes.add(trace_hash(trace))
        mismatches += len(hashes) != 1
    record(5, mismatches == 0, f"20 randomized configs run twice, {mismatches} hash mismatches")


def test_06_degenerate_collapse(record):
    rng = random.Random(6)
    mismatches = 0
    for seed in range(50):
        config = new_config(
            {"N": 1, "n": 1, "n_b": 1, "k": 1, "m": rng.randint(1, 10), "max_new_tokens": rng.randint(1, 40), "rng_seed": seed}
        )
        mutator = rng.choice([IdentityMutator(), SuffixMutator()])
        suite = mock_suite("count-A")
        answer, trace = darwin_run(Backends(suite.generator, suite.reward, mutator), "hi", config)
        instruction = trace.mutation_cycle_records[0].mutations[0]
        (beam,) = sample_n(mock_suite("count-A").generator, instruction, 1, config)
        mismatches += answer.tokens != beam.tokens
    record(6, mismatches == 0, f"50 seeds, {mismatches} token mismatches against sample_n(1)")


def test_07_archive_invariant(record):
    rng = np.random.default_rng(7)
    seed = Instruction.seed("seed text")
    archive = Archive.from_seed(seed)
    violations = 0
    counter = itertools.count()
    for cycle in range(1, 301):
        candidate = archive_sample(archive, rng)
        cand_reward = archive.reference_reward(candidate.id)
        winners = [
            (Instruction(f"x{next(counter)}", "m", candidate.id, cycle), float(rng.normal(cycle / 50, 1.0)))
            for _ in range(int(rng.integers(1, 5)))
        ]
        archive = archive_update(archive, candidate, winners, cand_reward, int(rng.integers(1, 4)))
        if archive.entries[0] != seed:
            violations += 1
        own = {a.instruction_id: a.reward_vs_seed for a in archive.admission_log}
        for a in archive.admission_log:
            parent = -math.inf if a.beat_candidate_id == seed.id else own[a.beat_candidate_id]
            violations += not a.reward_vs_seed > parent
    record(7, violations == 0, f"300 randomized archive updates ({len(archive)} entries), {violations} violations")


def test_08_exploitation_on_monotone_landscape(record):
    pairs = 200
    margins = []
    for seed in range(pairs):
        config = new_config({"N": 1, "n": 5, "n_b": 1, "m": 10, "k": 3, "max_new_tokens": 60, "rng_seed": seed})
        finals = {}
        for strategy in ("sample-replace", "sample-best"):
            suite = mock_suite("monotone")
            _, trace = run_strategy(strategy, Backends(suite.generator, suite.reward, suite.mutator), "hi", config)
            finals[strategy] = trace.final_reward
        margins.append(finals["sample-replace"] - finals["sample-best"])
    mean = float(np.mean(margins))
    se = float(np.std(margins, ddof=1) / math.sqrt(pairs))
    record(
        8,
        mean >= 0,
        f"mean margin sample-replace - sample-best = {mean:.2f} (se {se:.2f}) over {pairs} paired seeds; "
        f"oracle simulation expects ~{ORACLE_MONOTONE_MARGIN}",
    )


def test_09_mutator_prompt_golden(record, data_dir):
    golden = (data_dir / "mutator_prompt_cake.txt").read_bytes()
    rendered = render_mutator_prompt("How to make a cake?").encode("utf-8")
    has_line = b"\nOnly give the mutated instruction in a list order.\n" in golden
    record(9, rendered == golden and has_line, f"rendered prompt {len(rendered)} bytes, golden {len(golden)} bytes, byte-identical={rendered == golden}")


def test_10_end_to_end(record, tmp_path, monkeypatch, unused_port):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"mutation_cycles": 2, "mutations_per_cycle": 3, "replacement_period": 4, "top_k": 2, "max_new_tokens": 16}))
    codes = {}
    with serve_mock(mock="count-A") as server:
        monkeypatch.setenv("GENERATION_URL", server.url)
        monkeypatch.setenv("REWARD_URL", server.url)
        codes["run"] = main(["run", "darwin", "--config", str(config), "--prompt", "hi", "--out", str(tmp_path / "runs"), "--seed", "10"])
    report_path = tmp_path / "metrics.json"
    codes["analyze"] = main(["analyze", str(tmp_path / "runs" / "*.trace.jsonl"), "--out", str(report_path)])
    try:
        jsonschema.validate(json.loads(report_path.read_text()), REPORT_SCHEMA)
        schema_ok = True
    except (jsonschema.ValidationError, OSError):
        schema_ok = False
    codes["empty glob"] = main(["analyze", str(tmp_path / "none" / "*.jsonl")])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"top_k": 9, "mutations_per_cycle": 2}))
    codes["bad config"] = main(["run", "darwin", "--config", str(bad), "--prompt", "hi", "--out", str(tmp_path / "x")])
    monkeypatch.setenv("GENERATION_URL", f"http://127.0.0.1:{unused_port}")
    monkeypatch.setenv("REWARD_URL", f"http://127.0.0.1:{unused_port}")
    codes["unreachable"] = main(["run", "darwin", "--config", str(config), "--prompt", "hi", "--out", str(tmp_path / "y"), "--seed", "1"])
    expected = {"run": 0, "analyze": 0, "empty glob": 1, "bad config": 1, "unreachable": 2}
    record(10, schema_ok and codes == expected, f"report schema-valid={schema_ok}, exit codes {codes}")
