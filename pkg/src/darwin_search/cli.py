"""darwin-search command line.

Exit codes: 0 success, 1 invalid config or input, 2 backend unreachable,
3 partial run (the trace written so far is kept).
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import secrets
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import analysis
from .backends.base import BackendError
from .backends.http import backends_from_env
from .backends.mocks import MOCK_SUITES, mock_suite
from .backends.prompts import LLMMutator
from .core import ConfigError, SearchConfig, load_config, new_config
from .search import STRATEGIES, Backends, SearchAborted, run_strategy
from .trace import TraceFormatError, TraceWriter, file_hash, read_trace

log = logging.getLogger("darwin_search")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_PARTIAL = 0, 1, 2, 3


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve_config(path: str | None, seed: int | None) -> tuple[SearchConfig, bool]:
    """Config from ``path`` (or defaults) and whether a fresh seed was drawn."""
    config = load_config(path) if path else new_config()
    if seed is not None:
        return config.replace(rng_seed=seed), False
    if path and "rng_seed" in json.loads(Path(path).read_text(encoding="utf-8")):
        return config, False
    return config.replace(rng_seed=secrets.randbits(63)), True


@dataclass
class _BackendSpec:
    mock: str | None

    def build(self, config: SearchConfig) -> tuple[Backends, dict[str, str]]:
        if self.mock:
            suite = mock_suite(self.mock)
            desc = {"generation": f"mock:{suite.name}", "reward": f"mock:{suite.name}", "mutator": f"mock:{suite.name}"}
            return Backends(suite.generator, suite.reward, suite.mutator), desc
        gen, rew = backends_from_env()
        mutator = LLMMutator(gen, temperature=config.temperature, sampling_top_k=config.sampling_top_k, seed=config.rng_seed)
        return Backends(gen, rew, mutator), {"generation": gen.describe(), "reward": rew.describe(), "mutator": "llm"}


def _preflight(spec: _BackendSpec, config: SearchConfig) -> str | None:
    """Error message if the configured backends cannot be reached."""
    try:
        backends, desc = spec.build(config)
    except BackendError as exc:
        return str(exc)
    if not backends.generator.health():
        return f"generation backend unreachable: {desc['generation']}"
    if not backends.reward.health():
        return f"reward backend unreachable: {desc['reward']}"
    return None


def _read_prompts(args) -> list[str]:
    if args.prompt is not None:
        return [args.prompt]
    lines = Path(args.prompts).read_text(encoding="utf-8").splitlines()
    return [line for line in lines if line.strip()]


def _run_one(index: int, prompt: str, strategy: str, config: SearchConfig, spec: _BackendSpec, out: Path) -> tuple[int, str]:
    backends, desc = spec.build(config)
    started = _now()
    stem = f"{index:04d}-{strategy}"
    trace_path = out / f"{stem}.trace.jsonl"
    answer_path = out / f"{stem}.answer.txt"
    status, code, trace = "complete", EXIT_OK, None
    with TraceWriter(trace_path) as writer:
        try:
            _, trace = run_strategy(strategy, backends, prompt, config, sink=writer)
        except SearchAborted as exc:
            status, code, trace = "partial", EXIT_PARTIAL, exc.trace
            log.error("prompt %d: %s", index, exc)
    answer = trace.final_answer.text if trace.final_answer else None
    if answer is not None:
        answer_path.write_text(answer, encoding="utf-8")
    manifest = {
        "run_id": trace.run_id,
        "strategy": strategy,
        "status": status,
        "prompt": prompt,
        "started_at": started,
        "finished_at": _now(),
        "config": config.to_dict(),
        "backends": desc,
        "trace_file": trace_path.name,
        "trace_hash": file_hash(trace_path),
        "answer_file": answer_path.name if answer is not None else None,
        "final_reward": trace.final_reward,
        "backend_call_counts": trace.backend_call_counts.to_dict(),
    }
    manifest_path = out / f"{stem}.manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary = f"[{index}] {trace.run_id} {status} final_reward={trace.final_reward} answer={answer_path if answer is not None else '-'} trace={trace_path}"
    return code, summary


def verify_manifest(path: str | Path) -> bool:
    """True when the manifest's trace hash matches the trace file bytes."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    return file_hash(path.parent / manifest["trace_file"]) == manifest["trace_hash"]


def cmd_run(args) -> int:
    strategy = args.strategy_opt or args.strategy
    if strategy is None:
        print("error: a strategy is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config, fresh = _resolve_config(args.config, args.seed)
    except (ConfigError, OSError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if fresh:
        print(f"seed: {config.rng_seed}")
    try:
        prompts = _read_prompts(args)
    except OSError as exc:
        print(f"error: cannot read prompts: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not prompts:
        print("error: no prompts given", file=sys.stderr)
        return EXIT_CONFIG
    spec = _BackendSpec(args.mock)
    problem = _preflight(spec, config)
    if problem:
        print(f"error: {problem}", file=sys.stderr)
        return EXIT_BACKEND
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        futures = [pool.submit(_run_one, i, p, strategy, config, spec, out) for i, p in enumerate(prompts)]
        results = [f.result() for f in futures]
    for _, summary in results:
        print(summary)
    return max(code for code, _ in results)


def cmd_analyze(args) -> int:
    paths = sorted({p for pattern in args.traces for p in glob.glob(pattern)})
    if not paths:
        print("error: no traces matched", file=sys.stderr)
        return EXIT_CONFIG
    try:
        traces = [read_trace(p) for p in paths]
    except (TraceFormatError, OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    try:
        report = analysis.build_report(
            traces, names=[Path(p).name for p in paths], metrics=metrics, k=args.k, p=args.p, window=args.window
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    if args.csv_dir:
        csv_dir = Path(args.csv_dir)
        csv_dir.mkdir(parents=True, exist_ok=True)
        for name, series in report["metrics"].items():
            analysis.write_csv(series, csv_dir / f"{name}.csv")
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        config = load_config(args.config) if args.config else new_config()
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(config.to_json())
    spec = _BackendSpec(args.mock)
    problem = _preflight(spec, config)
    if problem:
        print(f"error: {problem}", file=sys.stderr)
        return EXIT_BACKEND
    print("backends: ok" + (f" (mock:{args.mock})" if args.mock else ""))
    return EXIT_OK


def cmd_verify(args) -> int:
    ok = True
    for path in args.manifests:
        good = verify_manifest(path)
        ok &= good
        print(f"{path}: {'ok' if good else 'HASH MISMATCH'}")
    return EXIT_OK if ok else EXIT_CONFIG


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(args.mock), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darwin-search", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a search strategy on one or more prompts")
    run.add_argument("strategy", nargs="?", choices=STRATEGIES)
    run.add_argument("--strategy", dest="strategy_opt", choices=STRATEGIES)
    run.add_argument("--config", help="config JSON (defaults apply when omitted)")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--prompt")
    src.add_argument("--prompts", help="file with one prompt per line")
    run.add_argument("--mock", choices=sorted(MOCK_SUITES), help="use in-process mock backends")
    run.add_argument("--out", default="runs")
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int, default=1)
    run.set_defaults(func=cmd_run)

    an = sub.add_parser("analyze", help="beam-dynamics metrics over trace files")
    an.add_argument("traces", nargs="+", help="trace file glob(s)")
    an.add_argument("--metrics", default=",".join(analysis.METRICS))
    an.add_argument("--k", type=int, default=3)
    an.add_argument("--p", type=float, default=0.9)
    an.add_argument("--window", type=int, default=5)
    an.add_argument("--out", default="metrics.json", help="report path, '-' for stdout")
    an.add_argument("--csv-dir")
    an.set_defaults(func=cmd_analyze)

    chk = sub.add_parser("check", help="validate a config and reach the backends")
    chk.add_argument("--config")
    chk.add_argument("--mock", choices=sorted(MOCK_SUITES))
    chk.set_defaults(func=cmd_check)

    ver = sub.add_parser("verify", help="check run manifests against their trace files")
    ver.add_argument("manifests", nargs="+")
    ver.set_defaults(func=cmd_verify)

    srv = sub.add_parser("serve", help="serve the mock generation/reward protocols over HTTP")
    srv.add_argument("--mock", choices=sorted(MOCK_SUITES), default="count-A")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    srv.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
