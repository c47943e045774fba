"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 policy endpoint
unavailable, 3 finished with per-task failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .config import FIELDS, RunConfig, resolve
from .data_prep import (
    DEFAULT_PSG_RATIO,
    CorpusCounts,
    build_psg_corpus,
    build_sft_corpus,
    collect_failures,
    mix_corpora,
    write_jsonl,
)
from .errors import ConfigError, NotADatabase, PolicyUnavailable, SqlSearchError
from .evaluate import InferenceSettings, lambda_sweep, read_json, run_inference, score_ex, write_json
from .policy import Policy, RemotePolicy, ScriptedPolicy
from .schema_env import BLIND, QueryTask, SqlEnv, introspect_schema, load_tasks, resolve_db_path
from .search import greedy_decode, run_mcts

EXIT_OK, EXIT_CONFIG, EXIT_SERVICE, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("sqlsearch")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("search configuration (flags > env > config file > defaults)")
    g.add_argument("--config", type=Path, help="JSON config file")
    g.add_argument("--preset", choices=["spider", "bird"])
    g.add_argument("--rollouts", type=int)
    g.add_argument("--beam-width", type=int)
    g.add_argument("--top-d", type=int)
    g.add_argument("--max-depth", type=int)
    g.add_argument("--exploration-weight", type=float)
    g.add_argument("--delta", type=float)
    g.add_argument("--similarity-threshold", type=float)
    g.add_argument("--reward-mode", choices=["oracle", "blind"])
    g.add_argument("--early-stop", dest="early_stop", action="store_const", const=True)
    g.add_argument("--no-early-stop", dest="early_stop", action="store_const", const=False)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--max-fragment-tokens", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--prune", dest="prune", action="store_const", const=True)
    g.add_argument("--no-prune", dest="prune", action="store_const", const=False)
    g.add_argument("--prune-lambda", type=float)
    g.add_argument("--prune-t0", type=int)
    g.add_argument("--samples", type=int, help="sampled values per column in the prompt")
    g.add_argument("--timeout-ms", type=float)
    g.add_argument("--workers", type=int)
    g.add_argument("--endpoint", help="completion endpoint URL (env SQLO1_ENDPOINT)")
    g.add_argument("--api-key", help="endpoint credential (env SQLO1_API_KEY)")
    g.add_argument("--model")
    g.add_argument("--max-in-flight", type=int)
    g.add_argument("--native-beam", dest="native_beam", action="store_const", const=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--scripted", type=Path, help="scripted-policy trie JSON instead of an endpoint")


def _run_config(args) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in FIELDS}
    return resolve(flags, getattr(args, "config", None))


def _policy(args, cfg: RunConfig) -> Policy:
    if getattr(args, "scripted", None):
        try:
            return ScriptedPolicy.from_file(args.scripted)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load scripted policy: {exc}") from exc
    if not cfg.endpoint:
        raise ConfigError("no policy: pass --scripted or set --endpoint / SQLO1_ENDPOINT")
    return RemotePolicy(cfg.endpoint, cfg.api_key, cfg.model, max_in_flight=cfg.max_in_flight,
                        native_beam=cfg.native_beam, seed=cfg.seed)


def _settings(cfg: RunConfig) -> InferenceSettings:
    return InferenceSettings(cfg.search, cfg.policy, cfg.pruning, cfg.samples, cfg.timeout_ms)


def cmd_introspect(args) -> int:
    schema = introspect_schema(args.db, args.samples)
    print(json.dumps(schema.to_dict(), indent=2, ensure_ascii=False))
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = _run_config(args)
    if not args.gold and cfg.reward_mode == "oracle":
        if cfg.sources["reward_mode"] != "default":
            raise ConfigError("oracle reward mode needs --gold")
        cfg.values["reward_mode"] = BLIND
    policy = _policy(args, cfg)
    schema = introspect_schema(args.db, cfg.samples)
    task = QueryTask("cli", args.question, schema.db_id, args.gold, args.evidence)
    with SqlEnv(args.db, cfg.timeout_ms) as env:
        result = run_mcts(task, schema, policy, env, cfg.search, cfg.policy, cfg.pruning)
    print(result.final_sql.replace("\n", " ").strip())
    record = result.to_record(task)
    if args.json:
        print(json.dumps(record), file=sys.stderr)
    else:
        print(f"leaf_q={result.leaf_q:.4f} exec_reward={result.exec_reward} "
              f"rollouts={result.stats.rollouts_used} nodes={result.stats.nodes_created} "
              f"elapsed_ms={result.stats.elapsed_ms:.1f}", file=sys.stderr)
    return EXIT_OK


def _batch_exit(records: Sequence[dict]) -> int:
    failures = [r for r in records if r.get("failure")]
    if not failures:
        return EXIT_OK
    if len(failures) == len(records) and all("policy unavailable" in r["failure"] for r in failures):
        return EXIT_SERVICE
    return EXIT_PARTIAL


def cmd_batch(args) -> int:
    cfg = _run_config(args)
    policy = _policy(args, cfg)
    tasks = _load_tasks(args.tasks)
    start = time.monotonic()
    records = run_inference(tasks, args.db_dir, policy, _settings(cfg), cfg.workers)
    wall = time.monotonic() - start
    write_json(records, args.out)
    failed = sum(1 for r in records if r.get("failure"))
    print(f"{len(records)} records written to {args.out} ({failed} failed) in {wall:.2f}s")
    return _batch_exit(records)


def cmd_eval(args) -> int:
    tasks = _load_tasks(args.tasks)
    predictions = read_json(args.predictions)
    report = score_ex(predictions, tasks, args.db_dir)
    if args.out:
        write_json(report.to_dict(), args.out)
    print(f"EX: {report.ex:.4f}")
    print(report.summary())
    return EXIT_OK


def cmd_prepare(args) -> int:
    tasks = _load_tasks(args.tasks)
    databases = {}
    for db_id in sorted({t.db_id for t in tasks}):
        try:
            databases[db_id] = resolve_db_path(args.db_dir, db_id)
        except FileNotFoundError as exc:
            log.warning("%s", exc)
    out = Path(args.out_dir)
    cfg = _run_config(args)

    if args.predictions:
        predictions = read_json(args.predictions)
    else:
        policy = _policy(args, cfg)
        predictions = []
        schemas = {}
        for task in tasks:
            if task.db_id not in databases:
                predictions.append({"id": task.id, "predicted_sql": "", "failure": "database"})
                continue
            if task.db_id not in schemas:
                schemas[task.db_id] = introspect_schema(databases[task.db_id], cfg.samples)
            sql = greedy_decode(task, schemas[task.db_id], policy, cfg.search.max_depth, cfg.policy)
            predictions.append({"id": task.id, "predicted_sql": sql})

    sft_counts, psg_counts = CorpusCounts(), CorpusCounts()
    sft = list(build_sft_corpus(tasks, databases, cfg.samples, sft_counts))
    failures = collect_failures(predictions, tasks, databases)
    psg = list(build_psg_corpus(failures, databases, args.sample_per_query, cfg.samples, counts=psg_counts))
    mixed = mix_corpora(sft, psg, args.psg_ratio)

    n_sft = write_jsonl(sft, out / "sft.jsonl")
    n_psg = write_jsonl(psg, out / "psg.jsonl")
    n_mix = write_jsonl(mixed, out / "mixed.jsonl")
    summary = {
        "tasks": len(tasks),
        "sft": n_sft,
        "sft_skipped": sft_counts.skipped,
        "failures": len(failures),
        "psg": n_psg,
        "psg_skipped": psg_counts.skipped,
        "mixed": n_mix,
        "mixed_psg_fraction": (n_mix - n_sft) / n_mix if n_mix else 0.0,
    }
    write_json(summary, out / "summary.json")
    for key, value in summary.items():
        print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    policy = _policy(args, cfg)
    tasks = _load_tasks(args.tasks)
    lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    rows = lambda_sweep(tasks, args.db_dir, policy, _settings(cfg), lambdas, cfg.workers)
    print(f"{'lambda':>7} {'EX':>7} {'mean_ms':>9} {'pruned':>7} {'nodes':>6} {'rollouts':>8}")
    for r in rows:
        print(f"{r['lambda']:>7.2f} {r['ex']:>7.4f} {r['mean_time_ms']:>9.2f} "
              f"{r['prune_rate']:>7.2%} {r['nodes_created']:>6d} {r['rollouts_used']:>8d}")
    if args.out:
        write_json(rows, args.out)
    return EXIT_OK


def _load_tasks(path) -> list[QueryTask]:
    try:
        return load_tasks(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read task file {path}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqlsearch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("introspect", help="print a database schema as JSON")
    p.add_argument("db", type=Path)
    p.add_argument("--samples", type=int, default=3)
    p.set_defaults(func=cmd_introspect)

    p = sub.add_parser("search", help="search for one question's SQL")
    p.add_argument("question")
    p.add_argument("--db", type=Path, required=True)
    p.add_argument("--evidence")
    p.add_argument("--gold", help="gold SQL (enables oracle rewards and early stop)")
    p.add_argument("--json", action="store_true", help="machine-readable stats on stderr")
    _add_run_options(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("batch", help="run search over a task file")
    p.add_argument("--tasks", type=Path, required=True)
    p.add_argument("--db-dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_run_options(p)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("eval", help="score predictions by execution accuracy")
    p.add_argument("--tasks", type=Path, required=True)
    p.add_argument("--db-dir", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prepare", help="build fine-tuning corpora")
    p.add_argument("--tasks", type=Path, required=True)
    p.add_argument("--db-dir", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--predictions", type=Path, help="prior predictions used to find failures")
    p.add_argument("--sample-per-query", type=int)
    p.add_argument("--psg-ratio", type=float, default=DEFAULT_PSG_RATIO)
    _add_run_options(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("sweep", help="run a task suite at several pruning lambdas")
    p.add_argument("--tasks", type=Path, required=True)
    p.add_argument("--db-dir", type=Path, required=True)
    p.add_argument("--lambdas", default="1.0,0.9,0.8,0.0")
    p.add_argument("--out", type=Path)
    _add_run_options(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PolicyUnavailable as exc:
        print(f"error: policy unavailable: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (ConfigError, FileNotFoundError, NotADatabase, SqlSearchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
