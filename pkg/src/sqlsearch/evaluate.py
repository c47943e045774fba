"""Batch inference over a task file and execution-accuracy scoring."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .errors import MissingGold, PolicyUnavailable, SqlSearchError
from .policy import Policy, PolicyConfig
from .pruning import PruningConfig
from .schema_env import (
    DEFAULT_SAMPLES,
    DEFAULT_TIMEOUT_MS,
    DatabaseSchema,
    QueryTask,
    SqlEnv,
    introspect_schema,
    resolve_db_path,
)
from .search import SearchConfig, run_mcts

log = logging.getLogger(__name__)


@dataclass
class InferenceSettings:
    search: SearchConfig = field(default_factory=SearchConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    pruning: Optional[PruningConfig] = None
    samples: int = DEFAULT_SAMPLES
    timeout_ms: float = DEFAULT_TIMEOUT_MS


def failure_record(task: QueryTask, reason: str) -> dict:
    return {
        "id": task.id,
        "db_id": task.db_id,
        "predicted_sql": "",
        "leaf_q": None,
        "exec_reward": None,
        "rollouts_used": 0,
        "nodes_created": 0,
        "elapsed_ms": 0.0,
        "early_stopped": False,
        "fallback": False,
        "candidates_scored": 0,
        "candidates_pruned": 0,
        "failure": reason,
    }


class _Schemas:
    """Introspect each database once; safe to share between workers."""

    def __init__(self, db_dir, samples: int):
        self.db_dir = db_dir
        self.samples = samples
        self._cache: dict[str, DatabaseSchema] = {}

    def path(self, db_id: str) -> Path:
        return resolve_db_path(self.db_dir, db_id)

    def get(self, db_id: str) -> DatabaseSchema:
        schema = self._cache.get(db_id)
        if schema is None:
            schema = introspect_schema(self.path(db_id), self.samples)
            self._cache[db_id] = schema
        return schema


def infer_one(task: QueryTask, schemas: _Schemas, policy: Policy, settings: InferenceSettings) -> dict:
    try:
        db_path = schemas.path(task.db_id)
        schema = schemas.get(task.db_id)
    except (FileNotFoundError, SqlSearchError) as exc:
        return failure_record(task, f"database: {exc}")
    search = settings.search
    if search.reward_mode == "oracle" and not task.gold_sql:
        return failure_record(task, "oracle mode needs gold SQL")
    try:
        with SqlEnv(db_path, settings.timeout_ms) as env:
            result = run_mcts(task, schema, policy, env, search, settings.policy, settings.pruning)
    except PolicyUnavailable as exc:
        return failure_record(task, f"policy unavailable: {exc}")
    return result.to_record(task)


def run_inference(tasks: Sequence[QueryTask], db_dir, policy: Policy,
                  settings: Optional[InferenceSettings] = None, workers: int = 1,
                  progress: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """One result record per task, in task order; failures are recorded, not dropped."""
    settings = settings or InferenceSettings()
    schemas = _Schemas(db_dir, settings.samples)

    def work(task: QueryTask) -> dict:
        rec = infer_one(task, schemas, policy, settings)
        if progress is not None:
            progress(rec)
        return rec

    if workers <= 1:
        return [work(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, tasks))


@dataclass
class EvalReport:
    total: int
    ex_correct: int
    errors: int
    per_task: list
    wall_time: float
    ts: Optional[float] = None

    @property
    def ex(self) -> float:
        return self.ex_correct / self.total if self.total else 0.0

    @property
    def throughput(self) -> float:
        """Tasks per minute."""
        return 60.0 * self.total / self.wall_time if self.wall_time > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "ex_correct": self.ex_correct,
            "ex": self.ex,
            "ex_undefined": self.total == 0,
            "errors": self.errors,
            "ts": self.ts,
            "wall_time": self.wall_time,
            "throughput_per_min": self.throughput,
            "per_task": self.per_task,
        }

    def summary(self) -> str:
        return (f"EX {self.ex:.4f} ({self.ex_correct}/{self.total})  errors {self.errors}  "
                f"throughput {self.throughput:.1f} tasks/min")


def score_ex(predictions: Iterable[dict], tasks: Sequence[QueryTask], db_dir,
             wall_time: Optional[float] = None, timeout_ms: float = DEFAULT_TIMEOUT_MS) -> EvalReport:
    """Execution accuracy of ``predictions`` joined to ``tasks`` by id."""
    preds = {str(p["id"]): p for p in predictions}
    for task in tasks:
        if not task.gold_sql:
            raise MissingGold(f"task {task.id} has no gold SQL")
    envs: dict[str, SqlEnv] = {}
    per_task = []
    correct = errors = 0
    elapsed_total = 0.0
    try:
        for task in tasks:
            rec = preds.get(task.id)
            pred_sql = (rec or {}).get("predicted_sql") or ""
            elapsed_total += float((rec or {}).get("elapsed_ms") or 0.0)
            ok = False
            reason = None
            if rec is None:
                reason = "missing prediction"
            elif rec.get("failure"):
                reason = rec["failure"]
            elif not pred_sql.strip():
                reason = "empty prediction"
            else:
                try:
                    env = envs.get(task.db_id)
                    if env is None:
                        env = envs[task.db_id] = SqlEnv(resolve_db_path(db_dir, task.db_id), timeout_ms)
                    outcome = env.execute(pred_sql)
                    if not outcome.ok:
                        reason = f"execution error: {outcome.error_message}"
                    else:
                        ok = env.matches(pred_sql, task.gold_sql)
                except FileNotFoundError as exc:
                    reason = f"database: {exc}"
            if reason is not None:
                errors += 1
            correct += ok
            per_task.append({"id": task.id, "db_id": task.db_id, "predicted_sql": pred_sql,
                             "correct": ok, "error": reason})
    finally:
        for env in envs.values():
            env.close()
    if wall_time is None:
        wall_time = elapsed_total / 1000.0
    return EvalReport(len(tasks), correct, errors, per_task, wall_time)


def lambda_sweep(tasks: Sequence[QueryTask], db_dir, policy: Policy, settings: InferenceSettings,
                 lambdas: Iterable[float], workers: int = 1) -> list[dict]:
    """Run the same suite at several pruning strengths and summarize each run."""
    rows = []
    for lam in lambdas:
        base = settings.pruning or PruningConfig.for_depth(settings.search.max_depth)
        run_settings = InferenceSettings(settings.search, settings.policy,
                                         PruningConfig(lam, base.t0, base.enabled),
                                         settings.samples, settings.timeout_ms)
        start = time.monotonic()
        records = run_inference(tasks, db_dir, policy, run_settings, workers)
        wall = time.monotonic() - start
        report = score_ex(records, tasks, db_dir, wall_time=wall)
        scored = sum(r["candidates_scored"] for r in records)
        pruned = sum(r["candidates_pruned"] for r in records)
        rows.append({
            "lambda": lam,
            "ex": report.ex,
            "mean_time_ms": sum(r["elapsed_ms"] for r in records) / len(records) if records else 0.0,
            "prune_rate": pruned / scored if scored else 0.0,
            "nodes_created": sum(r["nodes_created"] for r in records),
            "rollouts_used": sum(r["rollouts_used"] for r in records),
        })
    return rows


def write_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
