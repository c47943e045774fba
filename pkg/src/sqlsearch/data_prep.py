"""Cold-start fine-tuning corpora.

Two record kinds are produced: schema-aware pairs (context -> gold SQL) for
every task, and progressive-completion pairs (context + SQL prefix ->
remainder) for tasks the base model got wrong.  Both are written as
``{"prompt", "completion"}`` JSONL; training happens elsewhere.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional

from .errors import MissingGold, TokenizeError, UnknownTaskId
from .fragmenter import DEFAULT_BOUNDARY_SET, BoundarySet, truncate_for_psg
from .schema_env import DatabaseSchema, QueryTask, SqlEnv, introspect_schema, serialize_context

log = logging.getLogger(__name__)

DEFAULT_PSG_RATIO = 0.227


@dataclass(frozen=True)
class SftRecord:
    prompt: str
    completion: str
    source_task_id: str


@dataclass(frozen=True)
class PsgRecord:
    prompt: str
    completion: str
    source_task_id: str
    cut_index: int
    prefix: str = ""


@dataclass
class CorpusCounts:
    seen: int = 0
    emitted: int = 0
    skipped: int = 0


def _sort_key(task: QueryTask):
    return (task.id.zfill(12) if task.id.isdigit() else task.id)


class _SchemaCache:
    def __init__(self, databases: Mapping[str, Path], samples: int):
        self.databases = databases
        self.samples = samples
        self._cache: dict[str, DatabaseSchema] = {}

    def get(self, db_id: str) -> DatabaseSchema:
        if db_id not in self._cache:
            self._cache[db_id] = introspect_schema(self.databases[db_id], self.samples)
        return self._cache[db_id]


def build_sft_corpus(tasks: Iterable[QueryTask], databases: Mapping[str, Path], samples: int = 3,
                     counts: Optional[CorpusCounts] = None) -> Iterator[SftRecord]:
    """Yield one record per task whose gold SQL executes cleanly, ordered by task id."""
    counts = counts if counts is not None else CorpusCounts()
    schemas = _SchemaCache(databases, samples)
    envs: dict[str, SqlEnv] = {}
    try:
        for task in sorted(tasks, key=_sort_key):
            counts.seen += 1
            if not task.gold_sql:
                raise MissingGold(f"task {task.id} has no gold SQL")
            if task.db_id not in databases:
                log.warning("skipping %s: unknown database %s", task.id, task.db_id)
                counts.skipped += 1
                continue
            env = envs.setdefault(task.db_id, SqlEnv(databases[task.db_id]))
            outcome = env.execute(task.gold_sql)
            if not outcome.ok:
                log.warning("skipping %s: gold SQL fails (%s)", task.id, outcome.error_message)
                counts.skipped += 1
                continue
            context = serialize_context(schemas.get(task.db_id), task.question, task.evidence)
            counts.emitted += 1
            yield SftRecord(context, task.gold_sql, task.id)
    finally:
        for env in envs.values():
            env.close()


def collect_failures(predictions: Iterable[dict], tasks: Iterable[QueryTask],
                     databases: Mapping[str, Path]) -> list[QueryTask]:
    """Tasks whose prediction does not earn the +1 execution reward against gold."""
    by_id = {t.id: t for t in tasks}
    failures = []
    envs: dict[str, SqlEnv] = {}
    try:
        for rec in predictions:
            tid = str(rec["id"])
            if tid not in by_id:
                raise UnknownTaskId(tid)
            task = by_id[tid]
            if not task.gold_sql:
                raise MissingGold(f"task {tid} has no gold SQL")
            pred = rec.get("predicted_sql") or ""
            if rec.get("failure") or not pred.strip() or task.db_id not in databases:
                failures.append(task)
                continue
            env = envs.setdefault(task.db_id, SqlEnv(databases[task.db_id]))
            if env.reward(pred, task.gold_sql) != 1:
                failures.append(task)
    finally:
        for env in envs.values():
            env.close()
    return failures


def build_psg_corpus(failure_tasks: Iterable[QueryTask], databases: Mapping[str, Path],
                     sample_per_query: Optional[int] = None, samples: int = 3,
                     boundaries: BoundarySet = DEFAULT_BOUNDARY_SET,
                     counts: Optional[CorpusCounts] = None) -> Iterator[PsgRecord]:
    """Yield prefix-completion records, longest prefixes first within each task."""
    counts = counts if counts is not None else CorpusCounts()
    schemas = _SchemaCache(databases, samples)
    for task in sorted(failure_tasks, key=_sort_key):
        counts.seen += 1
        if not task.gold_sql:
            raise MissingGold(f"task {task.id} has no gold SQL")
        try:
            pairs = truncate_for_psg(task.gold_sql, boundaries)
        except TokenizeError as exc:
            log.warning("skipping %s: %s", task.id, exc)
            counts.skipped += 1
            continue
        if task.db_id not in databases:
            log.warning("skipping %s: unknown database %s", task.id, task.db_id)
            counts.skipped += 1
            continue
        context = serialize_context(schemas.get(task.db_id), task.question, task.evidence)
        indexed = list(enumerate(pairs))[::-1]
        if sample_per_query is not None:
            indexed = indexed[:sample_per_query]
        for cut_index, (prefix, completion) in indexed:
            if prefix + completion != task.gold_sql:
                log.warning("dropping %s cut %d: reassembly mismatch", task.id, cut_index)
                counts.skipped += 1
                continue
            counts.emitted += 1
            yield PsgRecord(context + prefix, completion, task.id, cut_index, prefix)


def psg_target_count(n_sft: int, ratio: float) -> int:
    """PSG records needed so they make up ``ratio`` of the combined corpus."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("psg ratio must lie in [0, 1)")
    return int(math.floor(ratio * n_sft / (1.0 - ratio) + 0.5))


def mix_corpora(sft: list, psg: list, ratio: float = DEFAULT_PSG_RATIO) -> list:
    """SFT records followed by an evenly strided PSG subsample at the target ratio.

    When fewer PSG records exist than the ratio asks for, all are kept.
    """
    target = psg_target_count(len(sft), ratio)
    if target < len(psg):
        step = len(psg) / target if target else 0
        psg = [psg[int(i * step)] for i in range(target)]
    return list(sft) + list(psg)


def write_jsonl(records: Iterable, path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps({"prompt": rec.prompt, "completion": rec.completion}, ensure_ascii=False))
            fh.write("\n")
            n += 1
    return n
