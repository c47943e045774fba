"""Database schemas, schema-aware prompt context and sandboxed SQL execution."""

from __future__ import annotations

import json
import sqlite3
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

from .errors import ComparisonOnError, MissingGold, NotADatabase
from .fragmenter import has_top_level_order_by

TYPE_ENUM = ("TEXT", "NUMBER", "DATE", "BOOLEAN", "OTHER")
DEFAULT_SAMPLES = 3
DEFAULT_TIMEOUT_MS = 30_000

QUESTION_HEADER = "-- Question: "
EVIDENCE_HEADER = "-- Evidence: "
SQL_MARKER = "-- SQL:\n"

STATUS_ERROR, STATUS_EMPTY, STATUS_ROWS = "error", "empty", "rows"
ORACLE, BLIND = "oracle", "blind"


class _Null:
    """Sentinel for SQL NULL that is hashable and equal only to itself."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NULL"

    def __reduce__(self):
        return (_Null, ())


NULL = _Null()


@dataclass(frozen=True)
class Column:
    name: str
    declared_type: str
    sample_values: tuple = ()


@dataclass(frozen=True)
class ForeignKey:
    column: str
    ref_table: str
    ref_column: str


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[Column, ...]
    primary_key: tuple[str, ...] = ()
    foreign_keys: tuple[ForeignKey, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(n.lower() for n in names)) != len(names):
            raise ValueError(f"duplicate column in table {self.name}")
        lowered = {n.lower() for n in names}
        for pk in self.primary_key:
            if pk.lower() not in lowered:
                raise ValueError(f"primary key column {pk!r} not in table {self.name}")

    def column(self, name: str) -> Optional[Column]:
        for col in self.columns:
            if col.name.lower() == name.lower():
                return col
        return None


@dataclass(frozen=True)
class DatabaseSchema:
    db_id: str
    tables: tuple[TableDef, ...] = ()

    def __post_init__(self):
        names = [t.name.lower() for t in self.tables]
        if len(set(names)) != len(names):
            raise ValueError("duplicate table name in schema")
        for table in self.tables:
            for fk in table.foreign_keys:
                ref = self.table(fk.ref_table)
                if ref is None or ref.column(fk.ref_column) is None:
                    raise ValueError(
                        f"foreign key {table.name}.{fk.column} -> {fk.ref_table}.{fk.ref_column} is dangling"
                    )

    def table(self, name: str) -> Optional[TableDef]:
        for t in self.tables:
            if t.name.lower() == name.lower():
                return t
        return None

    def to_dict(self) -> dict:
        return {
            "db_id": self.db_id,
            "tables": [
                {
                    "name": t.name,
                    "columns": [
                        {"name": c.name, "type": c.declared_type, "samples": [_jsonable(v) for v in c.sample_values]}
                        for c in t.columns
                    ],
                    "primary_key": list(t.primary_key),
                    "foreign_keys": [
                        {"column": fk.column, "ref_table": fk.ref_table, "ref_column": fk.ref_column}
                        for fk in t.foreign_keys
                    ],
                }
                for t in self.tables
            ],
        }


def _jsonable(v: Any) -> Any:
    if isinstance(v, bytes):
        return v.hex()
    return v


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str
    rows: tuple = ()
    elapsed: float = 0.0
    error_message: Optional[str] = None

    def __post_init__(self):
        if self.status not in (STATUS_ERROR, STATUS_EMPTY, STATUS_ROWS):
            raise ValueError(f"bad status {self.status!r}")
        if (self.status == STATUS_ROWS) != bool(self.rows):
            raise ValueError("status 'rows' must coincide with a nonempty result")

    @property
    def ok(self) -> bool:
        return self.status != STATUS_ERROR


@dataclass
class QueryTask:
    id: str
    question: str
    db_id: str
    gold_sql: Optional[str] = None
    evidence: Optional[str] = None

    @classmethod
    def from_record(cls, rec: dict, index: int = 0) -> "QueryTask":
        return cls(
            id=str(rec.get("id", rec.get("question_id", index))),
            question=rec["question"],
            db_id=rec["db_id"],
            gold_sql=rec.get("query", rec.get("SQL")),
            evidence=rec.get("evidence") or None,
        )

    def to_record(self) -> dict:
        rec = {"id": self.id, "question": self.question, "db_id": self.db_id}
        if self.gold_sql is not None:
            rec["query"] = self.gold_sql
        if self.evidence:
            rec["evidence"] = self.evidence
        return rec


def load_tasks(path) -> list[QueryTask]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return [QueryTask.from_record(rec, i) for i, rec in enumerate(data)]


def resolve_db_path(db_dir, db_id: str) -> Path:
    """Find ``db_id`` in ``db_dir`` using either Spider/Bird nesting or a flat layout."""
    root = Path(db_dir)
    for candidate in (
        root / db_id / f"{db_id}.sqlite",
        root / f"{db_id}.sqlite",
        root / f"{db_id}.db",
    ):
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"no database file for db_id {db_id!r} under {root}")


def map_declared_type(declared: str) -> str:
    """Collapse a declared column type into the five-way type enum.

    Follows SQLite's affinity precedence (INT, then CHAR/CLOB/TEXT, then BLOB,
    then REAL/FLOA/DOUB) before the BOOLEAN and DATE refinements.
    """
    t = (declared or "").upper()
    if "INT" in t:
        return "NUMBER"
    if "CHAR" in t or "CLOB" in t or "TEXT" in t:
        return "TEXT"
    if "BLOB" in t or not t.strip():
        return "OTHER"
    if "REAL" in t or "FLOA" in t or "DOUB" in t:
        return "NUMBER"
    if "BOOL" in t:
        return "BOOLEAN"
    if "DATE" in t or "TIME" in t:
        return "DATE"
    if "NUM" in t or "DEC" in t:
        return "NUMBER"
    return "OTHER"


def quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def connect_readonly(db_path) -> sqlite3.Connection:
    path = Path(db_path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    conn = sqlite3.connect(f"{path.resolve().as_uri()}?mode=ro", uri=True, check_same_thread=False)
    conn.execute("PRAGMA query_only = 1")
    return conn


def introspect_schema(db_path, samples_per_column: int = DEFAULT_SAMPLES) -> DatabaseSchema:
    path = Path(db_path)
    conn = connect_readonly(path)
    try:
        try:
            names = [r[0] for r in conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
            )]
        except sqlite3.DatabaseError as exc:
            raise NotADatabase(f"{path}: {exc}") from exc
        tables = [_introspect_table(conn, name, samples_per_column) for name in names]
    finally:
        conn.close()
    return DatabaseSchema(db_id=path.stem, tables=tuple(_resolve_fk_targets(tables)))


def _introspect_table(conn: sqlite3.Connection, name: str, samples: int) -> TableDef:
    info = conn.execute(f"PRAGMA table_info({quote_ident(name)})").fetchall()
    # (cid, name, type, notnull, dflt, pk)
    pk = tuple(r[1] for r in sorted((r for r in info if r[5]), key=lambda r: r[5]))
    order = ", ".join(quote_ident(c) for c in pk) if pk else "rowid"
    columns = []
    for r in info:
        values = _sample_values(conn, name, r[1], order, samples) if samples > 0 else ()
        columns.append(Column(r[1], map_declared_type(r[2]), values))
    fks = []
    for r in conn.execute(f"PRAGMA foreign_key_list({quote_ident(name)})").fetchall():
        # (id, seq, table, from, to, on_update, on_delete, match)
        fks.append(ForeignKey(r[3], r[2], r[4] or ""))
    return TableDef(name, tuple(columns), pk, tuple(fks))


def _sample_values(conn, table: str, column: str, order: str, k: int) -> tuple:
    seen: list = []
    try:
        cur = conn.execute(
            f"SELECT {quote_ident(column)} FROM {quote_ident(table)} "
            f"WHERE {quote_ident(column)} IS NOT NULL ORDER BY {order}"
        )
    except sqlite3.OperationalError:
        # WITHOUT ROWID tables lacking a declared key
        cur = conn.execute(
            f"SELECT {quote_ident(column)} FROM {quote_ident(table)} WHERE {quote_ident(column)} IS NOT NULL"
        )
    for (value,) in cur:
        if value not in seen:
            seen.append(value)
            if len(seen) >= k:
                break
    return tuple(seen)


def _resolve_fk_targets(tables: list[TableDef]) -> list[TableDef]:
    """Fill in implicit FK targets (``REFERENCES t`` without a column) with t's primary key."""
    by_name = {t.name.lower(): t for t in tables}
    out = []
    for t in tables:
        fks = []
        for fk in t.foreign_keys:
            ref_col = fk.ref_column
            ref = by_name.get(fk.ref_table.lower())
            if not ref_col and ref is not None and ref.primary_key:
                ref_col = ref.primary_key[0]
            if ref is not None:
                fks.append(ForeignKey(fk.column, ref.name, ref_col))
        out.append(TableDef(t.name, t.columns, t.primary_key, tuple(fks)))
    return out


def _render_literal(v: Any) -> str:
    if isinstance(v, str):
        return "'" + v.replace("'", "''") + "'"
    if isinstance(v, bytes):
        return "x'" + v.hex() + "'"
    return repr(v)


def serialize_context(schema: DatabaseSchema, question: str, evidence: Optional[str] = None) -> str:
    """Render the schema-aware prompt that roots every search tree."""
    lines: list[str] = []
    for table in schema.tables:
        single_pk = table.primary_key[0] if len(table.primary_key) == 1 else None
        body = []
        for col in table.columns:
            decl = f"  {col.name} {col.declared_type}"
            if single_pk is not None and col.name == single_pk:
                decl += " PRIMARY KEY"
            body.append(decl)
        if len(table.primary_key) > 1:
            body.append(f"  PRIMARY KEY ({', '.join(table.primary_key)})")
        for fk in table.foreign_keys:
            body.append(f"  FOREIGN KEY ({fk.column}) REFERENCES {fk.ref_table}({fk.ref_column})")
        lines.append(f"CREATE TABLE {table.name} (")
        lines.append(",\n".join(body))
        lines.append(");")
        samples = [
            f"{c.name}: {', '.join(_render_literal(v) for v in c.sample_values)}"
            for c in table.columns if c.sample_values
        ]
        if samples:
            lines.append("-- Sample values: " + "; ".join(samples))
        lines.append("")
    if evidence:
        lines.append(EVIDENCE_HEADER + evidence.replace("\n", " "))
    lines.append(QUESTION_HEADER + question.replace("\n", " "))
    return "\n".join(lines) + "\n" + SQL_MARKER


def _normalize_cell(v: Any) -> Any:
    if v is None:
        return NULL
    if isinstance(v, float):
        r = round(v, 6)
        if r == 0:
            return 0
        if r.is_integer():
            return int(r)
        return r
    return v


def execute_sql(db_path, sql: str, timeout: float = DEFAULT_TIMEOUT_MS,
                conn: Optional[sqlite3.Connection] = None) -> ExecutionOutcome:
    """Run ``sql`` read-only with a wall-clock budget of ``timeout`` milliseconds."""
    start = time.monotonic()
    own = conn is None
    try:
        if own:
            conn = connect_readonly(db_path)
    except (FileNotFoundError, sqlite3.Error) as exc:
        return ExecutionOutcome(STATUS_ERROR, error_message=str(exc))

    deadline = start + timeout / 1000.0
    timed_out = False

    def _watchdog():
        nonlocal timed_out
        if time.monotonic() > deadline:
            timed_out = True
            return 1
        return 0

    conn.set_progress_handler(_watchdog, 1000)
    try:
        cur = conn.execute(sql)
        raw = cur.fetchall()
    except (sqlite3.Error, sqlite3.Warning, ValueError, OverflowError) as exc:
        elapsed = (time.monotonic() - start) * 1000.0
        return ExecutionOutcome(STATUS_ERROR, elapsed=elapsed,
                                error_message="timeout" if timed_out else str(exc))
    finally:
        conn.set_progress_handler(None, 0)
        if own:
            conn.close()
    elapsed = (time.monotonic() - start) * 1000.0
    rows = tuple(tuple(_normalize_cell(v) for v in r) for r in raw)
    return ExecutionOutcome(STATUS_ROWS if rows else STATUS_EMPTY, rows, elapsed)


def compare_results(pred: ExecutionOutcome, gold: ExecutionOutcome, order_sensitive: bool = False) -> bool:
    if not pred.ok or not gold.ok:
        raise ComparisonOnError("cannot compare an errored execution")
    if order_sensitive:
        return list(pred.rows) == list(gold.rows)
    return Counter(pred.rows) == Counter(gold.rows)


def execution_reward(db_path, pred_sql: str, gold_sql: Optional[str] = None, mode: str = ORACLE,
                     timeout: float = DEFAULT_TIMEOUT_MS) -> int:
    return SqlEnv(db_path, timeout).reward(pred_sql, gold_sql, mode)


class SqlEnv:
    """Execution environment for one database, owned by a single worker.

    Keeps one read-only connection and memoizes gold outcomes, since the same
    gold query is compared against every rollout of a search.
    """

    def __init__(self, db_path, timeout: float = DEFAULT_TIMEOUT_MS):
        self.db_path = Path(db_path)
        self.timeout = timeout
        self._conn: Optional[sqlite3.Connection] = None
        self._gold_cache: dict[str, ExecutionOutcome] = {}

    def _connection(self) -> Optional[sqlite3.Connection]:
        if self._conn is None:
            try:
                self._conn = connect_readonly(self.db_path)
            except (FileNotFoundError, sqlite3.Error):
                return None
        return self._conn

    def execute(self, sql: str) -> ExecutionOutcome:
        conn = self._connection()
        if conn is None:
            return execute_sql(self.db_path, sql, self.timeout)
        return execute_sql(self.db_path, sql, self.timeout, conn=conn)

    def gold_outcome(self, gold_sql: str) -> ExecutionOutcome:
        if gold_sql not in self._gold_cache:
            self._gold_cache[gold_sql] = self.execute(gold_sql)
        return self._gold_cache[gold_sql]

    def reward(self, pred_sql: str, gold_sql: Optional[str] = None, mode: str = ORACLE) -> int:
        if mode not in (ORACLE, BLIND):
            raise ValueError(f"unknown reward mode {mode!r}")
        if mode == ORACLE and not gold_sql:
            raise MissingGold("oracle reward needs a gold query")
        pred = self.execute(pred_sql)
        if not pred.ok:
            return -1
        if pred.status == STATUS_EMPTY or mode == BLIND:
            return 0
        gold = self.gold_outcome(gold_sql)
        if not gold.ok:
            return 0
        return 1 if compare_results(pred, gold, has_top_level_order_by(gold_sql)) else 0

    def matches(self, pred_sql: str, gold_sql: str) -> bool:
        """Execution-accuracy match, empty results included."""
        pred = self.execute(pred_sql)
        gold = self.gold_outcome(gold_sql)
        if not pred.ok or not gold.ok:
            return False
        return compare_results(pred, gold, has_top_level_order_by(gold_sql))

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def schemas_for(db_ids: Iterable[str], db_dir, samples: int = DEFAULT_SAMPLES) -> dict[str, DatabaseSchema]:
    out = {}
    for db_id in sorted(set(db_ids)):
        try:
            schema = introspect_schema(resolve_db_path(db_dir, db_id), samples)
        except (FileNotFoundError, NotADatabase):
            continue
        out[db_id] = DatabaseSchema(db_id, schema.tables)
    return out
