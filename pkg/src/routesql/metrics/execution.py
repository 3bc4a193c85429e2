"""Execution accuracy: run predicted and gold SQL read-only and compare result sets."""
from __future__ import annotations

import sqlite3
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .sqlclauses import has_top_level_order_by

REAL_TOL = 1e-6
DEFAULT_TIMEOUT = 30.0

_exec_slots = threading.BoundedSemaphore(8)


@dataclass
class QueryResult:
    status: str  # ok | sql_error | timeout
    rows: list | None = None
    ncols: int = 0
    error: str = ""


@dataclass
class ExecOutcome:
    match: bool
    pred_status: str
    gold_status: str
    row_counts: tuple[int | None, int | None]
    mismatch_detail: str = ""

    def __post_init__(self):
        if self.match and not (self.pred_status == "ok" and self.gold_status == "ok"):
            raise ValueError("match requires both queries to execute")

    def to_json(self):
        return {
            "match": self.match,
            "pred_status": self.pred_status,
            "gold_status": self.gold_status,
            "row_counts": list(self.row_counts),
            "mismatch_detail": self.mismatch_detail,
        }


def open_readonly(db_path: str | Path) -> sqlite3.Connection:
    uri = Path(db_path).resolve().as_uri() + "?mode=ro"
    con = sqlite3.connect(uri, uri=True, check_same_thread=True)
    con.text_factory = lambda b: b.decode("utf-8", errors="replace")
    return con


def run_query(con: sqlite3.Connection, sql: str, timeout: float = DEFAULT_TIMEOUT) -> QueryResult:
    deadline = time.monotonic() + timeout
    timed_out = False

    def check():
        nonlocal timed_out
        if time.monotonic() > deadline:
            timed_out = True
            return 1
        return 0

    con.set_progress_handler(check, 10_000)
    try:
        with _exec_slots:
            cur = con.execute(sql)
            rows = cur.fetchall()
            ncols = len(cur.description or ())
        return QueryResult("ok", rows, ncols)
    except (sqlite3.Error, sqlite3.Warning, ValueError) as exc:
        if timed_out:
            return QueryResult("timeout", error=f"exceeded {timeout}s")
        return QueryResult("sql_error", error=str(exc))
    finally:
        con.set_progress_handler(None, 0)


def _is_real(v) -> bool:
    return isinstance(v, float)


def _cell_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    num = (int, float)
    if isinstance(a, num) and isinstance(b, num) and not isinstance(a, bool) and not isinstance(b, bool):
        if _is_real(a) or _is_real(b):
            return abs(float(a) - float(b)) <= REAL_TOL
        return a == b
    return type(a) is type(b) and a == b


def _row_eq(a, b) -> bool:
    return len(a) == len(b) and all(_cell_eq(x, y) for x, y in zip(a, b))


def _exact_signature(row):
    # numeric cells are compared with tolerance, so group rows on everything else
    return tuple(("num" if isinstance(v, (int, float)) and not isinstance(v, bool) else repr(v)) for v in row)


def rows_equal_multiset(pred: list, gold: list) -> bool:
    """Order-insensitive comparison with 1e-6 tolerance on real-valued cells."""
    if len(pred) != len(gold):
        return False
    if not any(_is_real(v) for r in pred + gold for v in r):
        return Counter(map(_hashable, pred)) == Counter(map(_hashable, gold))
    groups_p, groups_g = defaultdict(list), defaultdict(list)
    for r in pred:
        groups_p[_exact_signature(r)].append(r)
    for r in gold:
        groups_g[_exact_signature(r)].append(r)
    if {k: len(v) for k, v in groups_p.items()} != {k: len(v) for k, v in groups_g.items()}:
        return False
    for key, prow in groups_p.items():
        grow = groups_g[key]
        if len(prow) == 1:
            if not _row_eq(prow[0], grow[0]):
                return False
            continue
        # perfect matching between tolerance-equal rows
        cost = np.array([[0.0 if _row_eq(p, g) else 1.0 for g in grow] for p in prow])
        r, c = linear_sum_assignment(cost)
        if cost[r, c].sum() > 0:
            return False
    return True


def _hashable(row):
    return tuple((type(v).__name__ if not isinstance(v, (int, float)) else "n", v) for v in row)


def rows_equal_ordered(pred: list, gold: list) -> bool:
    return len(pred) == len(gold) and all(_row_eq(p, g) for p, g in zip(pred, gold))


def compare_results(pred: QueryResult, gold: QueryResult, ordered: bool) -> ExecOutcome:
    counts = (len(pred.rows) if pred.rows is not None else None, len(gold.rows) if gold.rows is not None else None)
    if pred.status != "ok" or gold.status != "ok":
        detail = "; ".join(f"{n}: {r.status} {r.error}".strip() for n, r in (("pred", pred), ("gold", gold)) if r.status != "ok")
        return ExecOutcome(False, pred.status, gold.status, counts, detail)
    if pred.ncols != gold.ncols:
        return ExecOutcome(False, "ok", "ok", counts, f"column count {pred.ncols} vs {gold.ncols}")
    same = rows_equal_ordered(pred.rows, gold.rows) if ordered else rows_equal_multiset(pred.rows, gold.rows)
    if same:
        return ExecOutcome(True, "ok", "ok", counts)
    if counts[0] != counts[1]:
        detail = f"row count {counts[0]} vs {counts[1]}"
    else:
        detail = "row values differ" + (" (ordered comparison)" if ordered else "")
    return ExecOutcome(False, "ok", "ok", counts, detail)


def execution_accuracy(pred_sql: str, gold_sql: str, db_handle, timeout: float = DEFAULT_TIMEOUT) -> ExecOutcome:
    """Execute both queries and compare their results.

    Rows compare as multisets unless gold's outermost query has ORDER BY.
    ``db_handle`` is an open read-only connection or a database file path.
    """
    own = not isinstance(db_handle, sqlite3.Connection)
    con = open_readonly(db_handle) if own else db_handle
    try:
        gold = run_query(con, gold_sql, timeout)
        pred = run_query(con, pred_sql, timeout)
    finally:
        if own:
            con.close()
    return compare_results(pred, gold, has_top_level_order_by(gold_sql))


def exec_diff_summary(outcome: ExecOutcome) -> str:
    """Short text the feedback agent sees about how the results differ."""
    p, g = outcome.row_counts
    parts = [f"predicted status: {outcome.pred_status}", f"reference status: {outcome.gold_status}"]
    parts.append(f"row counts (predicted, reference): ({p}, {g})")
    if outcome.mismatch_detail:
        parts.append(f"detail: {outcome.mismatch_detail}")
    return "\n".join(parts)
