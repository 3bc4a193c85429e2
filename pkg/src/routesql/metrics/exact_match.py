"""Exact Set Match over canonical clause sets."""
from __future__ import annotations

from typing import Mapping, Sequence

from .sqlclauses import SqlParseError, parse_sql_clauses


class GoldSqlError(Exception):
    """The reference query itself does not parse."""


def exact_set_match(
    pred_sql: str,
    gold_sql: str,
    em_ignore_values: bool = False,
    schema: Mapping[str, Sequence[str]] | None = None,
) -> bool:
    try:
        gold = parse_sql_clauses(gold_sql, schema, em_ignore_values)
    except SqlParseError as exc:
        raise GoldSqlError(f"gold SQL does not parse: {exc}") from exc
    try:
        pred = parse_sql_clauses(pred_sql, schema, em_ignore_values)
    except SqlParseError:
        return False
    return pred == gold
