"""Run-level evaluation report: per-example records, aggregates, and renderings."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

from ..corpus import Example, SchemaCatalog
from .exact_match import exact_set_match
from .execution import execution_accuracy
from .ranking import RankedPrediction, map_score, ndcg_score, precision_recall_at_1, within_top_k

SCHEMA_VERSION = 1


class EvaluationError(Exception):
    pass


@dataclass
class EvalConfig:
    em_ignore_values: bool = False
    timeout: float = 30.0
    top_k: int = 5


@dataclass
class PipelineOutput:
    """What one example produced: the routed ranking, the SQL, and optionally a correction."""

    example_id: str
    sql: str | None
    ranked_classes: tuple[str, ...] = ()
    gold_class: str | None = None
    corrected_sql: str | None = None
    iterations: int = 0
    error: str = ""

    @property
    def has_correction(self) -> bool:
        return self.corrected_sql is not None

    def to_json(self):
        d = asdict(self)
        d["ranked_classes"] = list(self.ranked_classes)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["ranked_classes"] = tuple(d.get("ranked_classes", ()))
        return cls(**d)


@dataclass
class ExampleRecord:
    example_id: str
    db_id: str
    difficulty_tag: str | None
    gold_class: str
    ranked_classes: list[str]
    routing_rank: int | None
    em: bool
    ex: bool
    em_after: bool
    ex_after: bool
    iterations: int
    corrected: bool
    error: str = ""


@dataclass
class EvalReport:
    records: list[ExampleRecord]
    aggregates: dict
    by_difficulty: dict = field(default_factory=dict)
    has_correction: bool = False
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "has_correction": self.has_correction,
            "aggregates": self.aggregates,
            "by_difficulty": self.by_difficulty,
            "records": [asdict(r) for r in self.records],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise EvaluationError(f"unsupported report schema_version {d.get('schema_version')!r}")
        return cls([ExampleRecord(**r) for r in d["records"]], d["aggregates"], d.get("by_difficulty", {}),
                   d.get("has_correction", False))

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(ExampleRecord.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            row = asdict(r)
            row["ranked_classes"] = " ".join(r.ranked_classes)
            w.writerow(row)
        return buf.getvalue()

    def to_markdown(self) -> str:
        a = self.aggregates
        out = ["## Routing", "", "| metric | value |", "|---|---|"]
        for key in ("map", "ndcg", "p_at_1", "r_at_1"):
            out.append(f"| {key} | {_fmt(a[key])} |")
        out.append(f"| within_top_{a['top_k']} | {a['within_top_k']} / {a['n']} |")
        out += ["", "## SQL accuracy", "", "| stage | EX % | EM % |", "|---|---|---|"]
        out.append(f"| before correction | {_fmt(a['ex_before'])} | {_fmt(a['em_before'])} |")
        if self.has_correction:
            out.append(f"| after correction | {_fmt(a['ex_after'])} | {_fmt(a['em_after'])} |")
            out.append(f"| delta (points) | {_fmt(a['ex_delta'])} | {_fmt(a['em_delta'])} |")
        if self.by_difficulty:
            out += ["", "## By difficulty", "", "| difficulty | n | EX % before | EX % after |", "|---|---|---|---|"]
            for tag, g in self.by_difficulty.items():
                out.append(f"| {tag} | {g['n']} | {_fmt(g['ex_before'])} | {_fmt(g['ex_after'])} |")
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.2f}" if isinstance(v, float) else str(v)


def _pct(flags: Sequence[bool]) -> float:
    return 100.0 * sum(flags) / len(flags)


def aggregate(records: Sequence[ExampleRecord], top_k: int = 5) -> tuple[dict, dict]:
    """Aggregates and per-difficulty breakdown, derived only from the records."""
    if not records:
        raise EvaluationError("no examples to evaluate")
    ranked = [
        RankedPrediction(r.gold_class, tuple(r.ranked_classes)) for r in records if r.ranked_classes
    ]
    agg = {
        "n": len(records),
        "top_k": top_k,
        "ex_before": _pct([r.ex for r in records]),
        "em_before": _pct([r.em for r in records]),
        "ex_after": _pct([r.ex_after for r in records]),
        "em_after": _pct([r.em_after for r in records]),
        "map": None,
        "ndcg": None,
        "p_at_1": None,
        "r_at_1": None,
        "within_top_k": 0,
    }
    agg["ex_delta"] = agg["ex_after"] - agg["ex_before"]
    agg["em_delta"] = agg["em_after"] - agg["em_before"]
    if ranked:
        agg["map"] = map_score(ranked)
        agg["ndcg"] = ndcg_score(ranked)
        agg["p_at_1"], agg["r_at_1"] = precision_recall_at_1(ranked)
        agg["within_top_k"] = within_top_k(ranked, top_k)
    groups: dict[str, list[ExampleRecord]] = {}
    for r in records:
        if r.difficulty_tag:
            groups.setdefault(r.difficulty_tag, []).append(r)
    by_diff = {
        tag: {
            "n": len(g),
            "ex_before": _pct([r.ex for r in g]),
            "em_before": _pct([r.em for r in g]),
            "ex_after": _pct([r.ex_after for r in g]),
            "em_after": _pct([r.em_after for r in g]),
        }
        for tag, g in sorted(groups.items())
    }
    return agg, by_diff


def evaluate_run(
    examples: Sequence[Example],
    pipeline_outputs: Sequence[PipelineOutput],
    catalog: SchemaCatalog,
    config: EvalConfig | None = None,
) -> EvalReport:
    """Score every example before and, where a correction exists, after correction.

    Examples without a correction keep their before-correction scores in the
    after columns, so deltas count only what the correction changed.
    """
    config = config or EvalConfig()
    if not examples:
        raise EvaluationError("no examples to evaluate")
    if len(examples) != len(pipeline_outputs):
        raise EvaluationError(f"{len(examples)} examples but {len(pipeline_outputs)} pipeline outputs")
    records = []
    for ex, out in zip(examples, pipeline_outputs):
        if out.example_id != ex.example_id:
            raise EvaluationError(f"output {out.example_id!r} is not aligned with example {ex.example_id!r}")
        schema = catalog.entries[ex.db_id].column_map() if ex.db_id in catalog.entries else None
        db_path = catalog.db_path(ex.db_id)

        def score(sql):
            if sql is None:
                return False, False
            em = exact_set_match(sql, ex.gold_sql, config.em_ignore_values, schema)
            exm = bool(db_path) and execution_accuracy(sql, ex.gold_sql, db_path, config.timeout).match
            return em, exm

        em, exm = score(out.sql)
        em2, ex2 = score(out.corrected_sql) if out.has_correction else (em, exm)
        gold_class = out.gold_class or ex.db_id
        rank = next((i for i, c in enumerate(out.ranked_classes, 1) if c == gold_class), None)
        records.append(ExampleRecord(
            ex.example_id, ex.db_id, ex.difficulty_tag, gold_class, list(out.ranked_classes), rank,
            em, exm, em2, ex2, out.iterations, out.has_correction, out.error,
        ))
    agg, by_diff = aggregate(records, config.top_k)
    return EvalReport(records, agg, by_diff, any(o.has_correction for o in pipeline_outputs))
