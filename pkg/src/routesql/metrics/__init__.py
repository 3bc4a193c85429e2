"""Router ranking metrics, Exact Set Match, Execution Accuracy and run reports."""
from .exact_match import GoldSqlError, exact_set_match
from .execution import ExecOutcome, execution_accuracy, exec_diff_summary, open_readonly
from .ranking import (
    RankedPrediction,
    average_precision,
    map_score,
    ndcg,
    ndcg_score,
    precision_recall_at_1,
    within_top_k,
)
from .report import EvalConfig, EvalReport, EvaluationError, ExampleRecord, PipelineOutput, aggregate, evaluate_run
from .sqlclauses import SqlClauseSet, SqlParseError, parse_sql_clauses, render

__all__ = [
    "GoldSqlError", "exact_set_match", "ExecOutcome", "execution_accuracy", "exec_diff_summary",
    "open_readonly", "RankedPrediction", "average_precision", "map_score", "ndcg", "ndcg_score",
    "precision_recall_at_1", "within_top_k", "EvalConfig", "EvalReport", "EvaluationError",
    "ExampleRecord", "PipelineOutput", "aggregate", "evaluate_run", "SqlClauseSet", "SqlParseError",
    "parse_sql_clauses", "render",
]
