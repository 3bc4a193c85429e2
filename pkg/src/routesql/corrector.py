"""Self-correction loop: feedback agent, correction agent, manager policy, guideline store."""
from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import prompts
from .corpus import Example, SchemaCatalog
from .llmgate import Backend, LlmError, LlmRequest, complete, text_digest
from .metrics.execution import ExecOutcome, exec_diff_summary, execution_accuracy
from .sqlgen import Prompt, SqlCandidate, SqlGenerationError, extract_sql

log = logging.getLogger(__name__)

CATEGORIES = (
    "missing_join",
    "wrong_column",
    "wrong_table",
    "aggregation",
    "filter_condition",
    "ordering_limit",
    "grouping",
    "value_literal",
    "other",
)
FORMAT_REMINDER = "Format reminder: use the fenced blocks exactly as requested, one `category: text` per line."

RUN_FEEDBACK = "run_feedback"
RUN_CORRECTION = "run_correction"
COMMIT_AND_STOP = "commit_guidelines_and_stop"
STOP_FAILURE = "stop_failure"


class CorrectionError(Exception):
    def __init__(self, msg, raw=""):
        super().__init__(msg)
        self.raw = raw


class FeedbackPreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class Discrepancy:
    category: str
    detail: str


@dataclass
class FeedbackReport:
    discrepancies: list[Discrepancy]
    raw: str = ""

    def render(self) -> str:
        return "\n".join(f"- {d.category}: {d.detail}" for d in self.discrepancies)


@dataclass(frozen=True)
class CorrectionGuideline:
    id: str
    category: str
    instruction: str
    origin_example_id: str = ""
    created_iteration: int = 0

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("guideline instruction must be non-empty")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown guideline category {self.category!r}")


def _category(label: str) -> str:
    c = re.sub(r"[^a-z0-9]+", "_", label.strip().lower()).strip("_")
    return c if c in CATEGORIES else "other"


def _category_lines(text: str, block: str) -> list[tuple[str, str]]:
    out = []
    for body in prompts.fenced_blocks(text, block):
        for line in body.splitlines():
            line = line.strip().lstrip("-*").strip()
            if ":" not in line:
                continue
            label, detail = line.split(":", 1)
            if detail.strip():
                out.append((label.strip(), detail.strip()))
    return out


def _same_sql(a: str, b: str) -> bool:
    return " ".join(a.split()).rstrip(";") == " ".join(b.split()).rstrip(";")


def feedback(gold_sql: str, pred_sql: str, exec_diff: str, llm: Backend, template: str | None = None) -> FeedbackReport:
    """Ask the feedback agent to list categorised discrepancies between pred and gold."""
    if _same_sql(gold_sql, pred_sql):
        raise FeedbackPreconditionError("predicted SQL is identical to the reference")
    template = template or prompts.load_template("feedback")
    prompt = prompts.render(
        template, gold_sql=gold_sql, pred_sql=pred_sql, exec_diff=exec_diff, categories=", ".join(CATEGORIES)
    )
    req = LlmRequest.from_prompt(prompt, "feedback")
    resp = complete(req, llm)
    lines = _category_lines(resp.text, "feedback")
    if not lines:
        resp = complete(req.with_suffix(FORMAT_REMINDER), llm)
        lines = _category_lines(resp.text, "feedback")
        if not lines:
            raise CorrectionError("unparseable feedback reply", raw=resp.text)
    return FeedbackReport([Discrepancy(_category(c), d) for c, d in lines], resp.text)


def correct(
    pred_sql: SqlCandidate,
    feedback_report: FeedbackReport,
    guidelines: Sequence[CorrectionGuideline],
    llm: Backend,
    template: str | None = None,
    origin_example_id: str = "",
) -> tuple[SqlCandidate, list[CorrectionGuideline]]:
    """Rewrite the SQL from the feedback; also return guideline drafts (ids unassigned)."""
    if not feedback_report.discrepancies:
        raise ValueError("feedback report has no discrepancies")
    template = template or prompts.load_template("correction")
    known = "\n".join(f"- [{g.category}] {g.instruction}" for g in guidelines) or "(none)"
    prompt = prompts.render(template, pred_sql=pred_sql.sql, feedback=feedback_report.render(), guidelines=known)
    req = LlmRequest.from_prompt(prompt, "correction")
    resp = complete(req, llm)
    sql = extract_sql(resp.text)
    if sql is None:
        resp = complete(req.with_suffix(FORMAT_REMINDER), llm)
        sql = extract_sql(resp.text)
        if sql is None:
            raise SqlGenerationError("no SQL in correction reply", raw=resp.text)
    iteration = pred_sql.iteration + 1
    cand = SqlCandidate(sql, pred_sql.db_id, "corrected", iteration, text_digest(prompt), resp.backend_id)
    drafts = [
        CorrectionGuideline("", _category(c), instr, origin_example_id, iteration)
        for c, instr in _category_lines(resp.text, "guidelines")
    ]
    return cand, drafts


@dataclass(frozen=True)
class LoopState:
    iteration: int = 0
    last_action: str | None = None
    last_ex_pass: bool | None = None
    max_iterations: int = 3


def manage(state: LoopState) -> str:
    """Deterministic manager policy.

    start -> feedback -> correction -> (pass: commit and stop | fail: feedback
    again while iterations remain | otherwise stop).
    """
    if state.last_action is None:
        return RUN_FEEDBACK
    if state.last_action == RUN_FEEDBACK:
        return RUN_CORRECTION
    if state.last_action == RUN_CORRECTION:
        if state.last_ex_pass:
            return COMMIT_AND_STOP
        return RUN_FEEDBACK if state.iteration < state.max_iterations else STOP_FAILURE
    return STOP_FAILURE


class GuidelineStore:
    """Append-only ``guidelines.jsonl``; commits are serialised, reads see a snapshot."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._items: list[CorrectionGuideline] = []
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                self._items = [CorrectionGuideline(**json.loads(l)) for l in fh if l.strip()]

    def snapshot(self) -> list[CorrectionGuideline]:
        with self._lock:
            return list(self._items)

    def __len__(self):
        return len(self._items)

    def commit(self, drafts: Sequence[CorrectionGuideline]) -> list[CorrectionGuideline]:
        """Assign ids and append drafts whose instruction text is new."""
        added = []
        with self._lock:
            seen = {g.instruction for g in self._items}
            for d in drafts:
                if d.instruction in seen:
                    continue
                seen.add(d.instruction)
                g = CorrectionGuideline(f"g{len(self._items) + 1:05d}", d.category, d.instruction,
                                        d.origin_example_id, d.created_iteration)
                self._items.append(g)
                added.append(g)
            if added and self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write("".join(json.dumps(asdict(g), sort_keys=True) + "\n" for g in added))
        return added

    def select(self, top_m: int, category_hint: str | None = None) -> list[CorrectionGuideline]:
        items = [g for g in reversed(self.snapshot()) if category_hint is None or g.category == category_hint]
        return items[:top_m]


@dataclass
class CorrectionOutcome:
    final_sql: SqlCandidate
    iterations_used: int
    resolved: bool
    trace: list[tuple[str, str, str]] = field(default_factory=list)
    committed: list[str] = field(default_factory=list)
    last_exec: ExecOutcome | None = None
    error: str = ""

    def to_json(self):
        return {
            "final_sql": self.final_sql.to_json(),
            "iterations_used": self.iterations_used,
            "resolved": self.resolved,
            "trace": [list(t) for t in self.trace],
            "committed": list(self.committed),
            "last_exec": self.last_exec.to_json() if self.last_exec else None,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d):
        le = d.get("last_exec")
        return cls(
            SqlCandidate.from_json(d["final_sql"]),
            d["iterations_used"],
            d["resolved"],
            [tuple(t) for t in d.get("trace", [])],
            list(d.get("committed", [])),
            ExecOutcome(le["match"], le["pred_status"], le["gold_status"], tuple(le["row_counts"]), le["mismatch_detail"]) if le else None,
            d.get("error", ""),
        )


def run_correction_loop(
    example: Example,
    pred: SqlCandidate,
    catalog: SchemaCatalog,
    llm: Backend,
    guideline_store: GuidelineStore,
    max_iterations: int = 3,
    timeout: float = 30.0,
    feedback_template: str | None = None,
    correction_template: str | None = None,
) -> CorrectionOutcome:
    """Drive the manager until it stops; guidelines are committed only on success."""
    db_path = catalog.db_path(example.db_id)
    if not db_path:
        raise ValueError(f"no executable database for {example.db_id!r}")
    known = guideline_store.snapshot()
    current = pred
    check = execution_accuracy(current.sql, example.gold_sql, db_path, timeout)
    trace: list[tuple[str, str, str]] = [("execute", text_digest(current.sql), str(check.match))]
    if check.match:
        return CorrectionOutcome(current, 0, True, trace, [], check)
    state = LoopState(0, None, None, max_iterations)
    drafts: list[CorrectionGuideline] = []
    report: FeedbackReport | None = None
    while True:
        action = manage(state)
        try:
            if action == RUN_FEEDBACK:
                report = feedback(example.gold_sql, current.sql, exec_diff_summary(check), llm, feedback_template)
                trace.append(("feedback", text_digest(current.sql), text_digest(report.raw)))
                state = LoopState(state.iteration, RUN_FEEDBACK, state.last_ex_pass, max_iterations)
            elif action == RUN_CORRECTION:
                current, new = correct(current, report, known, llm, correction_template, example.example_id)
                drafts.extend(new)
                check = execution_accuracy(current.sql, example.gold_sql, db_path, timeout)
                trace.append(("correction", text_digest(report.raw), text_digest(current.sql)))
                trace.append(("execute", text_digest(current.sql), str(check.match)))
                state = LoopState(state.iteration + 1, RUN_CORRECTION, check.match, max_iterations)
            elif action == COMMIT_AND_STOP:
                added = guideline_store.commit(drafts)
                trace.append(("manager", COMMIT_AND_STOP, ",".join(g.id for g in added)))
                return CorrectionOutcome(current, state.iteration, True, trace, [g.id for g in added], check)
            else:
                trace.append(("manager", STOP_FAILURE, ""))
                return CorrectionOutcome(current, state.iteration, False, trace, [], check)
        except (LlmError, CorrectionError, SqlGenerationError, FeedbackPreconditionError) as exc:
            log.warning("correction loop for %s aborted: %s", example.example_id, exc)
            trace.append(("error", action, type(exc).__name__))
            return CorrectionOutcome(current, state.iteration, False, trace, [], check, str(exc))


def apply_guidelines_at_inference(
    question_prompt_builder: Callable[..., Prompt],
    guideline_store: GuidelineStore,
    top_m: int,
    category_hint: str | None = None,
) -> Prompt:
    """Build the generation prompt with up to ``top_m`` recent guidelines appended.

    ``question_prompt_builder`` takes a ``guidelines`` keyword (a list of
    instruction strings), e.g. a ``functools.partial`` of ``build_prompt``.
    """
    chosen = guideline_store.select(top_m, category_hint)
    return question_prompt_builder(guidelines=[g.instruction for g in chosen] or None)
