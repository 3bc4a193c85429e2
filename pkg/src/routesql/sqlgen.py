"""Schema linking, SQL-generation prompts, and the routed question-to-SQL pipeline."""
from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

from . import prompts
from .corpus import SchemaCatalog, schema_lines
from .llmgate import Backend, LlmRequest, complete, text_digest
from .metrics.sqlclauses import SqlParseError, _Parser, tokenize
from .rules import EntityAssignment, RuleStore, annotate_question, augment_question

FORMAT_REMINDER = "Format reminder: return exactly one SQL query inside a ```sql fenced block."
GUIDELINE_HEADER = "Correction guidelines (lessons from earlier mistakes):"


class SchemaLinkingError(Exception):
    pass


class SqlGenerationError(Exception):
    def __init__(self, msg, raw=""):
        super().__init__(msg)
        self.raw = raw


class PipelineError(Exception):
    def __init__(self, stage: str, cause: Exception, trace: dict | None = None):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.trace = trace or {}


@dataclass(frozen=True)
class SchemaText:
    db_id: str
    rendered: str


@dataclass(frozen=True)
class Prompt:
    text: str

    @property
    def digest(self) -> str:
        return text_digest(self.text)


@dataclass(frozen=True)
class SqlCandidate:
    sql: str
    db_id: str | None
    source: str = "generated"
    iteration: int = 0
    prompt_digest: str = ""
    backend_id: str = ""

    def __post_init__(self):
        if not self.sql.strip():
            raise ValueError("empty SQL")
        if self.source not in ("generated", "corrected"):
            raise ValueError(f"unknown source {self.source!r}")
        if (self.iteration == 0) != (self.source == "generated"):
            raise ValueError("iteration is 0 exactly for generated candidates")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def link_schema(catalog: SchemaCatalog, db_id: str) -> SchemaText:
    if db_id not in catalog.entries:
        raise SchemaLinkingError(f"db_id {db_id!r} not in schema catalog")
    tables, keys = schema_lines(catalog.entries[db_id])
    return SchemaText(db_id, "\n".join(tables + keys))


def build_prompt(
    q_augmented: str, schema_text: SchemaText | str, template: str, guidelines: Sequence[str] | None = None
) -> Prompt:
    """Fill ``{{question}}`` (or ``{{q}}``) and ``{{schema}}``; append guidelines verbatim."""
    names = prompts.placeholders(template)
    if "schema" not in names:
        raise prompts.TemplateError("template lacks placeholder(s): schema")
    if not names & {"q", "question"}:
        raise prompts.TemplateError("template lacks placeholder(s): question")
    rendered = schema_text.rendered if isinstance(schema_text, SchemaText) else schema_text
    db_id = schema_text.db_id if isinstance(schema_text, SchemaText) else ""
    text = prompts.render(template, q=q_augmented, question=q_augmented, schema=rendered, db_id=db_id)
    if guidelines:
        text = text.rstrip("\n") + "\n\n" + GUIDELINE_HEADER + "\n" + "\n".join(f"- {g}" for g in guidelines) + "\n"
    return Prompt(text)


def _parses(sql: str) -> bool:
    try:
        _Parser(sql).parse_statement()
        return True
    except SqlParseError:
        return False


def _longest_statement(text: str) -> str | None:
    parsed, raw = [], []
    for m in re.finditer(r"\b(select|with)\b", text, re.I):
        chunk = re.split(r";|\n\s*\n", text[m.start():])[0].strip()
        try:
            toks = tokenize(chunk)
        except SqlParseError as exc:
            toks = tokenize(chunk[: exc.offset]) if exc.offset else []
        # prose after the query tends to parse as an alias; prefer prefixes ending a line
        fits = [c for c in (chunk[: _token_end(chunk, toks, n)].strip() for n in range(len(toks), 0, -1)) if _parses(c)]
        if fits:
            at_eol = [c for c in fits if chunk[len(c):].lstrip(" \t")[:1] in ("", "\n")]
            parsed.append((at_eol or fits)[0])
        else:
            raw.append(chunk)
    pool = parsed or raw
    return max(pool, key=len) if pool else None


def _token_end(chunk: str, toks, n: int) -> int:
    """Character offset just past token ``n`` (1-based count)."""
    if n < len(toks):
        return toks[n].offset
    return len(chunk)


def extract_sql(reply: str) -> str | None:
    """Fenced ```sql block first, then the longest parseable SELECT/WITH statement."""
    for block in prompts.fenced_blocks(reply, "sql") + prompts.fenced_blocks(reply, ""):
        block = block.strip().rstrip(";").strip()
        if re.match(r"(select|with)\b", block, re.I):
            return block
    stmt = _longest_statement(reply)
    return stmt.rstrip(";").strip() if stmt else None


def generate_sql(llm: Backend, prompt: Prompt, db_id: str | None = None, tag: str = "sql") -> SqlCandidate:
    req = LlmRequest.from_prompt(prompt.text, tag)
    resp = complete(req, llm)
    sql = extract_sql(resp.text)
    if sql is None:
        resp = complete(req.with_suffix(FORMAT_REMINDER), llm)
        sql = extract_sql(resp.text)
        if sql is None:
            raise SqlGenerationError("no SQL found in reply", raw=resp.text)
    return SqlCandidate(sql, db_id, "generated", 0, prompt.digest, resp.backend_id)


# ---------------------------------------------------------------------------
# full pipeline


def resolve_db(
    predicted_class: str,
    class_members: Mapping[str, Sequence[str]] | None,
    assignments: Sequence[EntityAssignment],
) -> str:
    """Concrete db_id for a routed class.

    A merged class covers several databases; the member whose rules fired most
    often on this question wins, ties broken lexicographically.
    """
    members = sorted((class_members or {}).get(predicted_class, [predicted_class]))
    if len(members) == 1:
        return members[0]
    fired = {a.db_id: len(a.true_entities) for a in assignments}
    best = max(fired.get(m, 0) for m in members)
    return next(m for m in members if fired.get(m, 0) == best)


def _fv_digest(fv) -> str:
    h = hashlib.sha256()
    h.update(fv.text_index.tobytes())
    h.update(fv.text_counts.tobytes())
    h.update(fv.entity_bits.tobytes())
    return h.hexdigest()[:16]


def pipeline_generate(
    question: str,
    ruleset_store: RuleStore,
    router_model,
    catalog: SchemaCatalog,
    llm: Backend,
    template: str | None = None,
    class_members: Mapping[str, Sequence[str]] | None = None,
    guidelines: Sequence[str] | None = None,
    report_k: int = 5,
    entity_template: str | None = None,
) -> tuple[SqlCandidate, dict]:
    """Entities -> augmented question -> features -> top-1 class -> schema -> prompt -> SQL.

    Returns the candidate and a per-stage trace. Any stage failure raises
    :class:`PipelineError` tagged with the stage name and carrying the partial trace.
    """
    template = template or prompts.load_template("sql_generation")
    trace: dict = {"question": question}
    stage = "extract_entities"
    try:
        assignments = annotate_question(question, ruleset_store, llm, entity_template)
        trace[stage] = [a.to_json() for a in assignments]
        stage = "augment_question"
        aug = augment_question(question, assignments)
        trace[stage] = aug.text
        stage = "featurize"
        fv = router_model.featurize(aug.text, assignments)
        trace[stage] = _fv_digest(fv)
        stage = "predict_topk"
        ranked = router_model.predict_topk(fv, report_k)
        trace[stage] = [[c, round(p, 12)] for c, p in ranked]
        stage = "link_schema"
        db_id = resolve_db(ranked[0][0], class_members, assignments)
        schema = link_schema(catalog, db_id)
        trace[stage] = {"db_id": db_id, "digest": text_digest(schema.rendered)}
        stage = "build_prompt"
        prompt = build_prompt(aug.text, schema, template, guidelines)
        trace[stage] = prompt.digest
        stage = "generate_sql"
        cand = generate_sql(llm, prompt, db_id)
        trace[stage] = cand.to_json()
    except Exception as exc:
        raise PipelineError(stage, exc, trace) from exc
    return cand, trace
