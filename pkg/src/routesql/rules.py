"""LLM-authored entity rules per database, entity extraction, question augmentation."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import prompts
from .corpus import DatabaseSchema, schema_lines
from .llmgate import Backend, LlmRequest, complete, estimate_tokens

log = logging.getLogger(__name__)

FORMAT_REMINDER = (
    "Format reminder: reply with exactly one fenced block in the requested format, nothing else."
)
_SNAKE = re.compile(r"[a-z][a-z0-9_]*")


class RuleGenerationError(Exception):
    def __init__(self, msg, raw=""):
        super().__init__(msg)
        self.raw = raw


class ExtractionError(Exception):
    def __init__(self, msg, raw=""):
        super().__init__(msg)
        self.raw = raw


def snake(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.strip().lower()).strip("_")


@dataclass(frozen=True)
class EntityRule:
    entity_name: str
    description: str = ""
    cue_phrases: tuple[str, ...] = ()

    def __post_init__(self):
        if not _SNAKE.fullmatch(self.entity_name):
            raise ValueError(f"entity name must be lowercase snake_case: {self.entity_name!r}")

    def to_json(self):
        return {"entity_name": self.entity_name, "description": self.description, "cue_phrases": list(self.cue_phrases)}


@dataclass
class RuleSet:
    db_id: str
    rules: list[EntityRule]
    generator: str = "unknown"
    version: int = 1
    raw: list[str] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if not self.rules:
            raise ValueError(f"RuleSet for {self.db_id!r} has no rules")
        names = [r.entity_name for r in self.rules]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate entity names in RuleSet {self.db_id!r}")
        self.rules = sorted(self.rules, key=lambda r: r.entity_name)

    @property
    def entity_names(self) -> list[str]:
        return [r.entity_name for r in self.rules]

    def to_json(self) -> dict:
        return {
            "db_id": self.db_id,
            "version": self.version,
            "generator": self.generator,
            "rules": [r.to_json() for r in self.rules],
        }

    @classmethod
    def from_json(cls, d: dict) -> "RuleSet":
        rules = [EntityRule(r["entity_name"], r.get("description", ""), tuple(r.get("cue_phrases", ()))) for r in d["rules"]]
        return cls(d["db_id"], rules, d.get("generator", "unknown"), d.get("version", 1))


class RuleStore:
    """``rules/<db_id>.json`` files; single writer, many readers."""

    def __init__(self, rulesets: Iterable[RuleSet] = ()):
        self.rulesets = {rs.db_id: rs for rs in rulesets}

    def __getitem__(self, db_id):
        return self.rulesets[db_id]

    def __len__(self):
        return len(self.rulesets)

    def ordered(self) -> list[RuleSet]:
        return [self.rulesets[k] for k in sorted(self.rulesets)]

    def vocabulary(self) -> list[tuple[str, str]]:
        """Global entity vocabulary, lexicographic over (db_id, entity_name)."""
        return sorted((rs.db_id, n) for rs in self.rulesets.values() for n in rs.entity_names)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for rs in self.ordered():
            (d / f"{rs.db_id}.json").write_text(json.dumps(rs.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "RuleStore":
        files = sorted(Path(directory).glob("*.json"))
        return cls(RuleSet.from_json(json.loads(f.read_text(encoding="utf-8"))) for f in files)


# ---------------------------------------------------------------------------
# rule generation


def _parse_rules(text: str) -> list[EntityRule] | None:
    candidates = prompts.fenced_blocks(text, "rules") + prompts.fenced_blocks(text, "json") + [text.strip()]
    for body in candidates:
        try:
            data = json.loads(body)
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            data = data.get("rules")
        if not isinstance(data, list):
            continue
        rules = []
        for item in data:
            if not isinstance(item, dict) or not item.get("entity_name"):
                continue
            name = snake(str(item["entity_name"]))
            if not name or not name[0].isalpha():
                continue
            cues = item.get("cue_phrases") or []
            rules.append(EntityRule(name, str(item.get("description", "")), tuple(str(c) for c in cues)))
        return rules
    return None


def _chunk_units(template, db_id, table_lines, key_lines, samples, budget):
    """Greedy packing of schema tables and sample questions under ``budget`` tokens."""
    units = [("t", line) for line in table_lines] + [("s", q) for q in samples]

    def prompt_for(chunk):
        schema = "\n".join([u for k, u in chunk if k == "t"] + key_lines)
        sample_text = "\n".join(f"- {u}" for k, u in chunk if k == "s") or "(none)"
        return prompts.render(template, ("schema",), db_id=db_id, schema=schema, samples=sample_text)

    chunks: list[list] = []
    current: list = []
    for unit in units:
        trial = current + [unit]
        if current and estimate_tokens(prompt_for(trial)) > budget:
            chunks.append(current)
            current = [unit]
        else:
            current = trial
    if current:
        chunks.append(current)
    return [prompt_for(c) for c in chunks]


def generate_ruleset(
    db_id: str,
    schema: DatabaseSchema,
    sample_questions: Sequence[str],
    llm: Backend,
    template: str | None = None,
    version: int = 1,
) -> RuleSet:
    """Ask the LLM for entity rules; oversize prompts are split into chunks and unioned by name."""
    if schema.db_id != db_id:
        raise ValueError(f"schema belongs to {schema.db_id!r}, not {db_id!r}")
    template = template or prompts.load_template("rules_generation")
    table_lines, key_lines = schema_lines(schema)
    chunk_prompts = _chunk_units(template, db_id, table_lines, key_lines, list(sample_questions), llm.token_budget)
    merged: dict[str, EntityRule] = {}
    raws = []
    backend_id = llm.backend_id
    for prompt in chunk_prompts:
        req = LlmRequest.from_prompt(prompt, "rules")
        resp = complete(req, llm)
        raws.append(resp.text)
        backend_id = resp.backend_id
        rules = _parse_rules(resp.text)
        if rules is None:
            resp = complete(req.with_suffix(FORMAT_REMINDER), llm)
            raws.append(resp.text)
            rules = _parse_rules(resp.text)
            if rules is None:
                raise RuleGenerationError(f"unparseable rule output for {db_id!r}", raw=resp.text)
        for r in rules:
            merged.setdefault(r.entity_name, r)
    if not merged:
        raise RuleGenerationError(f"LLM produced no rules for {db_id!r}", raw="\n".join(raws))
    return RuleSet(db_id, list(merged.values()), backend_id, version, raws)


# ---------------------------------------------------------------------------
# entity extraction


@dataclass
class EntityAssignment:
    question: str
    values: dict[str, bool]
    db_id: str | None = None
    warnings: list[str] = field(default_factory=list)
    order: list[str] = field(default_factory=list, repr=False)

    @property
    def true_entities(self) -> list[str]:
        names = self.order or list(self.values)
        return [n for n in names if self.values.get(n)]

    def to_json(self):
        return {"db_id": self.db_id, "values": {n: self.values[n] for n in (self.order or self.values)}}

    @classmethod
    def from_json(cls, question, d):
        return cls(question, dict(d["values"]), d.get("db_id"), order=list(d["values"]))


def _format_rules(ruleset: RuleSet) -> str:
    lines = []
    for r in ruleset.rules:
        cues = f" (cues: {', '.join(r.cue_phrases)})" if r.cue_phrases else ""
        lines.append(f"- {r.entity_name}: {r.description}{cues}")
    return "\n".join(lines)


_BOOL_LINE = re.compile(r"^\s*[-*]?\s*`?([A-Za-z0-9_ ]+?)`?\s*[:=]\s*`?(true|false|yes|no)`?\s*$", re.I)


def _parse_bools(text: str) -> dict[str, bool] | None:
    blocks = prompts.fenced_blocks(text, "entities") or prompts.fenced_blocks(text)
    out: dict[str, bool] = {}
    for block in blocks:
        for line in block.splitlines():
            m = _BOOL_LINE.match(line)
            if m:
                out[snake(m.group(1))] = m.group(2).lower() in ("true", "yes")
    return out or None


def extract_entities(question: str, ruleset: RuleSet, llm: Backend, template: str | None = None) -> EntityAssignment:
    template = template or prompts.load_template("entity_extraction")
    prompt = prompts.render(template, ("question", "rules"), question=question, rules=_format_rules(ruleset))
    req = LlmRequest.from_prompt(prompt, "entities")
    parsed = _parse_bools(complete(req, llm).text)
    if parsed is None:
        resp = complete(req.with_suffix(FORMAT_REMINDER), llm)
        parsed = _parse_bools(resp.text)
        if parsed is None:
            raise ExtractionError(f"unparseable entity output for {question!r}", raw=resp.text)
    values, warnings = {}, []
    for name in ruleset.entity_names:
        if name not in parsed:
            warnings.append(f"entity {name!r} missing from reply; defaulted to false")
            log.warning("%s: entity %s missing from reply", ruleset.db_id, name)
        values[name] = bool(parsed.get(name, False))
    return EntityAssignment(question, values, ruleset.db_id, warnings, order=ruleset.entity_names)


def annotate_question(question: str, store: RuleStore, llm: Backend, template: str | None = None) -> list[EntityAssignment]:
    """Evaluate a question against every database's rules, one call per RuleSet."""
    return [extract_entities(question, rs, llm, template) for rs in store.ordered()]


# ---------------------------------------------------------------------------
# augmentation and vectors


@dataclass(frozen=True)
class AugmentedQuestion:
    text: str
    source_question: str
    appended_entities: tuple[str, ...]


def _as_list(assignment) -> list[EntityAssignment]:
    if assignment is None:
        return []
    if isinstance(assignment, EntityAssignment):
        return [assignment]
    return list(assignment)


def augment_question(question: str, assignment: EntityAssignment | Sequence[EntityAssignment]) -> AugmentedQuestion:
    """Append the true entity names: ``q + " " + ", ".join(names) + "."``."""
    names: list[str] = []
    for a in _as_list(assignment):
        for n in a.true_entities:
            if n not in names:
                names.append(n)
    if not names:
        return AugmentedQuestion(question, question, ())
    return AugmentedQuestion(f"{question} {', '.join(names)}.", question, tuple(names))


def entity_vector(assignment, entity_vocabulary: Sequence) -> list[int]:
    """Multi-hot vector over the vocabulary.

    Vocabulary entries are ``(db_id, entity_name)`` pairs or bare names; a bare
    name matches that entity in any assignment.
    """
    truth: set[tuple[str | None, str]] = set()
    for a in _as_list(assignment):
        for n, v in a.values.items():
            if v:
                truth.add((a.db_id, n))
                truth.add((None, n))
    bits = []
    for entry in entity_vocabulary:
        key = tuple(entry) if isinstance(entry, (tuple, list)) else (None, entry)
        bits.append(1 if key in truth else 0)
    return bits
