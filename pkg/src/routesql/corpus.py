"""Spider-format dataset and schema ingestion, stratified re-splitting, class merging."""
from __future__ import annotations

import json
import math
import random
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

DIFFICULTIES = ("easy", "medium", "hard", "extra")


class CorpusError(Exception):
    pass


class MalformedRecordError(CorpusError):
    def __init__(self, path, index, reason):
        super().__init__(f"{path}: record {index}: {reason}")
        self.path = str(path)
        self.index = index


class CatalogError(CorpusError):
    def __init__(self, db_id, reason):
        super().__init__(f"catalog entry {db_id!r}: {reason}")
        self.db_id = db_id


class MergeConflictError(CorpusError):
    pass


@dataclass(frozen=True)
class Example:
    question: str
    db_id: str
    gold_sql: str
    difficulty_tag: str | None = None
    example_id: str = ""

    def __post_init__(self):
        for name in ("question", "db_id", "gold_sql"):
            if not getattr(self, name) or not str(getattr(self, name)).strip():
                raise ValueError(f"Example.{name} must be non-empty")
        if self.difficulty_tag is not None and self.difficulty_tag not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty tag {self.difficulty_tag!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Example":
        return cls(d["question"], d["db_id"], d["gold_sql"], d.get("difficulty_tag"), d.get("example_id", ""))


@dataclass(frozen=True)
class Column:
    table: str
    name: str
    type: str = "text"


@dataclass(frozen=True)
class DatabaseSchema:
    db_id: str
    tables: tuple[str, ...]
    columns: tuple[Column, ...]
    primary_keys: tuple[tuple[str, str], ...] = ()
    foreign_keys: tuple[tuple[tuple[str, str], tuple[str, str]], ...] = ()

    def columns_of(self, table: str) -> list[Column]:
        return [c for c in self.columns if c.table == table]

    def column_map(self) -> dict[str, list[str]]:
        """Lowercased table name -> lowercased column names."""
        out: dict[str, list[str]] = {t.lower(): [] for t in self.tables}
        for c in self.columns:
            out[c.table.lower()].append(c.name.lower())
        return out


@dataclass
class SchemaCatalog:
    entries: dict[str, DatabaseSchema]
    db_file_path: dict[str, str | None] = field(default_factory=dict)

    def __contains__(self, db_id):
        return db_id in self.entries

    def db_path(self, db_id: str) -> str | None:
        return self.db_file_path.get(db_id)


def load_dataset(paths: Sequence[str | Path]) -> list[Example]:
    """Concatenate Spider-layout JSON files in order, keeping duplicates."""
    out: list[Example] = []
    for path in paths:
        path = Path(path)
        try:
            records = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CorpusError(f"cannot read dataset file {path}: {exc}") from exc
        if not isinstance(records, list):
            raise MalformedRecordError(path, -1, "top level is not a JSON array")
        for i, rec in enumerate(records):
            if not isinstance(rec, dict):
                raise MalformedRecordError(path, i, "record is not an object")
            missing = [k for k in ("question", "db_id", "query") if not rec.get(k)]
            if missing:
                raise MalformedRecordError(path, i, f"missing field(s) {', '.join(missing)}")
            tag = rec.get("difficulty") or rec.get("hardness")
            try:
                out.append(Example(rec["question"], rec["db_id"], rec["query"], tag, f"{path.stem}#{i}"))
            except ValueError as exc:
                raise MalformedRecordError(path, i, str(exc)) from exc
    return out


def load_schema_catalog(tables_file: str | Path, db_root_dir: str | Path | None = None) -> SchemaCatalog:
    raw = json.loads(Path(tables_file).read_text(encoding="utf-8"))
    entries: dict[str, DatabaseSchema] = {}
    paths: dict[str, str | None] = {}
    for db in raw:
        db_id = db["db_id"]
        tables = tuple(db["table_names_original"])
        cols_raw = db["column_names_original"]
        types = db.get("column_types") or ["text"] * len(cols_raw)
        # index 0 is the "*" pseudo-column with table index -1
        col_refs: list[tuple[str, str] | None] = []
        columns = []
        seen_tables = set()
        for t in tables:
            if t.lower() in seen_tables:
                raise CatalogError(db_id, f"duplicate table name {t!r}")
            seen_tables.add(t.lower())
        seen_cols = set()
        for idx, (tix, name) in enumerate(cols_raw):
            if tix < 0:
                col_refs.append(None)
                continue
            if tix >= len(tables):
                raise CatalogError(db_id, f"column {idx} references table index {tix}")
            key = (tables[tix].lower(), name.lower())
            if key in seen_cols:
                raise CatalogError(db_id, f"duplicate column {tables[tix]}.{name}")
            seen_cols.add(key)
            col_refs.append((tables[tix], name))
            columns.append(Column(tables[tix], name, types[idx] if idx < len(types) else "text"))

        def ref(ix):
            if not isinstance(ix, int) or ix < 0 or ix >= len(col_refs) or col_refs[ix] is None:
                raise CatalogError(db_id, f"key references column index {ix} (have {len(col_refs)})")
            return col_refs[ix]

        pks = []
        for pk in db.get("primary_keys", []):
            # composite keys appear as nested lists in newer dumps
            for ix in pk if isinstance(pk, list) else [pk]:
                pks.append(ref(ix))
        fks = tuple((ref(a), ref(b)) for a, b in db.get("foreign_keys", []))
        entries[db_id] = DatabaseSchema(db_id, tables, tuple(columns), tuple(pks), fks)
        path = None
        if db_root_dir is not None:
            cand = Path(db_root_dir) / db_id / f"{db_id}.sqlite"
            if cand.exists():
                path = str(cand)
        paths[db_id] = path
    return SchemaCatalog(entries, paths)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitDataset:
    train: list[Example]
    validation: list[Example]
    test: list[Example]
    seed: int
    ratios: tuple[float, float, float]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": [e.to_json() for e in self.train],
            "validation": [e.to_json() for e in self.validation],
            "test": [e.to_json() for e in self.test],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SplitDataset":
        ex = lambda rows: [Example.from_json(r) for r in rows]  # noqa: E731
        return cls(ex(d["train"]), ex(d["validation"]), ex(d["test"]), d["seed"], tuple(d["ratios"]))


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    left = n - sum(counts)
    # ties resolved by split order (train, validation, test)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def resplit(
    examples: Sequence[Example],
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    label_fn: Callable[[Example], str] | None = None,
) -> SplitDataset:
    """Stratified train/validation/test split per class label.

    Classes with fewer than three members go wholly to train. Larger classes
    get a largest-remainder allocation, then any empty split borrows one
    example from the largest split so every class is present everywhere.
    """
    if not examples:
        raise CorpusError("cannot split an empty dataset")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    label_fn = label_fn or (lambda e: e.db_id)
    by_class: dict[str, list[int]] = defaultdict(list)
    for i, ex in enumerate(examples):
        by_class[label_fn(ex)].append(i)
    rng = random.Random(seed)
    assign = [0] * len(examples)
    for label in sorted(by_class):
        idx = list(by_class[label])
        if len(idx) < 3:
            continue
        rng.shuffle(idx)
        counts = _largest_remainder(len(idx), ratios)
        for j in range(3):
            if counts[j] == 0:
                donor = max(range(3), key=lambda k: (counts[k], -k))
                counts[donor] -= 1
                counts[j] += 1
        pos = 0
        for split, c in enumerate(counts):
            for i in idx[pos:pos + c]:
                assign[i] = split
            pos += c
    parts: list[list[Example]] = [[], [], []]
    for i, ex in enumerate(examples):
        parts[assign[i]].append(ex)
    return SplitDataset(parts[0], parts[1], parts[2], seed, ratios)


# ---------------------------------------------------------------------------
# label merging


@dataclass
class LabelMap:
    mapping: dict[str, str]
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for old, new in self.mapping.items():
            if not new:
                raise ValueError(f"empty merged label for {old!r}")
        self.provenance = {k: self.provenance.get(k, "manual") for k in self.mapping}

    def __call__(self, label: str) -> str:
        return self.mapping.get(label, label)

    def then(self, other: "LabelMap") -> "LabelMap":
        """Compose: apply ``self`` first, then ``other``."""
        mapping, prov = {}, {}
        for old, mid in self.mapping.items():
            new = other(mid)
            mapping[old] = new
            prov[old] = other.provenance.get(mid, self.provenance[old]) if new != mid else self.provenance[old]
        for old, new in other.mapping.items():
            if old not in mapping:
                mapping[old] = new
                prov[old] = other.provenance[old]
        return LabelMap(mapping, prov)

    def classes(self) -> list[str]:
        return sorted(set(self.mapping.values()))

    def to_json(self) -> dict:
        return {"mapping": dict(sorted(self.mapping.items())), "provenance": dict(sorted(self.provenance.items()))}

    @classmethod
    def from_json(cls, d: dict) -> "LabelMap":
        return cls(dict(d["mapping"]), dict(d.get("provenance", {})))

    @classmethod
    def identity(cls, labels: Iterable[str]) -> "LabelMap":
        return cls({l: l for l in labels}, {l: "manual" for l in labels})


def _rule_claims(rule: dict, label: str) -> str | None:
    """Target label if ``rule`` claims ``label``, else None."""
    if "labels" in rule:
        return rule["new"] if label in rule["labels"] else None
    if "pattern" in rule:
        return rule["new"] if re.fullmatch(rule["pattern"], label) else None
    if "strip_suffix" in rule:
        stripped = re.sub(f"(?:{rule['strip_suffix']})$", "", label)
        if stripped != label and stripped:
            return rule.get("new", stripped)
        return None
    raise ValueError(f"merge rule needs one of labels/pattern/strip_suffix: {rule}")


def merge_classes_rule_based(labels: Iterable[str], merge_rules: Sequence[dict]) -> LabelMap:
    """Map labels through explicit-list, regex or suffix-strip rules.

    A label claimed by two rules raises :class:`MergeConflictError`.
    """
    mapping, prov = {}, {}
    for label in sorted(set(labels)):
        hits = [(i, t) for i, r in enumerate(merge_rules) if (t := _rule_claims(r, label)) is not None]
        if len(hits) > 1:
            shown = "; ".join(f"rule {i} {merge_rules[i]} -> {t}" for i, t in hits)
            raise MergeConflictError(f"label {label!r} claimed by several rules: {shown}")
        mapping[label] = hits[0][1] if hits else label
        prov[label] = "rule_based" if hits else "manual"
    return _closed(LabelMap(mapping, prov))


def _closed(lm: LabelMap) -> LabelMap:
    # follow chains (a->b, b->c) so the map is idempotent on its image
    mapping = dict(lm.mapping)
    for k in mapping:
        seen = {k}
        v = mapping[k]
        while v in mapping and mapping[v] != v and v not in seen:
            seen.add(v)
            v = mapping[v]
        mapping[k] = v
    return LabelMap(mapping, lm.provenance)


def trigram_cosine(a: str, b: str) -> float:
    """Cosine similarity of character-trigram count vectors."""

    def grams(s):
        s = s.lower()
        return Counter(s[i:i + 3] for i in range(len(s) - 2)) if len(s) >= 3 else Counter([s])

    ga, gb = grams(a), grams(b)
    dot = sum(v * gb[k] for k, v in ga.items())
    na = math.sqrt(sum(v * v for v in ga.values()))
    nb = math.sqrt(sum(v * v for v in gb.values()))
    return dot / (na * nb) if na and nb else 0.0


def merge_classes_similarity(
    labels: Iterable[str],
    similarity_fn: Callable[[str, str], float] = trigram_cosine,
    threshold: float = 0.5,
    overrides: Sequence[dict] = (),
) -> LabelMap:
    """Single-link clustering of labels whose pairwise similarity reaches ``threshold``.

    ``overrides`` entries ``{"labels": [...], "new": name}`` force their members
    into one cluster and name it; other clusters are named by their sorted
    members joined with ``_``.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    labels = sorted(set(labels))
    parent = {l: l for l in labels}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            if similarity_fn(a, b) >= threshold:
                union(a, b)
    forced = {}
    for ov in overrides:
        members = [m for m in ov["labels"] if m in parent]
        for m in members[1:]:
            union(members[0], m)
        if members:
            forced[find(members[0])] = ov["new"]
    # re-resolve override roots after later unions
    names = {}
    for root, name in forced.items():
        names[find(root)] = name
    clusters: dict[str, list[str]] = defaultdict(list)
    for l in labels:
        clusters[find(l)].append(l)
    mapping, prov = {}, {}
    for root, members in clusters.items():
        if len(members) == 1 and root not in names:
            mapping[members[0]] = members[0]
            prov[members[0]] = "manual"
            continue
        new = names.get(root, "_".join(sorted(members)))
        for m in members:
            mapping[m] = new
            prov[m] = "manual" if root in names else "similarity_based"
    return LabelMap(mapping, prov)


def build_label_map(labels: Iterable[str], merge_config: dict | None) -> LabelMap:
    """Run the configured merge stages in order and compose them.

    ``merge_config`` holds ``{"stages": [...]}`` where each stage is either
    ``{"kind": "rule_based", "rules": [...]}`` or
    ``{"kind": "similarity", "threshold": t, "overrides": [...], "enabled_auto": bool}``.
    """
    labels = sorted(set(labels))
    current = LabelMap.identity(labels)
    for stage in (merge_config or {}).get("stages", []):
        image = current.classes()
        if stage["kind"] == "rule_based":
            step = merge_classes_rule_based(image, stage["rules"])
        elif stage["kind"] == "similarity":
            thr = stage.get("threshold", 0.5)
            if stage.get("enabled_auto", True):
                step = merge_classes_similarity(image, trigram_cosine, thr, stage.get("overrides", ()))
            else:
                step = merge_classes_similarity(image, lambda a, b: 0.0, thr, stage.get("overrides", ()))
        else:
            raise ValueError(f"unknown merge stage kind {stage['kind']!r}")
        current = current.then(step)
    closed = _closed(current)
    # intermediate names from earlier stages are not input labels
    return LabelMap({l: closed.mapping[l] for l in labels}, {l: closed.provenance[l] for l in labels})


# ---------------------------------------------------------------------------
# filtering


@dataclass
class DropRecord:
    example_id: str
    db_id: str
    reason: str


def filter_invalid(
    examples: Sequence[Example], catalog: SchemaCatalog, require_db_file: bool = True
) -> tuple[list[Example], list[DropRecord]]:
    kept, report = [], []
    for ex in examples:
        if ex.db_id not in catalog.entries:
            report.append(DropRecord(ex.example_id, ex.db_id, "missing_schema"))
        elif require_db_file and not catalog.db_path(ex.db_id):
            report.append(DropRecord(ex.example_id, ex.db_id, "missing_db_file"))
        else:
            kept.append(ex)
    return kept, report


def schema_lines(schema: DatabaseSchema) -> tuple[list[str], list[str]]:
    """Canonical rendering split into (per-table lines, key lines).

    One ``Table name(col:type, ...)`` line per table in catalog order, then a
    ``PK:`` line and one ``FK: t.c -> t.c`` line per foreign key.
    """
    tables = [
        f"Table {t}(" + ", ".join(f"{c.name}:{c.type}" for c in schema.columns_of(t)) + ")"
        for t in schema.tables
    ]
    keys = []
    if schema.primary_keys:
        keys.append("PK: " + ", ".join(f"{t}.{c}" for t, c in schema.primary_keys))
    keys += [f"FK: {a[0]}.{a[1]} -> {b[0]}.{b[1]}" for a, b in schema.foreign_keys]
    return tables, keys
