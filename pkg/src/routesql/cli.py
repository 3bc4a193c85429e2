"""``routesql`` command-line driver.

Every command takes ``--config run.json``. Relative paths in the config are
resolved against the config file's directory. Stage outputs go to
``<runs_dir>/<run_id>/<stage>/`` and each command rebuilds its own stage
directory from scratch, so reruns over unchanged inputs give identical files.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import corpus, prompts
from .corrector import CorrectionOutcome, GuidelineStore, run_correction_loop
from .llmgate import Backend, CallableBackend, LiveBackend, RecordingBackend, ReplayBackend, ScriptedBackend
from .metrics.ranking import RankedPrediction, map_score, ndcg_score, precision_recall_at_1, within_top_k
from .metrics.report import EvalConfig, PipelineOutput, evaluate_run
from .router import FeatureConfig, RouterModel, TrainConfig, featurize, train
from .rules import EntityAssignment, RuleStore, annotate_question, augment_question, generate_ruleset
from .sqlgen import PipelineError, SqlCandidate, pipeline_generate

log = logging.getLogger("routesql")

STAGES = ("prepare-data", "gen-rules", "annotate", "train-router", "eval-router", "generate-sql", "correct-sql", "evaluate")

# artifact -> (producing command, relative file name)
ARTIFACTS = {
    "splits": ("prepare-data", "splits.json"),
    "label_map": ("prepare-data", "label_map.json"),
    "rulesets": ("gen-rules", "rulesets"),
    "annotations": ("annotate", "annotations.jsonl"),
    "model": ("train-router", "model.json"),
    "candidates": ("generate-sql", "candidates.jsonl"),
    "outcomes": ("correct-sql", "outcomes.jsonl"),
}


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    dataset: list[Path]
    tables: Path
    db_root: Path
    runs_dir: Path
    run_id: str = "default"
    split: dict = field(default_factory=lambda: {"ratios": [0.7, 0.15, 0.15]})
    merge_rules: Path | None = None
    eval_split: str = "test"
    rule_samples: int = 5
    router: dict = field(default_factory=dict)
    templates: dict = field(default_factory=dict)
    backend: dict = field(default_factory=lambda: {"kind": "scripted"})
    correction: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, path.resolve().parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path) -> "RunConfig":
        def p(v):
            if v is None:
                return None
            q = Path(v)
            return q if q.is_absolute() else base_dir / q

        try:
            ds = raw["dataset"]
            cfg = cls(
                dataset=[p(x) for x in (ds if isinstance(ds, list) else [ds])],
                tables=p(raw["tables"]),
                db_root=p(raw["db_root"]),
                runs_dir=p(raw.get("runs_dir", "runs")),
                run_id=raw.get("run_id", "default"),
                split=dict(raw.get("split", {"ratios": [0.7, 0.15, 0.15]})),
                merge_rules=p(raw.get("merge_rules")),
                eval_split=raw.get("eval_split", "test"),
                rule_samples=int(raw.get("rule_samples", 5)),
                router=dict(raw.get("router", {})),
                templates={k: p(v) for k, v in raw.get("templates", {}).items()},
                backend=dict(raw.get("backend", {"kind": "scripted"})),
                correction=dict(raw.get("correction", {})),
                generation=dict(raw.get("generation", {})),
                metrics=dict(raw.get("metrics", {})),
                base_dir=base_dir,
            )
        except KeyError as exc:
            raise ConfigError(f"config lacks required key {exc.args[0]!r}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        missing = [str(x) for x in [*self.dataset, self.tables, self.db_root] if not x.exists()]
        if self.merge_rules is not None and not self.merge_rules.exists():
            missing.append(str(self.merge_rules))
        missing += [str(v) for v in self.templates.values() if not v.exists()]
        if missing:
            raise ConfigError("config references missing path(s): " + ", ".join(missing))
        if "seed" not in self.split:
            raise ConfigError("split.seed is required")
        if "seed" not in self.router:
            raise ConfigError("router.seed is required")
        if self.eval_split not in ("train", "validation", "test"):
            raise ConfigError(f"eval_split must be train, validation or test, not {self.eval_split!r}")
        kind = self.backend.get("kind")
        if kind not in ("scripted", "replay", "live", "demo"):
            raise ConfigError(f"unknown backend kind {kind!r}")

    def stage_dir(self, stage: str) -> Path:
        return self.runs_dir / self.run_id / stage

    def artifact(self, name: str) -> Path:
        stage, fname = ARTIFACTS[name]
        return self.stage_dir(stage) / fname

    def template(self, name: str) -> str:
        path = self.templates.get(name)
        return prompts.load_template(str(path) if path else name)


def make_backend(spec: dict, base_dir: Path) -> Backend:
    kind = spec.get("kind")

    def p(v):
        q = Path(v)
        return q if q.is_absolute() else base_dir / q

    if kind == "scripted":
        if "fixtures" not in spec:
            raise ConfigError("scripted backend needs backend.fixtures")
        return ScriptedBackend.load(p(spec["fixtures"]))
    if kind == "demo":
        from . import demo

        return CallableBackend(demo.respond)
    live = None
    live_spec = spec if kind == "live" else spec.get("live")
    if live_spec:
        live = LiveBackend(
            live_spec["base_url"],
            live_spec["model"],
            api_key_env=live_spec.get("api_key_env", "ROUTESQL_API_KEY"),
            timeout=float(live_spec.get("timeout", 60.0)),
        )
    if kind == "live":
        return live
    return ReplayBackend(p(spec["cache"]), spec.get("mode", "strict"), live)


# ---------------------------------------------------------------------------
# io helpers


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _dump_lines(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")


def _read_lines(path: Path) -> list[dict]:
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def _fresh(cfg: RunConfig, stage: str) -> Path:
    d = cfg.stage_dir(stage)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d


def _require(cfg: RunConfig, stage: str, *names: str) -> None:
    for name in names:
        path = cfg.artifact(name)
        if not path.exists():
            producer = ARTIFACTS[name][0]
            raise StageError(stage, f"missing {path}; run `routesql {producer}` first")


def _catalog(cfg: RunConfig) -> corpus.SchemaCatalog:
    return corpus.load_schema_catalog(cfg.tables, cfg.db_root)


def _splits(cfg: RunConfig) -> corpus.SplitDataset:
    return corpus.SplitDataset.from_json(json.loads(cfg.artifact("splits").read_text(encoding="utf-8")))


def _label_map(cfg: RunConfig) -> corpus.LabelMap:
    return corpus.LabelMap.from_json(json.loads(cfg.artifact("label_map").read_text(encoding="utf-8")))


def _eval_examples(cfg: RunConfig) -> list[corpus.Example]:
    return getattr(_splits(cfg), cfg.eval_split)


def _class_members(lm: corpus.LabelMap) -> dict[str, list[str]]:
    members: dict[str, list[str]] = {}
    for raw, cls in sorted(lm.mapping.items()):
        members.setdefault(cls, []).append(raw)
    return members


# ---------------------------------------------------------------------------
# stages


def cmd_prepare_data(cfg: RunConfig, llm: Backend | None = None) -> None:
    out = _fresh(cfg, "prepare-data")
    examples = corpus.load_dataset(cfg.dataset)
    catalog = _catalog(cfg)
    kept, dropped = corpus.filter_invalid(examples, catalog)
    merge = json.loads(cfg.merge_rules.read_text(encoding="utf-8")) if cfg.merge_rules else None
    lm = corpus.build_label_map([e.db_id for e in kept], merge)
    split = corpus.resplit(kept, cfg.split.get("ratios", (0.7, 0.15, 0.15)), int(cfg.split["seed"]), lambda e: lm(e.db_id))
    _dump(out / "splits.json", split.to_json())
    _dump(out / "label_map.json", lm.to_json())
    _dump(out / "dropped.json", [vars(d) for d in dropped])
    log.info("prepare-data: kept %d, dropped %d, %d classes", len(kept), len(dropped), len(lm.classes()))


def cmd_gen_rules(cfg: RunConfig, llm: Backend) -> None:
    _require(cfg, "gen-rules", "splits")
    out = _fresh(cfg, "gen-rules")
    split = _splits(cfg)
    catalog = _catalog(cfg)
    template = cfg.template("rules_generation")
    by_db: dict[str, list[str]] = {}
    for ex in split.train:
        by_db.setdefault(ex.db_id, []).append(ex.question)
    store = RuleStore(
        generate_ruleset(db, catalog.entries[db], qs[: cfg.rule_samples], llm, template)
        for db, qs in sorted(by_db.items())
    )
    store.save(out / "rulesets")
    log.info("gen-rules: %d rulesets, %d entities", len(store), len(store.vocabulary()))


def cmd_annotate(cfg: RunConfig, llm: Backend) -> None:
    _require(cfg, "annotate", "splits", "rulesets")
    out = _fresh(cfg, "annotate")
    split = _splits(cfg)
    store = RuleStore.load(cfg.artifact("rulesets"))
    template = cfg.template("entity_extraction")
    rows = []
    for name in ("train", "validation", "test"):
        for ex in getattr(split, name):
            assignments = annotate_question(ex.question, store, llm, template)
            rows.append({
                "example_id": ex.example_id,
                "split": name,
                "question_aug": augment_question(ex.question, assignments).text,
                "assignments": [a.to_json() for a in assignments],
            })
    _dump_lines(out / "annotations.jsonl", rows)


def _annotated_pairs(model_fc: FeatureConfig, vocab, lm, examples, annotations):
    pairs = []
    for ex in examples:
        row = annotations[ex.example_id]
        assignments = [EntityAssignment.from_json(ex.question, a) for a in row["assignments"]]
        pairs.append((featurize(row["question_aug"], assignments, model_fc, vocab), lm(ex.db_id)))
    return pairs


def cmd_train_router(cfg: RunConfig, llm: Backend | None = None) -> None:
    _require(cfg, "train-router", "splits", "label_map", "rulesets", "annotations")
    out = _fresh(cfg, "train-router")
    split, lm = _splits(cfg), _label_map(cfg)
    vocab = RuleStore.load(cfg.artifact("rulesets")).vocabulary()
    annotations = {r["example_id"]: r for r in _read_lines(cfg.artifact("annotations"))}
    r = cfg.router
    fc = FeatureConfig(d_t=int(r.get("d_t", 1 << 16)), hash_seed=int(r.get("hash_seed", 0)))
    tc = TrainConfig(
        learning_rate=float(r.get("learning_rate", 1e-3)),
        batch_size=int(r.get("batch_size", 8)),
        epochs=int(r.get("epochs", 50)),
        seed=int(r["seed"]),
        patience=int(r.get("patience", 5)),
    )
    train_pairs = _annotated_pairs(fc, vocab, lm, split.train, annotations)
    val_pairs = _annotated_pairs(fc, vocab, lm, split.validation, annotations) if r.get("early_stopping", True) else ()
    model = train(train_pairs, tc, fc, vocab, val_pairs, lm.classes())
    model.save(out / "model.json")
    _dump(out / "training.json", {"loss_trace": model.loss_trace, "val_accuracy_trace": model.val_accuracy_trace})


def cmd_eval_router(cfg: RunConfig, llm: Backend | None = None) -> None:
    _require(cfg, "eval-router", "model", "annotations", "label_map")
    out = _fresh(cfg, "eval-router")
    model = RouterModel.load(cfg.artifact("model"))
    lm = _label_map(cfg)
    annotations = {r["example_id"]: r for r in _read_lines(cfg.artifact("annotations"))}
    k = len(model.class_list)
    rows, preds = [], []
    for ex in _eval_examples(cfg):
        row = annotations[ex.example_id]
        assignments = [EntityAssignment.from_json(ex.question, a) for a in row["assignments"]]
        ranked = model.predict_topk(model.featurize(row["question_aug"], assignments), k)
        p = RankedPrediction(lm(ex.db_id), tuple(c for c, _ in ranked), tuple(s for _, s in ranked))
        preds.append(p)
        rows.append({"example_id": ex.example_id, "gold_class": p.gold_class, "ranked_classes": list(p.ranked_classes),
                     "scores": [round(s, 12) for s in p.scores]})
    top_k = int(cfg.metrics.get("top_k", 5))
    p1, r1 = precision_recall_at_1(preds)
    _dump(out / "ranking.json", {
        "split": cfg.eval_split,
        "metrics": {"map": map_score(preds), "ndcg": ndcg_score(preds), "p_at_1": p1, "r_at_1": r1,
                    "within_top_k": within_top_k(preds, top_k), "top_k": top_k, "n": len(preds)},
        "predictions": rows,
    })


def _guidelines_for_generation(cfg: RunConfig) -> list[str] | None:
    path, top_m = cfg.generation.get("guideline_store"), int(cfg.generation.get("guidelines_top_m", 0))
    if not path or top_m <= 0:
        return None
    store = GuidelineStore(Path(path) if Path(path).is_absolute() else cfg.base_dir / path)
    return [g.instruction for g in store.select(top_m)] or None


def cmd_generate_sql(cfg: RunConfig, llm: Backend) -> None:
    _require(cfg, "generate-sql", "splits", "label_map", "rulesets", "model")
    out = _fresh(cfg, "generate-sql")
    store = RuleStore.load(cfg.artifact("rulesets"))
    model = RouterModel.load(cfg.artifact("model"))
    lm = _label_map(cfg)
    catalog = _catalog(cfg)
    members = _class_members(lm)
    template, ent_template = cfg.template("sql_generation"), cfg.template("entity_extraction")
    guidelines = _guidelines_for_generation(cfg)
    rows, traces = [], []
    for ex in _eval_examples(cfg):
        row = {"example_id": ex.example_id, "gold_class": lm(ex.db_id), "candidate": None,
               "ranked_classes": [], "error": ""}
        try:
            cand, trace = pipeline_generate(ex.question, store, model, catalog, llm, template, members,
                                            guidelines, len(model.class_list), ent_template)
            row["candidate"] = cand.to_json()
        except PipelineError as exc:
            log.warning("generate-sql %s: %s", ex.example_id, exc)
            row["error"] = str(exc)
            trace = exc.trace
        row["ranked_classes"] = [c for c, _ in trace.get("predict_topk", [])]
        rows.append(row)
        traces.append({"example_id": ex.example_id, "trace": trace})
    _dump_lines(out / "candidates.jsonl", rows)
    _dump_lines(out / "traces.jsonl", traces)


def cmd_correct_sql(cfg: RunConfig, llm: Backend) -> None:
    _require(cfg, "correct-sql", "splits", "candidates")
    out = _fresh(cfg, "correct-sql")
    shared = cfg.correction.get("guideline_store")
    if shared:
        shared = Path(shared) if Path(shared).is_absolute() else cfg.base_dir / shared
    store = GuidelineStore(shared or out / "guidelines.jsonl")
    catalog = _catalog(cfg)
    examples = {e.example_id: e for e in _eval_examples(cfg)}
    max_it = int(cfg.correction.get("max_iterations", 3))
    timeout = float(cfg.metrics.get("timeout", 30.0))
    fb_t, corr_t = cfg.template("feedback"), cfg.template("correction")
    rows = []
    for row in _read_lines(cfg.artifact("candidates")):
        ex = examples.get(row["example_id"])
        if ex is None:
            raise StageError("correct-sql", f"candidate {row['example_id']} is not in the {cfg.eval_split} split")
        if row["candidate"] is None:
            rows.append({"example_id": ex.example_id, "outcome": None})
            continue
        outcome = run_correction_loop(ex, SqlCandidate.from_json(row["candidate"]), catalog, llm, store,
                                      max_it, timeout, fb_t, corr_t)
        rows.append({"example_id": ex.example_id, "outcome": outcome.to_json()})
    _dump_lines(out / "outcomes.jsonl", rows)
    if shared:
        _dump(out / "guidelines_used.json", {"path": str(shared), "count": len(store)})


def cmd_evaluate(cfg: RunConfig, llm: Backend | None = None, markdown: bool = False) -> None:
    _require(cfg, "evaluate", "splits", "candidates")
    out = _fresh(cfg, "evaluate")
    examples = _eval_examples(cfg)
    outcomes = {}
    if cfg.artifact("outcomes").exists():
        outcomes = {r["example_id"]: r["outcome"] for r in _read_lines(cfg.artifact("outcomes"))}
    outputs = []
    for row in _read_lines(cfg.artifact("candidates")):
        cand = row["candidate"]
        oc = outcomes.get(row["example_id"])
        corr = CorrectionOutcome.from_json(oc) if oc else None
        outputs.append(PipelineOutput(
            row["example_id"],
            cand["sql"] if cand else None,
            tuple(row["ranked_classes"]),
            row["gold_class"],
            corr.final_sql.sql if corr else None,
            corr.iterations_used if corr else 0,
            row["error"],
        ))
    ec = EvalConfig(bool(cfg.metrics.get("em_ignore_values", False)), float(cfg.metrics.get("timeout", 30.0)),
                    int(cfg.metrics.get("top_k", 5)))
    report = evaluate_run(examples, outputs, _catalog(cfg), ec)
    (out / "report.json").write_text(report.dumps(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    if markdown:
        (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    a = report.aggregates
    log.info("evaluate: EX %.1f%% -> %.1f%%, EM %.1f%% -> %.1f%%", a["ex_before"], a["ex_after"], a["em_before"], a["em_after"])


COMMANDS: dict[str, Callable] = {
    "prepare-data": cmd_prepare_data,
    "gen-rules": cmd_gen_rules,
    "annotate": cmd_annotate,
    "train-router": cmd_train_router,
    "eval-router": cmd_eval_router,
    "generate-sql": cmd_generate_sql,
    "correct-sql": cmd_correct_sql,
    "evaluate": cmd_evaluate,
}


def run_stage(stage: str, cfg: RunConfig, llm: Backend | None, **kw) -> None:
    try:
        COMMANDS[stage](cfg, llm, **kw)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def run_all(cfg: RunConfig, llm: Backend, markdown: bool = False) -> None:
    for stage in STAGES:
        run_stage(stage, cfg, llm, **({"markdown": markdown} if stage == "evaluate" else {}))


# ---------------------------------------------------------------------------
# demo


DEMO_CONFIG = {
    "dataset": ["questions.json"],
    "tables": "tables.json",
    "db_root": "database",
    "runs_dir": "runs",
    "run_id": "demo",
    "merge_rules": "merge_rules.json",
    "split": {"ratios": [0.5, 0.2, 0.3], "seed": 7},
    "eval_split": "test",
    "rule_samples": 5,
    "router": {"d_t": 4096, "hash_seed": 0, "learning_rate": 0.05, "batch_size": 8, "epochs": 40, "seed": 0},
    "backend": {"kind": "scripted", "fixtures": "fixtures.json"},
    "correction": {"max_iterations": 3},
    "metrics": {"em_ignore_values": False, "timeout": 30, "top_k": 5},
}


def init_demo(target: str | Path) -> Path:
    """Write the mini-corpus and a scripted fixture table recorded from the demo responder."""
    from . import demo

    target = Path(target)
    demo.write_corpus(target)
    with tempfile.TemporaryDirectory() as tmp:
        raw = dict(DEMO_CONFIG, runs_dir=str(Path(tmp) / "runs"), backend={"kind": "demo"})
        cfg = RunConfig.from_dict(raw, target.resolve())
        rec = RecordingBackend(CallableBackend(demo.respond))
        run_all(cfg, rec)
    rec.recorded.save(target / "fixtures.json")
    config_path = target / "config.json"
    _dump(config_path, DEMO_CONFIG)
    return config_path


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routesql", description="Routed text-to-SQL pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run-all"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--run-id", help="override run_id from the config")
        if name in ("evaluate", "run-all"):
            sp.add_argument("--markdown", action="store_true", help="also write report.md")
    sp = sub.add_parser("init-demo", help="write the bundled mini-corpus and its fixtures")
    sp.add_argument("directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "init-demo":
            print(init_demo(args.directory))
            return 0
        cfg = RunConfig.load(args.config)
        if args.run_id:
            cfg.run_id = args.run_id
        needs_llm = args.command in ("gen-rules", "annotate", "generate-sql", "correct-sql", "run-all")
        llm = make_backend(cfg.backend, cfg.base_dir) if needs_llm else None
        if args.command == "run-all":
            run_all(cfg, llm, args.markdown)
        else:
            kw = {"markdown": args.markdown} if args.command == "evaluate" else {}
            run_stage(args.command, cfg, llm, **kw)
    except ConfigError as exc:
        print(f"routesql: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"routesql: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
