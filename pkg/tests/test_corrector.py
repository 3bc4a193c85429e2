import json
from functools import partial

import pytest

from routesql import demo
from routesql.corpus import Example, load_schema_catalog
from routesql.corrector import (
    COMMIT_AND_STOP,
    RUN_CORRECTION,
    RUN_FEEDBACK,
    STOP_FAILURE,
    CorrectionError,
    CorrectionGuideline,
    CorrectionOutcome,
    Discrepancy,
    FeedbackPreconditionError,
    FeedbackReport,
    GuidelineStore,
    LoopState,
    apply_guidelines_at_inference,
    correct,
    feedback,
    manage,
    run_correction_loop,
)
from routesql.llmgate import CallableBackend, RetriesExhaustedError
from routesql.prompts import load_template
from routesql.sqlgen import GUIDELINE_HEADER, SqlCandidate, build_prompt, link_schema


@pytest.fixture(scope="module")
def catalog(demo_dir):
    return load_schema_catalog(demo_dir / "tables.json", demo_dir / "database")


def _flawed(db, idx):
    item = demo.ITEMS[db][idx]
    ex = Example(item.question, db, item.gold_sql, example_id=f"{db}-{idx}")
    return ex, SqlCandidate(item.flaw.pred_sql, db)


def G(instruction, category="other"):
    return CorrectionGuideline("", category, instruction)


@pytest.mark.parametrize("state,action", [
    (LoopState(), RUN_FEEDBACK),
    (LoopState(0, RUN_FEEDBACK), RUN_CORRECTION),
    (LoopState(1, RUN_CORRECTION, True), COMMIT_AND_STOP),
    (LoopState(1, RUN_CORRECTION, False, 3), RUN_FEEDBACK),
    (LoopState(3, RUN_CORRECTION, False, 3), STOP_FAILURE),
    (LoopState(3, RUN_CORRECTION, True, 3), COMMIT_AND_STOP),
    (LoopState(1, COMMIT_AND_STOP, True), STOP_FAILURE),
])
def test_manager_transitions(state, action):
    assert manage(state) == action


def test_feedback_parses_and_maps_unknown_categories():
    reply = "```feedback\n- Missing Join: add authors\nsomething odd: keep this text\n```"
    rep = feedback("SELECT a FROM t", "SELECT b FROM t", "", CallableBackend(lambda r: reply))
    assert [(d.category, d.detail) for d in rep.discrepancies] == [("missing_join", "add authors"), ("other", "keep this text")]
    assert rep.render() == "- missing_join: add authors\n- other: keep this text"


def test_feedback_precondition_and_unparseable():
    with pytest.raises(FeedbackPreconditionError):
        feedback("SELECT a  FROM t;", "SELECT a FROM t", "", CallableBackend(lambda r: "x"))
    calls = []
    with pytest.raises(CorrectionError) as err:
        feedback("SELECT a FROM t", "SELECT b FROM t", "", CallableBackend(lambda r: calls.append(r) or "no blocks"))
    assert len(calls) == 2 and err.value.raw == "no blocks"


def test_correct_returns_candidate_and_drafts():
    reply = "```sql\nSELECT a FROM t\n```\n```guidelines\ngrouping: Group counts by the key.\n```"
    rep = FeedbackReport([Discrepancy("grouping", "not grouped")])
    cand, drafts = correct(SqlCandidate("SELECT b FROM t", "db"), rep, [], CallableBackend(lambda r: reply),
                           origin_example_id="e1")
    assert (cand.sql, cand.source, cand.iteration, cand.db_id) == ("SELECT a FROM t", "corrected", 1, "db")
    assert drafts == [CorrectionGuideline("", "grouping", "Group counts by the key.", "e1", 1)]
    with pytest.raises(ValueError):
        correct(cand, FeedbackReport([]), [], CallableBackend(lambda r: reply))


def test_guideline_validation():
    with pytest.raises(ValueError):
        G("   ")
    with pytest.raises(ValueError):
        CorrectionGuideline("", "made_up", "text")


def test_store_dedups_persists_and_selects(tmp_path):
    path = tmp_path / "g" / "guidelines.jsonl"
    store = GuidelineStore(path)
    added = store.commit([G("one", "grouping"), G("two"), G("one")])
    assert [g.id for g in added] == ["g00001", "g00002"]
    assert store.commit([G("two"), G("three", "grouping")])[0].id == "g00003"
    assert len(store) == 3
    lines = path.read_text().splitlines()
    assert [json.loads(l)["instruction"] for l in lines] == ["one", "two", "three"]
    again = GuidelineStore(path)
    assert again.snapshot() == store.snapshot()
    assert [g.instruction for g in again.select(2)] == ["three", "two"]
    assert [g.instruction for g in again.select(5, "grouping")] == ["three", "one"]
    assert GuidelineStore().commit([G("x")])[0].id == "g00001"


def test_loop_fast_path_when_already_correct(catalog):
    ex, _ = _flawed("library", 2)
    store = GuidelineStore()
    out = run_correction_loop(ex, SqlCandidate(ex.gold_sql, "library"), catalog, CallableBackend(demo.respond), store)
    assert out.resolved and out.iterations_used == 0 and len(store) == 0
    assert [t[0] for t in out.trace] == ["execute"]


def test_loop_resolves_and_commits(catalog):
    ex, pred = _flawed("library", 2)
    store = GuidelineStore()
    out = run_correction_loop(ex, pred, catalog, CallableBackend(demo.respond), store)
    assert out.resolved and out.iterations_used == 1
    assert out.final_sql.sql == ex.gold_sql and out.final_sql.source == "corrected"
    assert [t[0] for t in out.trace] == ["execute", "feedback", "correction", "execute", "manager"]
    assert out.committed == ["g00001"] and store.snapshot()[0].origin_example_id == ex.example_id
    # a second resolved loop with the same lesson adds nothing
    assert run_correction_loop(ex, pred, catalog, CallableBackend(demo.respond), store).committed == []
    assert CorrectionOutcome.from_json(json.loads(json.dumps(out.to_json()))) == out


def test_loop_stops_after_max_iterations(catalog):
    ex, pred = _flawed("library", 9)
    store = GuidelineStore()
    out = run_correction_loop(ex, pred, catalog, CallableBackend(demo.respond), store, max_iterations=2)
    assert not out.resolved and out.iterations_used == 2
    assert out.trace[-1] == ("manager", STOP_FAILURE, "")
    assert sum(1 for t in out.trace if t[0] == "correction") == 2
    assert len(store) == 0


def test_loop_backend_failure_is_recorded(catalog):
    ex, pred = _flawed("clinic", 3)

    def boom(req):
        raise RetriesExhaustedError("down")

    out = run_correction_loop(ex, pred, catalog, CallableBackend(boom), GuidelineStore())
    assert not out.resolved and out.final_sql == pred
    assert out.trace[-1] == ("error", RUN_FEEDBACK, "RetriesExhaustedError")
    assert "down" in out.error


def test_apply_guidelines_at_inference(catalog):
    store = GuidelineStore()
    builder = partial(build_prompt, "How many books?", link_schema(catalog, "library"), load_template("sql_generation"))
    assert GUIDELINE_HEADER not in apply_guidelines_at_inference(builder, store, 3).text
    store.commit([G("old"), G("mid", "grouping"), G("new")])
    text = apply_guidelines_at_inference(builder, store, 2).text
    tail = text.split(GUIDELINE_HEADER)[1]
    assert "- new" in tail and "- mid" in tail and "- old" not in tail
    assert "- mid" in apply_guidelines_at_inference(builder, store, 5, "grouping").text
