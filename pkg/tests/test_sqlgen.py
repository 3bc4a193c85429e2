import pytest

from routesql import demo
from routesql.corpus import load_schema_catalog
from routesql.llmgate import CallableBackend, FixtureMissError, ScriptedBackend
from routesql.prompts import TemplateError, load_template
from routesql.router import FeatureConfig, TrainConfig, featurize, train
from routesql.rules import EntityAssignment, EntityRule, RuleSet, RuleStore, annotate_question, augment_question
from routesql.sqlgen import (
    GUIDELINE_HEADER,
    PipelineError,
    Prompt,
    SchemaLinkingError,
    SqlCandidate,
    SqlGenerationError,
    build_prompt,
    extract_sql,
    generate_sql,
    link_schema,
    pipeline_generate,
    resolve_db,
)


@pytest.fixture(scope="module")
def catalog(demo_dir):
    return load_schema_catalog(demo_dir / "tables.json", demo_dir / "database")


@pytest.fixture(scope="module")
def store():
    return RuleStore(
        RuleSet(db, [EntityRule(n, d, tuple(c)) for n, d, c in rules]) for db, rules in demo.RULES.items()
    )


@pytest.fixture(scope="module")
def router(store):
    llm = CallableBackend(demo.respond)
    cfg = FeatureConfig(d_t=1024)
    pairs = []
    for db, items in demo.ITEMS.items():
        for it in items:
            a = annotate_question(it.question, store, llm)
            pairs.append((featurize(augment_question(it.question, a).text, a, cfg, store.vocabulary()), db))
    return train(pairs, TrainConfig(learning_rate=0.05, epochs=30, seed=0), cfg, store.vocabulary())


def test_link_schema(catalog):
    s = link_schema(catalog, "clinic")
    assert s.rendered.splitlines()[0] == "Table doctors(doctor_id:number, name:text, specialty:text)"
    assert "FK: visits.doctor_id -> doctors.doctor_id" in s.rendered
    with pytest.raises(SchemaLinkingError):
        link_schema(catalog, "nowhere")


def test_build_prompt_fills_and_appends_guidelines(catalog):
    tpl = load_template("sql_generation")
    schema = link_schema(catalog, "library")
    plain = build_prompt("How many books?", schema, tpl)
    assert "Question: How many books?" in plain.text and schema.rendered in plain.text
    assert GUIDELINE_HEADER not in plain.text
    g = ["First lesson.", "Second lesson."]
    withg = build_prompt("How many books?", schema, tpl, g)
    tail = withg.text.split(GUIDELINE_HEADER)[1]
    assert tail.index("- First lesson.") < tail.index("- Second lesson.")
    assert withg.digest != plain.digest


def test_build_prompt_template_checks():
    with pytest.raises(TemplateError):
        build_prompt("q", "schema", "Question: {{question}} only")
    with pytest.raises(TemplateError):
        build_prompt("q", "schema", "Schema: {{schema}} only")


@pytest.mark.parametrize("reply,expected", [
    ("```sql\nSELECT 1\n```", "SELECT 1"),
    ("```\nselect a from t;\n```", "select a from t"),
    ("Sure! Here it is:\nSELECT a FROM t\nThat should work.", "SELECT a FROM t"),
    ("First try SELECT a FROM\n\nbetter: SELECT a, b FROM t WHERE b > 1;", "SELECT a, b FROM t WHERE b > 1"),
    ("I cannot answer that.", None),
])
def test_extract_sql(reply, expected):
    assert extract_sql(reply) == expected


def test_generate_sql_retry_then_error():
    replies = iter(["nothing useful", "```sql\nSELECT 3\n```"])
    cand = generate_sql(CallableBackend(lambda r: next(replies)), Prompt("p"), "db")
    assert cand.sql == "SELECT 3" and cand.iteration == 0 and cand.source == "generated"
    with pytest.raises(SqlGenerationError):
        generate_sql(CallableBackend(lambda r: "no"), Prompt("p"))


def test_candidate_invariants():
    with pytest.raises(ValueError):
        SqlCandidate("SELECT 1", "db", "corrected", 0)
    with pytest.raises(ValueError):
        SqlCandidate("SELECT 1", "db", "generated", 2)
    with pytest.raises(ValueError):
        SqlCandidate("  ", "db")
    c = SqlCandidate("SELECT 1", "db", "corrected", 1, "abc", "scripted")
    assert SqlCandidate.from_json(c.to_json()) == c


def test_resolve_db_for_merged_class():
    members = {"college": ["college_2", "college_1"]}
    fired = [EntityAssignment("q", {"x": True, "y": True}, "college_2"), EntityAssignment("q", {"x": True}, "college_1")]
    assert resolve_db("college", members, fired) == "college_2"
    assert resolve_db("college", members, []) == "college_1"  # tie -> lexicographic
    assert resolve_db("pets", members, fired) == "pets"


def test_pipeline_routes_and_generates(catalog, store, router):
    llm = CallableBackend(demo.respond)
    cand, trace = pipeline_generate("Which doctors are cardiologists?", store, router, catalog, llm)
    assert cand.db_id == "clinic"
    assert cand.sql == "SELECT name FROM doctors WHERE specialty = 'Cardiology'"
    assert list(trace) == ["question", "extract_entities", "augment_question", "featurize", "predict_topk",
                           "link_schema", "build_prompt", "generate_sql"]
    assert trace["augment_question"] == "Which doctors are cardiologists? medical_staff."
    assert len(trace["predict_topk"]) == 3


def test_pipeline_is_deterministic(catalog, store, router):
    llm = CallableBackend(demo.respond)
    q = "Show the names of passengers."
    assert pipeline_generate(q, store, router, catalog, llm) == pipeline_generate(q, store, router, catalog, llm)


def test_pipeline_error_is_stage_tagged(catalog, store, router):
    with pytest.raises(PipelineError) as err:
        pipeline_generate("anything", store, router, catalog, ScriptedBackend())
    assert err.value.stage == "extract_entities"
    assert isinstance(err.value.cause, FixtureMissError)

    def only_entities(req):
        if req.tag == "sql":
            return "no sql here"
        return demo.respond(req)

    with pytest.raises(PipelineError) as err:
        pipeline_generate("How many airports are there?", store, router, catalog, CallableBackend(only_entities))
    assert err.value.stage == "generate_sql"
    assert "predict_topk" in err.value.trace
