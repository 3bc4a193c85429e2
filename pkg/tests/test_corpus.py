import json
import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routesql.corpus import (
    CatalogError,
    Example,
    LabelMap,
    MalformedRecordError,
    MergeConflictError,
    SplitDataset,
    build_label_map,
    filter_invalid,
    load_dataset,
    load_schema_catalog,
    merge_classes_rule_based,
    merge_classes_similarity,
    resplit,
    schema_lines,
    trigram_cosine,
)

TABLES = [
    {
        "db_id": "concert_singer",
        "table_names_original": ["singer", "concert"],
        "column_names_original": [[-1, "*"], [0, "singer_id"], [0, "name"], [1, "concert_id"], [1, "singer_id"]],
        "column_types": ["text", "number", "text", "number", "number"],
        "primary_keys": [1, 3],
        "foreign_keys": [[4, 1]],
    }
]


def _examples(spec):
    """spec: {label: count} -> examples with distinct ids."""
    out = []
    for label, n in spec.items():
        for i in range(n):
            out.append(Example(f"q {label} {i}", label, "SELECT 1", None, f"{label}#{i}"))
    return out


def test_load_dataset_concatenates_and_ids(tmp_path):
    a = tmp_path / "train.json"
    b = tmp_path / "dev.json"
    a.write_text(json.dumps([{"question": "q1", "db_id": "d", "query": "SELECT 1", "hardness": "easy"}]))
    b.write_text(json.dumps([{"question": "q1", "db_id": "d", "query": "SELECT 1"}]))
    exs = load_dataset([a, b])
    assert [e.example_id for e in exs] == ["train#0", "dev#0"]
    assert exs[0].difficulty_tag == "easy" and exs[1].difficulty_tag is None


def test_load_dataset_reports_bad_record(tmp_path):
    p = tmp_path / "train.json"
    p.write_text(json.dumps([{"question": "q", "db_id": "d", "query": "SELECT 1"}, {"question": "q", "db_id": "d"}]))
    with pytest.raises(MalformedRecordError) as err:
        load_dataset([p])
    assert err.value.index == 1
    assert "train.json" in str(err.value)


def test_catalog_loads_keys_and_db_path(tmp_path):
    tables = tmp_path / "tables.json"
    tables.write_text(json.dumps(TABLES))
    (tmp_path / "db" / "concert_singer").mkdir(parents=True)
    (tmp_path / "db" / "concert_singer" / "concert_singer.sqlite").write_bytes(b"")
    cat = load_schema_catalog(tables, tmp_path / "db")
    s = cat.entries["concert_singer"]
    assert s.primary_keys == (("singer", "singer_id"), ("concert", "concert_id"))
    assert s.foreign_keys == ((("concert", "singer_id"), ("singer", "singer_id")),)
    assert cat.db_path("concert_singer").endswith("concert_singer.sqlite")
    tables_l, keys = schema_lines(s)
    assert tables_l[0] == "Table singer(singer_id:number, name:text)"
    assert keys[-1] == "FK: concert.singer_id -> singer.singer_id"


def test_catalog_rejects_out_of_range_key(tmp_path):
    bad = json.loads(json.dumps(TABLES))
    bad[0]["foreign_keys"] = [[4, 99]]
    p = tmp_path / "tables.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(CatalogError) as err:
        load_schema_catalog(p)
    assert err.value.db_id == "concert_singer"


def test_filter_invalid_reports_reasons(tmp_path):
    p = tmp_path / "tables.json"
    p.write_text(json.dumps(TABLES))
    cat = load_schema_catalog(p, tmp_path)
    exs = [Example("q", "concert_singer", "SELECT 1", None, "a"), Example("q", "nowhere", "SELECT 1", None, "b")]
    kept, dropped = filter_invalid(exs, cat)
    assert kept == []
    assert [(d.example_id, d.reason) for d in dropped] == [("a", "missing_db_file"), ("b", "missing_schema")]
    kept, _ = filter_invalid(exs, cat, require_db_file=False)
    assert [e.example_id for e in kept] == ["a"]


def test_resplit_100_examples_exact_counts():
    split = resplit(_examples({"x": 100}), (0.7, 0.15, 0.15), seed=3)
    assert (len(split.train), len(split.validation), len(split.test)) == (70, 15, 15)


def test_resplit_small_classes():
    split = resplit(_examples({"two": 2, "three": 3}), seed=0)
    per = {n: Counter(e.db_id for e in getattr(split, n)) for n in ("train", "validation", "test")}
    assert per["train"]["two"] == 2
    # a three-member class still reaches every split
    assert [per[n]["three"] for n in ("train", "validation", "test")] == [1, 1, 1]


def test_resplit_is_seeded():
    exs = _examples({"a": 17, "b": 9})
    one = resplit(exs, seed=5)
    two = resplit(exs, seed=5)
    other = resplit(exs, seed=6)
    assert one.to_json() == two.to_json()
    assert one.to_json() != other.to_json()
    assert SplitDataset.from_json(one.to_json()).to_json() == one.to_json()


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.sampled_from("abcdefgh"), st.integers(1, 40), min_size=1), st.integers(0, 10_000))
def test_resplit_partitions_and_stratifies(spec, seed):
    exs = _examples(spec)
    split = resplit(exs, seed=seed)
    ids = [e.example_id for part in (split.train, split.validation, split.test) for e in part]
    assert sorted(ids) == sorted(e.example_id for e in exs)
    for label, n in spec.items():
        counts = [sum(e.db_id == label for e in part) for part in (split.train, split.validation, split.test)]
        if n < 3:
            assert counts == [n, 0, 0]
        else:
            assert min(counts) >= 1
            if all(n * r >= 1 for r in (0.7, 0.15, 0.15)):
                assert all(abs(c - n * r) < 1 for c, r in zip(counts, (0.7, 0.15, 0.15)))


def test_resplit_rejects_bad_ratios():
    with pytest.raises(ValueError):
        resplit(_examples({"a": 5}), (0.5, 0.5, 0.5))


def test_rule_merge_list_pattern_suffix():
    labels = ["college_1", "college_2", "college_3", "department_management", "department_store", "pets_1", "flight"]
    rules = [
        {"pattern": r"college_\d+", "new": "college"},
        {"labels": ["department_management", "department_store"], "new": "department"},
        {"strip_suffix": r"_\d+"},
    ]
    with pytest.raises(MergeConflictError):
        merge_classes_rule_based(labels, rules)
    lm = merge_classes_rule_based(labels, rules[:2] + [{"labels": ["pets_1"], "new": "pets"}])
    assert lm("college_2") == "college"
    assert lm("department_store") == "department"
    assert lm("pets_1") == "pets"
    assert lm("flight") == "flight"
    assert lm.provenance["flight"] == "manual"
    assert lm.provenance["college_1"] == "rule_based"


def test_suffix_strip_rule():
    lm = merge_classes_rule_based(["pets_1", "flight_2", "flight"], [{"strip_suffix": r"_\d+"}])
    assert lm.mapping == {"pets_1": "pets", "flight_2": "flight", "flight": "flight"}


def test_label_map_idempotent_after_chain():
    lm = merge_classes_rule_based(["a", "b", "c"], [{"labels": ["a"], "new": "b"}, {"labels": ["b"], "new": "c"}])
    for label in "abc":
        assert lm(lm(label)) == lm(label)


def test_trigram_cosine_hand_value():
    # music -> {mus, usi, sic}; musical adds {ica, cal}; 3 shared / (sqrt3 * sqrt5)
    assert trigram_cosine("music", "musical") == pytest.approx(3 / math.sqrt(15), abs=1e-12)
    assert trigram_cosine("abc", "xyz") == 0.0


def test_similarity_merge_threshold_and_override():
    lm = merge_classes_similarity(["music", "musical", "flight"], trigram_cosine, threshold=0.7)
    assert lm("music") == lm("musical") == "music_musical"
    assert lm.provenance["music"] == "similarity_based"
    lm = merge_classes_similarity(["music", "musical", "flight"], trigram_cosine, 0.9,
                                  [{"labels": ["music", "flight"], "new": "mf"}])
    assert lm("flight") == "mf" and lm("musical") == "musical"
    with pytest.raises(ValueError):
        merge_classes_similarity(["a"], trigram_cosine, 1.0)


def test_build_label_map_composes_and_serialises():
    cfg = {"stages": [{"kind": "rule_based", "rules": [{"labels": ["a1", "a2"], "new": "a"}]},
                      {"kind": "similarity", "enabled_auto": False, "overrides": [{"labels": ["a", "b"], "new": "ab"}]}]}
    lm = build_label_map(["a1", "a2", "b", "c"], cfg)
    assert lm.mapping == {"a1": "ab", "a2": "ab", "b": "ab", "c": "c"}
    assert LabelMap.from_json(lm.to_json()).mapping == lm.mapping
