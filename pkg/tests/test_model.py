import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relmatch.catalogs import esg_catalog_path
from relmatch.errors import EmptyTable, InvalidCatalog, MalformedCatalog, MalformedCsv
from relmatch.model import (
    EntityRecord,
    Multiplicity,
    RelationCatalog,
    RelationExample,
    RelationSpec,
    ResolutionStatus,
    ResolvedMatch,
    catalog_from_dict,
    load_catalog,
    load_table,
)


def relation(rel_id, rank, examples=True, description="d"):
    return {
        "id": rel_id,
        "display_name": rel_id.title(),
        "description": description,
        "examples": [{"source_text": "a", "target_text": "b", "explanation": "c"}] if examples else [],
        "priority_rank": rank,
        "multiplicity": "single",
    }


def write_json(tmp_path, data, name="catalog.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_esg_catalog_has_five_ranked_relations():
    catalog = load_catalog(esg_catalog_path())
    assert len(catalog) == 5
    assert [r.display_name for r in catalog.by_rank()] == [
        "Exactly the same",
        "General without additional details",
        "Similar with Additional Details",
        "Similar with wrong Details",
        "Component",
    ]
    assert [r.priority_rank for r in catalog.by_rank()] == [1, 2, 3, 4, 5]
    assert catalog.get("component").multiplicity is Multiplicity.MANY


def test_non_contiguous_ranks_rejected(tmp_path):
    path = write_json(tmp_path, {"relations": [relation("a", 1), relation("b", 3)]})
    with pytest.raises(InvalidCatalog) as err:
        load_catalog(path)
    assert err.value.relation_id == "b"
    assert "'b'" in str(err.value)


def test_relation_without_examples_rejected(tmp_path):
    path = write_json(tmp_path, {"relations": [relation("a", 1), relation("b", 2, examples=False)]})
    with pytest.raises(InvalidCatalog, match="'b' has no examples"):
        load_catalog(path)


@pytest.mark.parametrize(
    "relations, culprit",
    [
        ([relation("a", 1), relation("a", 2)], "a"),
        ([relation("a", 1), relation("b", 1)], None),
        ([relation("a", 1, description="  ")], "a"),
        ([relation("a", 0)], "a"),
    ],
)
def test_invalid_catalogs(tmp_path, relations, culprit):
    with pytest.raises(InvalidCatalog) as err:
        load_catalog(write_json(tmp_path, {"relations": relations}))
    if culprit:
        assert err.value.relation_id == culprit


def test_malformed_catalog(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{ not json")
    with pytest.raises(MalformedCatalog):
        load_catalog(path)
    with pytest.raises(MalformedCatalog):
        load_catalog(write_json(tmp_path, {"relation": []}))
    with pytest.raises(MalformedCatalog, match="x"):
        load_catalog(write_json(tmp_path, {"relations": [{"id": "x"}]}))


slug = st.from_regex(r"[a-z][a-z_]{0,8}", fullmatch=True)
text = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=20).filter(str.strip)


@st.composite
def catalogs(draw):
    ids = draw(st.lists(slug, min_size=1, max_size=6, unique=True))
    ranks = draw(st.permutations(range(1, len(ids) + 1)))
    specs = []
    for rel_id, rank in zip(ids, ranks):
        examples = draw(st.lists(st.tuples(text, text, text), min_size=1, max_size=3))
        specs.append(
            RelationSpec(
                id=rel_id,
                display_name=draw(text),
                description=draw(text),
                examples=tuple(RelationExample(*ex) for ex in examples),
                priority_rank=rank,
                multiplicity=draw(st.sampled_from(list(Multiplicity))),
            )
        )
    return RelationCatalog(tuple(specs))


@settings(max_examples=50)
@given(catalogs())
def test_catalog_round_trip(tmp_path_factory, catalog):
    path = tmp_path_factory.mktemp("cat") / "c.json"
    path.write_text(catalog.to_json(), encoding="utf-8")
    assert load_catalog(path) == catalog
    assert catalog_from_dict(json.loads(catalog.to_json())) == catalog


def test_load_table_with_ids(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("id,item\ne1,Power Adapter\ne2,Charger for Smartphone\n", encoding="utf-8")
    table = load_table(path, "targets")
    assert len(table) == 2
    assert table.schema == ("item",)
    assert [r.id for r in table] == ["e1", "e2"]
    assert table.records[0].attributes == (("item", "Power Adapter"),)


def test_load_table_ordinal_ids(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("item\na\nb\nc\n", encoding="utf-8")
    assert [r.id for r in load_table(path, "t")] == ["1", "2", "3"]


def test_load_table_rejects_duplicate_ids(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("id,item\ne1,a\ne1,b\n", encoding="utf-8")
    with pytest.raises(MalformedCsv, match="duplicate id"):
        load_table(path, "t")


def test_load_table_errors(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("id,item\ne1,a,extra\n", encoding="utf-8")
    with pytest.raises(MalformedCsv, match="expected 2 fields"):
        load_table(path, "t")
    path.write_text("id,item\n", encoding="utf-8")
    with pytest.raises(EmptyTable):
        load_table(path, "t")
    path.write_text("", encoding="utf-8")
    with pytest.raises(EmptyTable):
        load_table(path, "t")


def test_values_kept_verbatim_and_bom_stripped(tmp_path):
    path = tmp_path / "t.csv"
    path.write_bytes("﻿id,item,note\r\ne1,  padded  ,\"a, b\"\r\n".encode("utf-8"))
    table = load_table(path, "t")
    assert table.schema == ("item", "note")
    assert table.records[0].attributes == (("item", "  padded  "), ("note", "a, b"))


cell = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\x00"), max_size=8)


@settings(max_examples=50)
@given(
    header=st.lists(st.from_regex(r"[a-z]{1,5}", fullmatch=True), min_size=1, max_size=4, unique=True),
    rows=st.integers(1, 8),
    data=st.data(),
)
def test_load_table_total_over_wellformed_csv(tmp_path_factory, header, rows, data):
    import csv

    path = tmp_path_factory.mktemp("csv") / "t.csv"
    body = [[data.draw(cell) for _ in header] for _ in range(rows)]
    if "id" in header:
        col = header.index("id")
        for i, row in enumerate(body):
            row[col] = f"r{i}"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows([header, *body])
    table = load_table(path, "t")
    assert len(table) == rows
    assert len(table.schema) == len(header) - (1 if "id" in header else 0)


def test_record_invariants():
    with pytest.raises(ValueError):
        EntityRecord("", (("a", "b"),))
    with pytest.raises(ValueError):
        EntityRecord("x", (("a", "b"), ("a", "c")))


def test_resolved_match_invariants():
    with pytest.raises(ValueError):
        ResolvedMatch("s", ResolutionStatus.RESOLVED, None, ("t",), "")
    with pytest.raises(ValueError):
        ResolvedMatch("s", ResolutionStatus.RESOLVED, "r", (), "")
    with pytest.raises(ValueError):
        ResolvedMatch("s", ResolutionStatus.UNRESOLVED, None, ("t",), "")
