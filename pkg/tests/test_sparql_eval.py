"""Evaluator semantics: joins, unions, filters, and agreement with the
exhaustive generate-and-test oracle on random inputs."""

from __future__ import annotations

import random

from hypothesis import given, settings
from hypothesis import strategies as st

from lcq.rdfmodel import Dataset, Graph, Iri, Literal, Triple
from lcq.sparql import GroupPattern, QueryAst, evaluate, match_bgp, parse_query
from oracles import oracle_query, random_dataset, random_query

E = "http://e/"


def iri(s: str) -> Iri:
    return Iri(E + s)


def tr(s: str, p: str, o) -> Triple:
    obj = o if isinstance(o, Literal) else iri(o)
    return Triple(iri(s), iri(p), obj)


def ds(*triples: Triple) -> Dataset:
    d = Dataset()
    d.upsert_graph(iri("g"), Graph(triples))
    return d


def rows_as_set(table):
    return {frozenset(r.items()) for r in table.rows}


def test_single_pattern_binds_each_match():
    d = ds(tr("s1", "p", "o1"), tr("s2", "p", "o2"), tr("s3", "q", "o3"))
    t = evaluate(parse_query(f"SELECT ?s WHERE {{ ?s <{E}p> ?o }}"), d)
    assert t.values("s") == {iri("s1"), iri("s2")}


def test_join_on_shared_variable():
    d = ds(tr("a", "p", "b"), tr("b", "q", "c"), tr("a", "q", "c"))
    t = evaluate(
        parse_query(f"SELECT ?x ?z WHERE {{ ?x <{E}p> ?y . ?y <{E}q> ?z }}"), d
    )
    assert rows_as_set(t) == {frozenset({("x", iri("a")), ("z", iri("c"))})}


def test_projection_keeps_bag_semantics_until_distinct():
    d = ds(tr("s", "p", "o1"), tr("s", "p", "o2"))
    plain = evaluate(parse_query(f"SELECT ?s WHERE {{ ?s <{E}p> ?o }}"), d)
    assert len(plain.rows) == 2
    deduped = evaluate(parse_query(f"SELECT DISTINCT ?s WHERE {{ ?s <{E}p> ?o }}"), d)
    assert len(deduped.rows) == 1


def test_union_branches_leave_other_vars_unbound():
    d = ds(tr("s", "p", "x1"), tr("s", "q", "y1"))
    t = evaluate(
        parse_query(
            f"SELECT ?x ?y WHERE {{ {{ <{E}s> <{E}p> ?x }} UNION {{ <{E}s> <{E}q> ?y }} }}"
        ),
        d,
    )
    assert rows_as_set(t) == {
        frozenset({("x", iri("x1"))}),
        frozenset({("y", iri("y1"))}),
    }


def test_union_joins_against_surrounding_patterns():
    d = ds(
        tr("s1", "type", "T"),
        tr("s2", "type", "T"),
        tr("s1", "p", "v"),
        tr("s2", "q", "v"),
    )
    t = evaluate(
        parse_query(
            f"SELECT ?s WHERE {{ ?s <{E}type> <{E}T> . "
            f"{{ ?s <{E}p> ?v }} UNION {{ ?s <{E}q> ?v }} }}"
        ),
        d,
    )
    assert t.values("s") == {iri("s1"), iri("s2")}


def test_not_exists_is_correlated_with_outer_bindings():
    d = ds(
        tr("b1", "type", "Block"),
        tr("b2", "type", "Block"),
        tr("b1", "satisfies", "r1"),
    )
    t = evaluate(
        parse_query(
            f"SELECT ?b WHERE {{ ?b <{E}type> <{E}Block> . "
            f"FILTER NOT EXISTS {{ ?b <{E}satisfies> ?r }} }}"
        ),
        d,
    )
    assert t.values("b") == {iri("b2")}


def test_not_exists_with_union_inner():
    d = ds(
        tr("m1", "type", "T"),
        tr("m2", "type", "T"),
        tr("m3", "type", "T"),
        tr("c", "tracks", "m1"),
        tr("m2", "satisfies", "r"),
        tr("c", "tracks", "r"),
    )
    t = evaluate(
        parse_query(
            f"SELECT ?m WHERE {{ ?m <{E}type> <{E}T> . FILTER NOT EXISTS {{"
            f" {{ ?cr <{E}tracks> ?m }} UNION {{ ?m <{E}satisfies> ?r . ?cr <{E}tracks> ?r }}"
            f" }} }}"
        ),
        d,
    )
    assert t.values("m") == {iri("m3")}


def test_filter_equality_and_inequality():
    d = ds(tr("a", "p", "a"), tr("b", "p", "c"))
    eq = evaluate(
        parse_query(f"SELECT ?x WHERE {{ ?x <{E}p> ?y . FILTER(?x = ?y) }}"), d
    )
    assert eq.values("x") == {iri("a")}
    neq = evaluate(
        parse_query(f"SELECT ?x WHERE {{ ?x <{E}p> ?y . FILTER(?x != ?y) }}"), d
    )
    assert neq.values("x") == {iri("b")}


def test_filter_on_unbound_variable_drops_row():
    d = ds(tr("s", "p", "x1"))
    t = evaluate(
        parse_query(
            f"SELECT ?x WHERE {{ {{ <{E}s> <{E}p> ?x }} UNION {{ <{E}s> <{E}q> ?y }}"
            f" FILTER(?y != <{E}nope>) }}"
        ),
        d,
    )
    assert t.rows == []


def test_constant_only_filter_keeps_empty_solution():
    t = evaluate(
        parse_query(f"SELECT * WHERE {{ FILTER(<{E}a> = <{E}a>) }}"), Dataset()
    )
    assert len(t.rows) == 1 and t.rows[0] == {}


def test_query_runs_over_union_of_named_graphs():
    d = Dataset()
    d.upsert_graph(iri("g1"), Graph([tr("a", "p", "b")]))
    d.upsert_graph(iri("g2"), Graph([tr("b", "q", "c")]))
    t = evaluate(
        parse_query(f"SELECT ?x WHERE {{ ?x <{E}p> ?y . ?y <{E}q> ?z }}"), d
    )
    assert t.values("x") == {iri("a")}


def test_empty_dataset_gives_no_solutions():
    t = evaluate(parse_query("SELECT ?s WHERE { ?s ?p ?o }"), Dataset())
    assert t.rows == []


def test_literal_matching_is_exact_on_lexical_form_and_datatype():
    xsd_int = Iri("http://www.w3.org/2001/XMLSchema#integer")
    d = ds(
        tr("a", "p", Literal("7", xsd_int)),
        tr("b", "p", Literal("7")),
        tr("c", "p", Literal("07", xsd_int)),
    )
    t = evaluate(
        parse_query(
            "PREFIX xsd: <http://www.w3.org/2001/XMLSchema#>\n"
            f'SELECT ?s WHERE {{ ?s <{E}p> "7"^^xsd:integer }}'
        ),
        d,
    )
    assert t.values("s") == {iri("a")}


def test_results_json_shape_and_canonical_order():
    d = ds(tr("s", "p", "x1"), tr("s", "q", Literal("7", Iri("http://www.w3.org/2001/XMLSchema#integer"))))
    t = evaluate(
        parse_query(
            f"SELECT ?x ?y WHERE {{ {{ <{E}s> <{E}p> ?x }} UNION {{ <{E}s> <{E}q> ?y }} }}"
        ),
        d,
    )
    assert t.to_json_dict() == {
        "head": {"vars": ["x", "y"]},
        "results": {
            "bindings": [
                {"x": {"type": "uri", "value": E + "x1"}},
                {
                    "y": {
                        "type": "literal",
                        "value": "7",
                        "datatype": "http://www.w3.org/2001/XMLSchema#integer",
                    }
                },
            ]
        },
    }


def test_match_bgp_result_does_not_depend_on_pattern_order():
    rng = random.Random(7)
    for _ in range(40):
        d = random_dataset(rng)
        q = random_query(rng)
        patterns = [
            el for el in q.where.elements if el.__class__.__name__ == "TriplePattern"
        ]
        if len(patterns) < 2:
            continue
        g = d.union_view()
        forward = match_bgp(patterns, g)
        backward = match_bgp(list(reversed(patterns)), g)
        as_sets = lambda sols: {frozenset(s.items()) for s in sols}
        assert as_sets(forward) == as_sets(backward)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_result_set_invariant_under_group_reordering(seed):
    rng = random.Random(seed)
    d = random_dataset(rng)
    q = random_query(rng)
    base = rows_as_set(evaluate(q, d))
    shuffled = list(q.where.elements)
    rng.shuffle(shuffled)
    q2 = QueryAst(q.select, GroupPattern(tuple(shuffled)), q.distinct, q.prefixes)
    assert rows_as_set(evaluate(q2, d)) == base


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_adding_triples_never_shrinks_filterless_results(seed):
    rng = random.Random(seed)
    d = random_dataset(rng)
    q = random_query(rng)
    filterless = GroupPattern(
        tuple(
            el
            for el in q.where.elements
            if el.__class__.__name__ in ("TriplePattern", "UnionPattern")
        )
    )
    if not filterless.pattern_variables():
        return
    q = QueryAst(("*",), filterless, distinct=False)
    before = rows_as_set(evaluate(q, d))
    from oracles import random_graph

    extra = random_graph(rng, 8)
    target = d.graph_iris()[0]
    d.upsert_graph(target, d.graph(target).union(extra))
    after = rows_as_set(evaluate(q, d))
    assert before <= after


def test_growth_can_remove_not_exists_solutions():
    d = ds(tr("b1", "type", "Block"))
    q = parse_query(
        f"SELECT ?b WHERE {{ ?b <{E}type> <{E}Block> . "
        f"FILTER NOT EXISTS {{ ?b <{E}satisfies> ?r }} }}"
    )
    assert evaluate(q, d).values("b") == {iri("b1")}
    d.upsert_graph(iri("g"), d.graph(iri("g")).union(Graph([tr("b1", "satisfies", "r1")])))
    assert evaluate(q, d).values("b") == set()


def test_distinct_output_has_no_duplicate_rows():
    rng = random.Random(99)
    for _ in range(30):
        d = random_dataset(rng)
        q = random_query(rng)
        q = QueryAst(q.select, q.where, distinct=True, prefixes=q.prefixes)
        t = evaluate(q, d)
        keys = [frozenset(r.items()) for r in t.rows]
        assert len(keys) == len(set(keys))


def test_random_queries_agree_with_exhaustive_oracle():
    for seed in range(150):
        rng = random.Random(seed)
        d = random_dataset(rng)
        q = random_query(rng)
        got = rows_as_set(evaluate(q, d))
        want = oracle_query(q, d)
        assert got == want, f"divergence at seed {seed}"
