from collections import Counter

import pytest
from hypothesis import given, strategies as st

from helpers import CORPUS, ORDER, REV, corpus, random_db, scan, semijoin_by_hand, semijoin_samples
from rulekit import evaluator as ev
from rulekit import plan as ir

c, lit, call = ir.col, ir.lit, ir.call
ONE = ir.Schema.of(("a", "Int"))


def values(*rows, schema=ONE):
    return ir.Values(schema, tuple(rows))


def run(p, db=None, registry=None):
    return ev.eval_plan(p, db or ev.Database(), registry)


def test_filter_keeps_multiplicity():
    assert run(ir.Filter(call("gt", c(0), lit(1)), values((1,), (2,), (2,)))) == Counter({(2,): 2})


def running_plan():
    pred = call("and", call("eq", c(0, "left"), c(0, "right")), call("leq", c(1, "right"), lit(1)))
    agg = ir.Aggregate((c(0),), (ir.AggCall("Sum", c(1)),), scan("Order"))
    return ir.Custom("SemiJoin", (pred, agg, scan("Rev"))), pred


def test_running_example_result():
    _, registry = corpus()
    q, _ = running_plan()
    db = ev.Database.of(Order=(ORDER, [("c1", 10), ("c1", 5), ("c2", 7)]), Rev=(REV, [("c1", 1)]))
    assert run(q, db, registry) == Counter({("c1", 15): 1})


def test_distinct_treats_null_as_equal():
    assert run(ir.Distinct(values((None,), (None,)))) == Counter({(None,): 1})


def test_grouping_treats_null_as_equal():
    agg = ir.Aggregate((c(0),), (ir.AggCall("Count", None),), values((None,), (None,), (1,)))
    assert run(agg) == Counter({(None, 2): 1, (1, 1): 1})


def test_sum_of_only_nulls_is_null_and_count_counts_rows():
    s = ir.Schema.of(("k", "Int"), ("v", "Int"))
    agg = ir.Aggregate((c(0),), (ir.AggCall("Sum", c(1)), ir.AggCall("Count", None)), values((1, None), (1, None), schema=s))
    assert run(agg) == Counter({(1, None, 2): 1})


def test_bag_equal_ignores_order_not_multiplicity():
    assert ev.bag_equal(Counter([(1,), (2,)]), Counter([(2,), (1,)]))
    assert not ev.bag_equal(Counter([(1,)]), Counter([(1,), (1,)]))


V3 = [True, False, None]


@pytest.mark.parametrize("a", V3)
@pytest.mark.parametrize("b", V3)
def test_three_valued_connectives(a, b):
    e = ev.Evaluator(ev.Database())
    env = {"only": (a, b)}
    both = e.expr(call("and", c(0), c(1)), env)
    either = e.expr(call("or", c(0), c(1)), env)
    if a is False or b is False:
        assert both is False
    elif a is None or b is None:
        assert both is None
    else:
        assert both is True
    if a is True or b is True:
        assert either is True
    elif a is None or b is None:
        assert either is None
    else:
        assert either is False
    assert e.expr(call("not", c(0)), env) == (None if a is None else not a)


def test_comparison_with_null_is_unknown_and_filtered_out():
    e = ev.Evaluator(ev.Database())
    assert e.expr(call("eq", c(0), lit(1)), {"only": (None,)}) is None
    assert run(ir.Filter(call("eq", c(0), lit(1)), values((None,), (1,)))) == Counter({(1,): 1})


def test_unknown_table():
    with pytest.raises(ev.UnknownTable):
        run(scan("Order"))


def test_database_json_round_trip():
    db = random_db(3)
    assert ev.Database.from_json(db.to_json()).tables == db.tables


def test_database_rejects_ill_typed_rows():
    obj = {"tables": {"T": {"schema": [["a", "Int"]], "rows": [["x"]]}}}
    with pytest.raises(ev.TypeErrorAtRuntime):
        ev.Database.from_json(obj)


def test_running_example_sides_agree_on_random_databases():
    _, registry = corpus()
    q, pred = running_plan()
    q2 = ir.Aggregate((c(0),), (ir.AggCall("Sum", c(1)),), ir.Custom("SemiJoin", (pred, scan("Order"), scan("Rev"))))
    for seed in range(20):
        db = random_db(seed)
        assert ev.bag_equal(run(q, db, registry), run(q2, db, registry))


# ---------------------------------------------------------------------------
# SemiJoin against a hand-written core expansion


def test_semijoin_matches_its_core_expansion():
    _, registry = corpus()
    for pred, left, right in semijoin_samples():
        custom = ir.Custom("SemiJoin", (pred, left, right))
        assert ev.bag_equal(run(custom, registry=registry), run(semijoin_by_hand(pred, left, right)))


def test_semijoin_matches_nested_loop_definition():
    _, registry = corpus()
    e = ev.Evaluator(ev.Database())
    for pred, left, right in semijoin_samples(50):
        want = Counter()
        for l in left.rows:
            if any(e.expr(pred, {"left": l, "right": r}) is True for r in right.rows):
                want[l] += 1
        assert run(ir.Custom("SemiJoin", (pred, left, right)), registry=registry) == want


@given(st.lists(st.sampled_from([0, 1, 2, None]), max_size=6), st.lists(st.sampled_from([0, 1, 2, None]), max_size=6))
def test_union_all_adds_multiplicities(xs, ys):
    left = values(*[(x,) for x in xs])
    right = values(*[(y,) for y in ys])
    assert run(ir.Union_(left, right)) == Counter((x,) for x in xs) + Counter((y,) for y in ys)
