"""Shared fixtures: the mini schema, random databases and concrete plans."""

from __future__ import annotations

import random
from functools import lru_cache
from pathlib import Path

from rulekit import dsl
from rulekit import plan as ir
from rulekit.evaluator import Database
from rulekit.extension import EMPTY_REGISTRY
from rulekit.typecheck import typecheck_rule

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "src" / "rulekit" / "corpus"
MUTANTS = ROOT / "tests" / "mutants"
GOLDEN = ROOT / "tests" / "golden"

ORDER = ir.Schema.of(("cust", "Str"), ("amt", "Int"))
REV = ir.Schema.of(("author", "Str"), ("rating", "Int"))
CUST = ir.Schema.of(("name", "Str"), ("region", "Str"), ("vip", "Bool"))
SCHEMAS = {"Order": ORDER, "Rev": REV, "Cust": CUST}

POOLS = {
    ir.ValueType.STR: ["a", "b", "c", None],
    ir.ValueType.INT: [0, 1, 2, 5, None],
    ir.ValueType.BOOL: [True, False, None],
}


def random_db(seed: int, max_rows: int = 5) -> Database:
    """A small database; empty tables and Null-bearing rows are common."""
    rng = random.Random(f"db/{seed}")
    tables = {}
    for name, schema in SCHEMAS.items():
        n = rng.choice([0, 0, 1, 2, 3, max_rows])
        rows = [tuple(rng.choice(POOLS[t]) for t in schema.types) for _ in range(n)]
        tables[name] = (schema, rows)
    return Database.of(**tables)


@lru_cache(maxsize=None)
def corpus():
    """Every corpus rule typechecked, keyed by name, plus the merged registry."""
    registry = EMPTY_REGISTRY
    files = []
    for p in sorted(CORPUS.glob("*.rules")):
        rf = dsl.load_rule_file(p)
        registry = registry.merge(rf.registry)
        files.append(rf)
    rules = {}
    for rf in files:
        for r in rf.rules:
            rules[r.name] = typecheck_rule(r, registry)
    return rules, registry


def scan(name: str) -> ir.Scan:
    return ir.Scan(name, SCHEMAS[name])


c, lit, call = ir.col, ir.lit, ir.call


def _eq(a, b):
    return call("eq", a, b)


def _and(*xs):
    return ir.conjoin(xs)


def _sum_by_cust(src=None):
    return ir.Aggregate((c(0),), (ir.AggCall("Sum", c(1)),), src or scan("Order"))


def _semi(pred, left, right):
    return ir.Custom("SemiJoin", (pred, left, right))


def application_cases():
    """``(rule name, concrete plan)`` pairs on which the rule fires at the root."""
    O, R, U = scan("Order"), scan("Rev"), scan("Cust")
    cust_rev = _eq(c(0, "left"), c(0, "right"))
    low = call("leq", c(1, "right"), lit(1))
    cases = [
        # SemiJoinAggTranspose
        ("SemiJoinAggTranspose", _semi(_and(cust_rev, low), _sum_by_cust(), R)),
        ("SemiJoinAggTranspose", _semi(cust_rev, _sum_by_cust(), R)),
        ("SemiJoinAggTranspose", _semi(call("neq", c(0, "left"), c(0, "right")), ir.Aggregate((c(0),), (ir.AggCall("Count", None), ir.AggCall("Max", c(1))), O), R)),
        ("SemiJoinAggTranspose", _semi(_eq(c(0, "left"), c(1, "right")), ir.Aggregate((c(1),), (ir.AggCall("Count", None),), U), U)),
        ("SemiJoinAggTranspose", _semi(low, _sum_by_cust(ir.Filter(call("gt", c(1), lit(0)), O)), R)),
        # FilterProjectTranspose
        ("FilterProjectTranspose", ir.Filter(_eq(c(0), lit("a")), ir.Project(((c(0), "cust"),), O))),
        ("FilterProjectTranspose", ir.Filter(call("gt", c(1), lit(1)), ir.Project(((c(0), "c"), (call("add", c(1), lit(1)), "amt1")), O))),
        ("FilterProjectTranspose", ir.Filter(c(0), ir.Project(((c(2), "vip"),), U))),
        # FilterUnionTranspose
        ("FilterUnionTranspose", ir.Filter(_eq(c(0), lit("a")), ir.Union_(O, O))),
        ("FilterUnionTranspose", ir.Filter(call("isNull", c(1)), ir.Union_(O, ir.Filter(call("gt", c(1), lit(0)), O)))),
        ("FilterUnionTranspose", ir.Filter(call("leq", c(1), lit(2)), ir.Union_(R, R))),
        # DistinctProjectTranspose (applied with the built-in guard)
        ("DistinctProjectTranspose", ir.Distinct(ir.Project(((c(0), "cust"), (c(1), "amt")), O))),
        ("DistinctProjectTranspose", ir.Distinct(ir.Project(((c(1), "amt"), (c(0), "cust")), O))),
        # FilterMerge
        ("FilterMerge", ir.Filter(_eq(c(0), lit("a")), ir.Filter(call("gt", c(1), lit(0)), O))),
        ("FilterMerge", ir.Filter(call("isNotNull", c(1)), ir.Filter(call("isNull", c(0)), R))),
        ("FilterMerge", ir.Filter(c(2), ir.Filter(call("not", c(2)), U))),
        # ProjectMerge
        ("ProjectMerge", ir.Project(((c(0), "cust"),), ir.Project(((c(0), "cust"), (c(1), "amt")), O))),
        ("ProjectMerge", ir.Project(((call("add", c(0), lit(1)), "x"),), ir.Project(((c(1), "amt"),), O))),
        ("ProjectMerge", ir.Project(((c(1), "b"), (c(0), "a")), ir.Project(((c(0), "n"), (c(1), "r")), U))),
        # DistinctMerge
        ("DistinctMerge", ir.Distinct(ir.Distinct(O))),
        ("DistinctMerge", ir.Distinct(ir.Distinct(ir.Union_(R, R)))),
        # FilterAggregateTranspose
        ("FilterAggregateTranspose", ir.Filter(_eq(c(0), lit("a")), _sum_by_cust())),
        ("FilterAggregateTranspose", ir.Filter(call("isNull", c(0)), _sum_by_cust())),
        ("FilterAggregateTranspose", ir.Filter(_eq(c(0), lit("b")), ir.Aggregate((c(1),), (ir.AggCall("Count", None),), U))),
        # JoinConditionPush
        ("JoinConditionPush", ir.Join(_and(call("gt", c(1, "left"), lit(0)), call("leq", c(1, "right"), lit(1)), cust_rev), O, R)),
        ("JoinConditionPush", ir.Join(_and(_eq(c(0, "left"), lit("a")), c(2, "right"), _eq(c(0, "left"), c(0, "right"))), O, U)),
        ("JoinConditionPush", ir.Join(_and(call("isNotNull", c(1, "left")), call("isNull", c(1, "right")), cust_rev), O, R)),
        # FilterJoinPushLeft
        ("FilterJoinPushLeft", ir.Filter(_and(call("gt", c(1), lit(0)), _eq(c(0), c(2))), ir.Join(lit(True), O, R))),
        ("FilterJoinPushLeft", ir.Filter(_and(_eq(c(0), lit("a")), call("leq", c(3), lit(1))), ir.Join(cust_rev, O, R))),
        # JoinCommute
        ("JoinCommute", ir.Join(cust_rev, O, R)),
        ("JoinCommute", ir.Join(_eq(c(0, "left"), c(0, "right")), R, U)),
        ("JoinCommute", ir.Join(_and(cust_rev, low), O, R)),
        # JoinExtractFilter
        ("JoinExtractFilter", ir.Join(cust_rev, O, R)),
        ("JoinExtractFilter", ir.Join(_and(cust_rev, call("leq", c(1, "left"), lit(1))), O, U)),
        # PruneEmptyFilter
        ("PruneEmptyFilter", ir.Filter(_eq(c(0), lit("a")), ir.Empty(ORDER))),
        ("PruneEmptyFilter", ir.Filter(call("gt", c(1), lit(1)), ir.Empty(REV))),
        # PruneEmptyJoin
        ("PruneEmptyJoin", ir.Join(cust_rev, ir.Empty(ORDER), R)),
        ("PruneEmptyJoin", ir.Join(lit(True), ir.Empty(CUST), O)),
        # PruneEmptyUnion
        ("PruneEmptyUnion", ir.Union_(O, ir.Empty(ORDER))),
        ("PruneEmptyUnion", ir.Union_(ir.Filter(call("gt", c(1), lit(0)), R), ir.Empty(REV))),
        # PruneEmptyAggregate
        ("PruneEmptyAggregate", ir.Aggregate((c(0),), (ir.AggCall("Sum", c(1)),), ir.Empty(ORDER))),
        ("PruneEmptyAggregate", ir.Aggregate((c(1),), (ir.AggCall("Count", None),), ir.Empty(CUST))),
        # PruneTrueFilter
        ("PruneTrueFilter", ir.Filter(lit(True), O)),
        ("PruneTrueFilter", ir.Filter(lit(True), ir.Join(cust_rev, O, R))),
        # ProjectRemove
        ("ProjectRemove", ir.Project(((c(0), "cust"), (c(1), "amt")), O)),
        ("ProjectRemove", ir.Project(((c(0), "author"), (c(1), "rating")), R)),
        # UnionToDistinct
        ("UnionToDistinct", ir.Custom("UnionDistinct", (O, O))),
        ("UnionToDistinct", ir.Custom("UnionDistinct", (R, ir.Filter(call("gt", c(1), lit(0)), R)))),
    ]
    return cases


# ---------------------------------------------------------------------------
# SemiJoin samples


def random_semijoin_pred(rng: random.Random, depth: int = 2):
    leaves = [
        lambda: call("eq", c(0, "left"), c(0, "right")),
        lambda: call("leq", c(1, "right"), lit(rng.choice([0, 1, 2]))),
        lambda: call("gt", c(1, "left"), lit(rng.choice([0, 1, 5]))),
        lambda: call("isNull", c(rng.choice([0, 1]), rng.choice(["left", "right"]))),
        lambda: call("eq", c(1, "left"), c(1, "right")),
        lambda: lit(rng.choice([True, False, None]), "Bool"),
    ]
    if depth == 0 or rng.random() < 0.4:
        return rng.choice(leaves)()
    op = rng.choice(["and", "or", "not"])
    if op == "not":
        return call("not", random_semijoin_pred(rng, depth - 1))
    return call(op, random_semijoin_pred(rng, depth - 1), random_semijoin_pred(rng, depth - 1))


def to_subquery(e):
    """Re-address a two-row predicate for use inside Filter(R) under Exists."""
    if isinstance(e, ir.Col):
        return ir.Col(e.index, "left" if e.side == "left" else "only")
    if isinstance(e, ir.Call):
        return ir.Call(e.fn, tuple(to_subquery(a) for a in e.args))
    return e


def semijoin_by_hand(pred, left, right):
    return ir.Filter(ir.ExistsSub(ir.Filter(to_subquery(pred), right)), left)


def random_table(rng, schema, max_rows=4):
    pools = {ir.ValueType.STR: ["a", "b", None], ir.ValueType.INT: [0, 1, 2, None]}
    rows = tuple(tuple(rng.choice(pools[t]) for t in schema.types) for _ in range(rng.randint(0, max_rows)))
    return ir.Values(schema, rows)


def semijoin_samples(n=100):
    for i in range(n):
        rng = random.Random(f"semijoin/{i}")
        yield random_semijoin_pred(rng), random_table(rng, ORDER), random_table(rng, REV)
