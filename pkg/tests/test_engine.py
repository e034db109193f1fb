import random

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from helpers import CUST, ORDER, REV, application_cases, corpus, random_db, scan
from rulekit import dsl, engine
from rulekit import evaluator as ev
from rulekit import plan as ir
from rulekit.typecheck import typecheck_rule

c, lit, call = ir.col, ir.lit, ir.call
COND = call("and", call("eq", c(0, "left"), c(0, "right")), call("leq", c(1, "right"), lit(1)))
SUM_BY_CUST = ir.Aggregate((c(0),), (ir.AggCall("Sum", c(1)),), scan("Order"))
ORIGINAL = ir.Custom("SemiJoin", (COND, SUM_BY_CUST, scan("Rev")))
TRANSPOSED = ir.Aggregate((c(0),), (ir.AggCall("Sum", c(1)),), ir.Custom("SemiJoin", (COND, scan("Order"), scan("Rev"))))


def rule(name):
    rules, registry = corpus()
    return rules[name], registry


def inline_rule(text):
    rf = dsl.parse_rule_file(text)
    assert not isinstance(rf, list), [d.render() for d in rf]
    return typecheck_rule(rf.rules[0], rf.registry)


def test_running_example_bindings():
    tr, registry = rule("SemiJoinAggTranspose")
    m = engine.match_pattern(tr, ORIGINAL, registry)
    assert isinstance(m, engine.Matched)
    assert engine.render_bindings(tr, m.ctx) == {
        "P": "λ(k,y). k.cust = y.author ∧ y.rating ≤ 1",
        "G": "λx. x.cust",
        "A": "λx. Sum(x.amt)",
        "L": "Scan(Order)",
        "R": "Scan(Rev)",
    }
    assert m.ctx.plans == {"L": scan("Order"), "R": scan("Rev")}


def test_running_example_transform_pushes_the_semijoin_down():
    tr, registry = rule("SemiJoinAggTranspose")
    m = engine.match_pattern(tr, ORIGINAL, registry)
    assert engine.apply_transform(tr, m.ctx, registry) == TRANSPOSED


def test_remapped_predicate_reads_from_the_unaggregated_rows():
    tr, registry = rule("SemiJoinAggTranspose")
    out = engine.apply_rule(tr, ORIGINAL, registry)
    inner = out.plan.input
    assert inner.args[0] == call("and", call("eq", c(0, "left"), c(0, "right")), call("leq", c(1, "right"), lit(1)))
    assert ir.output_schema(inner.args[1]) == ORDER


def test_plan_symbol_matches_anything():
    tr = inline_rule("rule Id {\n  types X;\n  plans L: Bag<X>;\n  from L;\n  to L;\n}\n")
    p = ir.Join(lit(True), scan("Order"), scan("Rev"))
    m = engine.match_pattern(tr, p)
    assert m.ctx.plans == {"L": p}
    assert engine.apply_transform(tr, m.ctx) == p


TWO_PREDS = """rule TwoPreds {
  types X;
  funcs P0: X -> Bool, P1: X -> Bool;
  plans L: Bag<X>;
  from Filter(x -> P0(x) and P1(x), L);
  to Filter(x -> P1(x), Filter(x -> P0(x), L));
}
"""
AB = ir.Schema.of(("a", "Int"), ("b", "Int"))


def test_conjuncts_fill_pattern_predicates_left_to_right():
    tr = inline_rule(TWO_PREDS)
    p = ir.Filter(call("and", call("gt", c(0), lit(5)), call("lt", c(1), lit(10))), ir.Scan("T", AB))
    m = engine.match_pattern(tr, p)
    assert engine.render_bindings(tr, m.ctx) == {"P0": "λx. x.a > 5", "P1": "λx. x.b < 10", "L": "Scan(T)"}


def test_surplus_conjuncts_go_to_the_first_admitting_predicate():
    tr = inline_rule(TWO_PREDS)
    parts = [call("gt", c(0), lit(5)), call("lt", c(1), lit(10)), call("lt", c(0), lit(9))]
    m = engine.match_pattern(tr, ir.Filter(ir.conjoin(parts), ir.Scan("T", AB)))
    assert engine.render_bindings(tr, m.ctx)["P0"] == "λx. x.a > 5 ∧ x.a < 9"


def test_single_conjunct_leaves_the_other_predicate_true():
    tr = inline_rule(TWO_PREDS)
    m = engine.match_pattern(tr, ir.Filter(call("gt", c(0), lit(5)), ir.Scan("T", AB)))
    assert engine.render_bindings(tr, m.ctx)["P1"] == "λx. TRUE"


def test_value_dependent_semijoin_does_not_match():
    tr, registry = rule("SemiJoinAggTranspose")
    bad = ir.Custom("SemiJoin", (call("eq", c(1, "left"), c(1, "right")), SUM_BY_CUST, scan("Rev")))
    out = engine.match_pattern(tr, bad, registry)
    assert isinstance(out, engine.NoMatch)
    assert out.path[0] == "from"


def test_prune_empty_filter():
    tr, registry = rule("PruneEmptyFilter")
    out = engine.apply_rule(tr, ir.Filter(call("gt", c(1), lit(0)), ir.Empty(ORDER)), registry)
    assert out.plan == ir.Empty(ORDER)


def test_prune_empty_filter_needs_an_empty_input():
    tr, registry = rule("PruneEmptyFilter")
    assert isinstance(engine.apply_rule(tr, ir.Filter(lit(True), scan("Order")), registry), engine.NoMatch)


def test_transpose_on_a_bare_scan_does_not_match():
    tr, registry = rule("SemiJoinAggTranspose")
    assert isinstance(engine.apply_rule(tr, scan("Order"), registry), engine.NoMatch)


def test_fixpoint_filter_merge():
    tr, registry = rule("FilterMerge")
    p1, p2 = call("eq", c(0), lit("a")), call("gt", c(1), lit(0))
    plan = ir.Filter(p1, ir.Filter(p2, scan("Order")))
    out, trace = engine.apply_rules_to_fixpoint([tr], plan, registry)
    assert out == ir.Filter(call("and", p1, p2), scan("Order"))
    assert [f.rule for f in trace] == ["FilterMerge"]
    db = ev.Database.of(Order=(ORDER, [("a", 1), ("a", 0), ("b", 2), (None, 1), ("a", None)]))
    assert ev.bag_equal(ev.eval_plan(plan, db), ev.eval_plan(out, db))


def test_fixpoint_without_rules_is_identity():
    out, trace = engine.apply_rules_to_fixpoint([], ORIGINAL)
    assert out == ORIGINAL and trace == []


def test_only_the_transpose_fires_on_the_running_example():
    rules, registry = corpus()
    out, trace = engine.apply_rules_to_fixpoint([rules["PruneEmptyFilter"], rules["SemiJoinAggTranspose"]], ORIGINAL, registry)
    assert [f.rule for f in trace] == ["SemiJoinAggTranspose"]
    assert trace[0].path == ()
    assert out == TRANSPOSED


def test_nested_firing_reports_its_path():
    tr, registry = rule("FilterMerge")
    inner = ir.Filter(lit(True), ir.Filter(call("gt", c(1), lit(0)), scan("Order")))
    out, trace = engine.apply_rules_to_fixpoint([tr], ir.Distinct(inner), registry)
    assert [(f.rule, f.path) for f in trace] == [("FilterMerge", (0,))]


def test_oscillating_rules_stop_at_the_pass_limit():
    tr, registry = rule("JoinCommute")
    out, trace = engine.apply_rules_to_fixpoint([tr], ir.Join(lit(True), scan("Order"), scan("Rev")), registry, max_passes=3)
    assert trace[-1].rule == engine.MAX_PASSES_MARKER


def test_constrained_rule_needs_a_guard():
    tr, registry = rule("DistinctProjectTranspose")
    p = ir.Distinct(ir.Project(((c(0), "cust"),), scan("Order")))
    with pytest.raises(engine.ConstraintGuardMissing):
        engine.apply_rule(tr, p, registry)


def test_injective_guard_rejects_a_lossy_projection():
    tr, registry = rule("DistinctProjectTranspose")
    lossy = ir.Distinct(ir.Project(((c(0), "cust"),), scan("Order")))
    assert isinstance(engine.apply_rule(tr, lossy, registry, engine.BUILTIN_GUARDS), engine.NoMatch)
    perm = ir.Distinct(ir.Project(((c(1), "amt"), (c(0), "cust")), scan("Order")))
    assert isinstance(engine.apply_rule(tr, perm, registry, engine.BUILTIN_GUARDS), engine.Applied)


def test_application_cases_all_fire():
    rules, registry = corpus()
    for name, plan in application_cases():
        out = engine.apply_rule(rules[name], plan, registry, engine.BUILTIN_GUARDS)
        assert isinstance(out, engine.Applied), (name, out)
        assert ir.output_schema(out.plan, registry).types == ir.output_schema(plan, registry).types


# ---------------------------------------------------------------------------
# Random plans through the whole corpus


def random_plan(rng: random.Random, depth: int):
    _, registry = corpus()
    if depth == 0 or rng.random() < 0.1:
        return rng.choice([scan("Order"), scan("Order"), scan("Rev"), ir.Empty(ORDER)])
    leaf = random_plan(rng, depth - 1)
    s = ir.output_schema(leaf, registry)
    ints = [i for i, t in enumerate(s.types) if t is ir.ValueType.INT]
    strs = [i for i, t in enumerate(s.types) if t is ir.ValueType.STR]
    def pred():
        parts = []
        for _ in range(rng.randint(1, 2)):
            if ints and rng.random() < 0.5:
                parts.append(call("gt", c(rng.choice(ints)), lit(rng.choice([0, 1]))))
            elif strs:
                parts.append(call("eq", c(rng.choice(strs)), lit(rng.choice(["a", "b"]))))
            else:
                parts.append(call("isNull", c(0)))
        return ir.conjoin(parts)
    kind = rng.choice(["filter", "filter", "project", "distinct", "union", "agg", "semijoin", "join"])
    if kind == "filter":
        return ir.Filter(pred(), leaf)
    if kind == "project":
        idx = list(range(len(s)))
        rng.shuffle(idx)
        return ir.Project(tuple((c(i), s.names[i]) for i in idx), leaf)
    if kind == "distinct":
        return ir.Distinct(leaf)
    if kind == "union":
        return ir.Union_(leaf, ir.Filter(pred(), leaf))
    if kind == "agg" and strs and ints:
        return ir.Aggregate((c(strs[0]),), (ir.AggCall("Sum", c(ints[0])),), leaf)
    if kind == "semijoin" and strs:
        return ir.Custom("SemiJoin", (call("eq", c(strs[0], "left"), c(0, "right")), leaf, scan("Rev")))
    if kind == "join" and strs and len(s) <= 3:
        return ir.Join(call("eq", c(strs[0], "left"), c(0, "right")), leaf, scan("Rev"))
    return ir.Filter(pred(), leaf)


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10_000))
def test_corpus_fixpoint_preserves_bags(seed):
    rules, registry = corpus()
    plan = random_plan(random.Random(seed), 4)
    out, _ = engine.apply_rules_to_fixpoint(list(rules.values()), plan, registry, 4, engine.BUILTIN_GUARDS)
    for s in range(5):
        db = random_db(s)
        assert ev.bag_equal(ev.eval_plan(plan, db, registry), ev.eval_plan(out, db, registry))
