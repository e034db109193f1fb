import json
from collections import Counter

import pytest

from helpers import MUTANTS, corpus
from rulekit import dsl, verifier
from rulekit import pattern as pt
from rulekit.evaluator import bag_equal
from rulekit.extension import EMPTY_REGISTRY
from rulekit.typecheck import typecheck_rule

MUTANT_FILES = sorted(MUTANTS.glob("*.rules"))
SMALL = verifier.VerifyConfig(trials=500, max_domain=3, max_rows=3)


def load(path):
    rf = dsl.load_rule_file(path)
    (r,) = rf.rules
    return typecheck_rule(r, rf.registry), rf.registry


def inline(text):
    rf = dsl.parse_rule_file(text)
    assert not isinstance(rf, list), [d.render() for d in rf]
    return typecheck_rule(rf.rules[0], rf.registry), rf.registry


def test_transpose_survives_small_bounds():
    rules, registry = corpus()
    rep = verifier.verify_rule(rules["SemiJoinAggTranspose"], registry, SMALL)
    assert rep.ok and rep.trials_run == 500


def test_value_dependent_transpose_is_refuted():
    tr, registry = load(MUTANTS / "semijoin_agg_value_dependent.rules")
    rep = verifier.verify_rule(tr, registry, SMALL)
    assert rep.verdict == "counterexample"
    inst = rep.counterexample.instance
    assert all(sum(b.values()) <= 3 for b in inst.plans.values())


def test_identical_sides_short_circuit():
    tr, registry = inline("rule Same {\n  types X;\n  plans L: Bag<X>;\n  from L;\n  to L;\n}\n")
    rep = verifier.verify_rule(tr, registry)
    assert rep.ok and rep.trials_run == 1


def test_sampling_is_deterministic_in_the_seed():
    rules, _ = corpus()
    r = rules["SemiJoinAggTranspose"].rule
    cfg = verifier.VerifyConfig()
    a = verifier.sample_instance(r, cfg, seed=7)
    b = verifier.sample_instance(r, cfg, seed=7)
    assert verifier.instance_to_json(a) == verifier.instance_to_json(b)
    c = verifier.sample_instance(r, cfg, seed=8)
    assert verifier.instance_to_json(a) != verifier.instance_to_json(c)


def test_instances_respect_the_configured_bounds():
    rules, _ = corpus()
    r = rules["JoinConditionPush"].rule
    cfg = verifier.VerifyConfig(min_domain=2, max_domain=3, max_rows=2)
    sizes, rows = set(), set()
    for t in range(200):
        inst = verifier.sample_instance(r, cfg, 0, t)
        sizes.update(len(v) for v in inst.domains.values())
        rows.update(sum(b.values()) for b in inst.plans.values())
        for f, table in inst.funcs.items():
            sym = r.decls().funcs[f]
            domain = [verifier.values_of(p, inst.domains) for p in sym.params]
            n = 1
            for d in domain:
                n *= len(d)
            assert len(table) == n
            assert set(table.values()) <= {True, False, None}
    assert sizes == {2, 3}
    assert rows == {0, 1, 2}


def test_injective_tables_are_injective():
    text = "rule Inj {\n  types X, Y;\n  funcs F: X -> Y;\n  plans L: Bag<X>;\n  from Distinct(Project(x -> F(x), L));\n  to Project(x -> F(x), Distinct(L));\n  where injective(F);\n}\n"
    tr, _ = inline(text)
    cfg = verifier.VerifyConfig(min_domain=3, max_domain=3)
    for t in range(50):
        inst = verifier.sample_instance(tr.rule, cfg, 0, t)
        outs = list(inst.funcs["F"].values())
        assert len(outs) == 4 and len(set(outs)) == 4


def test_exhausted_retry_budget_is_reported():
    text = "rule Inj {\n  types X, Y;\n  funcs F: X -> Y;\n  plans L: Bag<X>;\n  from Project(x -> F(x), L);\n  to Project(x -> F(x), L);\n  where injective(F);\n}\n"
    tr, _ = inline(text)
    with pytest.raises(verifier.ConstraintUnsatisfiable):
        verifier.sample_instance(tr.rule, verifier.VerifyConfig(retry_budget=0), 0)


def test_aggregates_are_functions_of_the_multiset():
    rules, registry = corpus()
    r = rules["SemiJoinAggTranspose"].rule
    inst = verifier.sample_instance(r, verifier.VerifyConfig(), 0, 3)
    ev = verifier.PatternEvaluator(r, inst)
    bag = Counter({"t0": 2, None: 1})
    same = Counter({None: 1, "t0": 2})
    assert ev.aggregate("A", bag) == ev.aggregate("A", same)
    assert len(inst.aggs["A"]) == 1
    src, dst = verifier.expanded_sides(r, registry)
    inst.aggs = {}
    verifier.evaluate_sides(r, src, dst, inst)
    assert all(isinstance(k, str) for k in inst.aggs.get("A", {}))


def test_null_comparisons_are_unknown():
    assert verifier._eq3(None, "t0") is None
    assert verifier._eq3(("t0", None), ("t0", "t1")) is None
    assert verifier._eq3(("t0", "t1"), ("t1", None)) is False


@pytest.mark.parametrize("path", MUTANT_FILES, ids=lambda p: p.stem)
def test_mutant_is_refuted_with_a_minimal_counterexample(path):
    tr, registry = load(path)
    rule = tr.rule
    rep = verifier.verify_rule(tr, registry)
    assert rep.verdict == "counterexample"
    cex = rep.counterexample
    inst = cex.instance
    assert all(sum(b.values()) <= 3 for b in inst.plans.values())
    assert all(len(v) <= 3 for v in inst.domains.values())
    assert not bag_equal(cex.bag_from, cex.bag_to)

    src, dst = verifier.expanded_sides(rule, registry)

    def refutes(i):
        a, b = verifier.evaluate_sides(rule, src, dst, i)
        return not bag_equal(a, b)

    for p, bag in inst.plans.items():
        for row in bag:
            smaller = inst.copy()
            smaller.plans[p][row] -= 1
            smaller.plans[p] = +smaller.plans[p]
            assert not refutes(smaller), f"removing a row of {p} still refutes"
    for t, toks in inst.domains.items():
        if len(toks) <= 1:
            continue
        for old in toks:
            for new in [x for x in toks if x != old] + [None]:
                cand = verifier.merge_value(rule, inst, t, old, new)
                if verifier.constraints_hold(rule, cand):
                    assert not refutes(cand), f"merging {old} into {new} in {t} still refutes"

    obj = json.loads(json.dumps(verifier.report_to_json(rep)))
    a, b = verifier.replay(rule, registry, obj["counterexample"]["instance"])
    assert not bag_equal(a, b)


def test_verdicts_are_reproducible():
    tr, registry = load(MUTANTS / "filter_aggregate_value.rules")
    one = verifier.report_to_json(verifier.verify_rule(tr, registry))
    two = verifier.report_to_json(verifier.verify_rule(tr, registry))
    one.pop("elapsed_seconds"), two.pop("elapsed_seconds")
    assert one == two


def test_report_states_the_bound():
    rules, registry = corpus()
    obj = verifier.report_to_json(verifier.verify_rule(rules["FilterMerge"], registry, verifier.VerifyConfig(trials=10)))
    assert "10 trials" in obj["bound"] and "at most 3 rows" in obj["bound"]


def test_unregistered_custom_operator_is_reported():
    rules, _ = corpus()
    with pytest.raises(KeyError, match="unknown operator SemiJoin"):
        verifier.verify_rule(rules["SemiJoinAggTranspose"], EMPTY_REGISTRY)
