from helpers import corpus
from rulekit import dsl
from rulekit import pattern as pt
from rulekit.diagnostics import Code


def rule(name):
    rules, _ = corpus()
    return rules[name].rule


def test_free_symbols_of_the_transpose_source():
    r = rule("SemiJoinAggTranspose")
    fs = pt.free_symbols(r.source, r.decls())
    assert fs.plans == {"L", "R"}
    assert fs.funcs == {"P", "G", "A"}
    assert fs.types == {"X", "Y", "K", "V"}


def test_free_symbols_of_empty():
    fs = pt.free_symbols(pt.Empty(pt.TName("S")))
    assert fs == pt.FreeSymbols(frozenset(), frozenset(), frozenset({"S"}))


def test_free_symbols_of_the_semijoin_expansion():
    decls = pt.Decls.of(
        [pt.TypeSymbol("X"), pt.TypeSymbol("Y")],
        [pt.FuncSymbol.scalar("P", [pt.TName("X"), pt.TName("Y")], pt.BOOL)],
        [pt.PlanSymbol("L", pt.TName("X")), pt.PlanSymbol("R", pt.TName("Y"))],
    )
    body = pt.Filter(
        pt.Lambda(("x",), pt.Exists(pt.Filter(pt.Lambda(("y",), pt.PredApply("P", (pt.Var("x"), pt.Var("y")))), pt.Sym("R")))),
        pt.Sym("L"),
    )
    fs = pt.free_symbols(body, decls)
    assert fs.plans == {"L", "R"} and fs.funcs == {"P"} and fs.types == {"X", "Y"}


def test_validate_accepts_the_transpose():
    _, registry = corpus()
    assert pt.validate_rule(rule("SemiJoinAggTranspose"), registry) == []


def test_to_only_symbol_is_rejected():
    text = "rule R {\n  types X;\n  plans L: Bag<X>, M: Bag<X>;\n  from L;\n  to M;\n}\n"
    (d,) = dsl.parse_rule_file(text)
    assert d.code is Code.TO_ONLY_SYMBOL


def test_unbound_lambda_variable():
    text = "rule R {\n  types X;\n  funcs P: X -> Bool;\n  plans L: Bag<X>;\n  from Filter(x -> P(z), L);\n  to L;\n}\n"
    (d,) = dsl.parse_rule_file(text)
    assert d.code in (Code.UNBOUND_VARIABLE, Code.UNBOUND_SYMBOL)
