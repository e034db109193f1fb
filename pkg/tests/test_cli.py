import io
import json

import pytest

from helpers import CORPUS, GOLDEN, MUTANTS
from rulekit import cli
from rulekit import plan as ir

PLANS = CORPUS / "plans"
TRANSPOSE = str(CORPUS / "semijoin_agg_transpose.rules")


def run(*argv):
    buf = io.StringIO()
    code = cli.run([str(a) for a in argv], buf)
    return code, buf.getvalue()


def test_check_corpus():
    code, out = run("check", CORPUS)
    assert code == 0
    assert out.count(": ok (") == 19


def test_check_reports_diagnostics_with_the_path(tmp_path, capsys):
    bad = tmp_path / "bad.rules"
    bad.write_text("rule R {\n  types X;\n  plans L: Bag<X>;\n  from Frob(L);\n  to L;\n}\n")
    code, _ = run("check", bad)
    assert code == 2
    err = capsys.readouterr().err
    assert f"{bad}:4:8: error E002" in err


def test_verify_corpus_passes():
    code, out = run("verify", CORPUS, "--trials", "100")
    assert code == 0
    assert out.count("no counterexample") >= 19
    assert "100 trials" in out.splitlines()[-1]


def test_verify_mutant_prints_counterexample_and_replay():
    path = MUTANTS / "semijoin_agg_value_dependent.rules"
    code, out = run("verify", path, "--trials", "500", "--max-domain", "3")
    assert code == 1
    assert "counterexample at trial" in out
    replay = [l for l in out.splitlines() if l.startswith("replay: ")][0]
    argv = replay.split()[2:]
    code2, out2 = run(*argv, "--max-domain", "3")
    assert code2 == 1 and "counterexample" in out2


def test_verify_json_is_seed_stable(monkeypatch):
    path = MUTANTS / "filter_merge_or.rules"
    _, a = run("verify", path, "--json", "--seed", "5")
    monkeypatch.setenv("RULEKIT_SEED", "5")
    _, b = run("verify", path, "--json")
    ja, jb = json.loads(a), json.loads(b)
    for j in (ja, jb):
        for r in j["reports"]:
            r.pop("elapsed_seconds")
    assert ja == jb
    assert ja["ok"] is False


def test_seed_flag_overrides_the_environment(monkeypatch):
    monkeypatch.setenv("RULEKIT_SEED", "not-a-number")
    code, _ = run("verify", TRANSPOSE, "--trials", "5", "--seed", "1")
    assert code == 0
    code, _ = run("verify", TRANSPOSE, "--trials", "5")
    assert code == 2


def test_usage_errors_exit_2(capsys):
    assert run()[0] == 2
    assert run("frobnicate")[0] == 2
    assert run("verify", TRANSPOSE, "--trials", "0")[0] == 2
    assert run("apply", "--rules", TRANSPOSE)[0] == 2
    assert run("check", "/no/such/file.rules")[0] == 2


def test_apply_running_example():
    code, out = run("apply", "--rules", TRANSPOSE, "--plan", PLANS / "eq1.plan.json", "--fixpoint")
    assert code == 0
    expected = ir.load_plan((PLANS / "eq2.plan.json").read_text())
    assert ir.load_plan(out) == expected


def test_apply_json_reports_bindings():
    code, out = run("apply", "--rules", CORPUS, "--plan", PLANS / "eq1.plan.json", "--json", "--rule", "SemiJoinAggTranspose")
    assert code == 0
    obj = json.loads(out)
    assert obj["changed"] is True
    (firing,) = obj["trace"]
    assert firing["rule"] == "SemiJoinAggTranspose" and firing["path"] == []
    assert firing["bindings"]["G"] == "λx. x.cust"


def test_apply_trace_goes_to_stderr(capsys):
    run("apply", "--rules", TRANSPOSE, "--plan", PLANS / "eq1.plan.json", "--trace")
    err = capsys.readouterr().err
    assert json.loads(err.splitlines()[0]) == {"rule": "SemiJoinAggTranspose", "path": []}


def test_expect_match(capsys):
    code, _ = run("apply", "--rules", CORPUS / "prune_empty_filter.rules", TRANSPOSE, "--rule", "PruneEmptyFilter", "--plan", PLANS / "eq1.plan.json", "--expect-match")
    assert code == 1
    assert "no rule matched" in capsys.readouterr().err


def test_constrained_rules_need_builtin_guards(tmp_path):
    plan = tmp_path / "p.json"
    p = ir.Distinct(ir.Project(((ir.col(1), "amt"), (ir.col(0), "cust")), ir.Scan("Order", ir.Schema.of(("cust", "Str"), ("amt", "Int")))))
    plan.write_text(ir.dump_plan(p))
    rules = CORPUS / "distinct_project_transpose.rules"
    assert run("apply", "--rules", rules, "--plan", plan)[0] == 2
    code, out = run("apply", "--rules", rules, "--plan", plan, "--builtin-guards")
    assert code == 0 and isinstance(ir.load_plan(out), ir.Project)


def test_eval_running_example():
    code, out = run("eval", "--plan", PLANS / "eq1.plan.json", "--db", PLANS / "orders.db.json", "--rules", TRANSPOSE)
    assert code == 0
    code2, out2 = run("eval", "--plan", PLANS / "eq2.plan.json", "--db", PLANS / "orders.db.json", "--rules", TRANSPOSE)
    assert json.loads(out) == json.loads(out2)


def test_eval_unknown_table(tmp_path):
    db = tmp_path / "db.json"
    db.write_text(json.dumps({"tables": {}}))
    assert run("eval", "--plan", PLANS / "eq2.plan.json", "--db", db, "--rules", TRANSPOSE)[0] == 1


def test_emit_optgen_matches_golden(tmp_path):
    code, out = run("emit-optgen", TRANSPOSE, "-o", tmp_path)
    assert code == 0
    assert (tmp_path / "SemiJoinAggTranspose.opt").read_text() == (GOLDEN / "SemiJoinAggTranspose.opt").read_text()


def test_emit_optgen_over_the_corpus_skips_unsupported(tmp_path, capsys):
    code, _ = run("emit-optgen", CORPUS, "-o", tmp_path)
    assert code == 0
    assert len(list(tmp_path.glob("*.opt"))) >= 6
    assert "UnionToDistinct: skipped (UnmappedOperator" in capsys.readouterr().err


def test_emit_optgen_named_unsupported_rule_fails(tmp_path):
    assert run("emit-optgen", CORPUS, "-o", tmp_path, "--rule", "UnionToDistinct")[0] == 1


def test_expand_shows_the_lowered_semijoin():
    code, out = run("expand", TRANSPOSE, "--json")
    (entry,) = json.loads(out)
    assert "Exists" in entry["from"] or "Filter" in entry["from"]
    assert "SemiJoin" not in entry["from"]
