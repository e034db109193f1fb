"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the pytest summary.
"""

import io
import json
import random
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from helpers import CORPUS, GOLDEN, MUTANTS, application_cases, corpus, random_db, semijoin_by_hand, semijoin_samples
from rulekit import cli, codegen, dsl, engine, verifier
from rulekit import evaluator as ev
from rulekit import plan as ir
from rulekit.diagnostics import Diagnostic
from rulekit.extension import alpha_equal

PLANS = CORPUS / "plans"
TRANSPOSE = CORPUS / "semijoin_agg_transpose.rules"

# Running-example instantiation, frozen by hand from the original plan file.
EXPECTED_BINDINGS = {
    "P": "λ(k,y). k.cust = y.author ∧ y.rating ≤ 1",
    "G": "λx. x.cust",
    "A": "λx. Sum(x.amt)",
    "L": "Scan(Order)",
    "R": "Scan(Rev)",
}

# Core-only forms of both sides after SemiJoin is replaced by its definition.
DECL = "  types X, Y, K, V;\n  funcs P: (K, Y) -> Bool, G: X -> K;\n  aggs A: Bag<X> -> V;\n  plans L: Bag<X>, R: Bag<Y>;"
SOURCE_CORE = "Filter((k, v) -> Exists(Filter(y -> P(k, y), R)), Aggregate(x -> G(x), x -> A(x), L))"
TARGET_CORE = "Aggregate(x -> G(x), x -> A(x), Filter(x -> Exists(Filter(y -> P(G(x), y), R)), L))"

CATEGORIES = ["Transpose", "Merge", "Pushdown", "Join Transformations", "Simplification", "Expansion"]
REQUIRED = ["SemiJoinAggTranspose", "PruneEmptyFilter", "FilterMerge", "FilterProjectTranspose", "UnionToDistinct"]


def cli_run(*argv):
    buf = io.StringIO()
    code = cli.run([str(a) for a in argv], buf)
    return code, buf.getvalue()


def pattern(text):
    rf = dsl.parse_rule_file(f"rule T {{\n{DECL}\n  from {text};\n  to {text};\n}}\n")
    return rf.rules[0].source


def test_criterion_1_running_example_round_trip(record):
    start = time.perf_counter()
    code, out = cli_run("apply", "--rules", TRANSPOSE, "--plan", PLANS / "eq1.plan.json", "--fixpoint", "--json")
    elapsed = time.perf_counter() - start
    obj = json.loads(out)
    want = ir.load_plan((PLANS / "eq2.plan.json").read_text())
    structural = ir.plan_from_json(obj["plan"]) == want
    bindings = [f["bindings"] for f in obj["trace"]] == [EXPECTED_BINDINGS]
    ok = code == 0 and structural and bindings and elapsed < 1.0
    detail = f"plan equal to the transposed plan: {structural}; bindings verbatim: {bindings}; {elapsed:.3f}s"
    assert record(1, "running-example round trip", ok, detail)


def test_criterion_2_expansion_fidelity(record):
    code, out = cli_run("expand", TRANSPOSE, "--json")
    (entry,) = json.loads(out)
    got_a, got_b = pattern(entry["from"]), pattern(entry["to"])
    a_ok = alpha_equal(got_a, pattern(SOURCE_CORE))
    b_ok = alpha_equal(got_b, pattern(TARGET_CORE))
    ok = code == 0 and a_ok and b_ok
    assert record(2, "expansion fidelity", ok, f"source core form: {a_ok}; target core form: {b_ok}")


def test_criterion_3_corpus_verification(record):
    manifest = tomllib.loads((CORPUS / "manifest.toml").read_text())["categories"]
    names = {n for ns in manifest.values() for n in ns}
    rules, _ = corpus()
    covered = all(manifest.get(c) for c in CATEGORIES) and set(rules) == names
    required = all(n in rules for n in REQUIRED)
    code, out = cli_run("verify", CORPUS, "--json")
    obj = json.loads(out)
    reports = obj["reports"]
    clean = all(r["verdict"] == "noCounterexampleFound" for r in reports)
    # sides that are alpha-equal after expansion stop after one trial
    full = all(r["trials_run"] in (1, 1000) for r in reports)
    slowest = max(r["elapsed_seconds"] for r in reports)
    ok = code == 0 and len(reports) >= 12 and covered and required and clean and full and slowest < 5.0
    detail = (
        f"{len(reports)} rules in {sum(1 for c in CATEGORIES if manifest.get(c))} categories; "
        f"counterexamples: {sum(r['verdict'] != 'noCounterexampleFound' for r in reports)}; "
        f"slowest {slowest:.2f}s; {obj['bound']}"
    )
    assert record(3, "corpus verification", ok, detail)


def test_criterion_4_mutation_kill_rate(record):
    paths = sorted(MUTANTS.glob("*.rules"))
    killed, small, replayed = 0, 0, 0
    for path in paths:
        code, out = cli_run("verify", path, "--json")
        (rep,) = json.loads(out)["reports"]
        if code != 1 or rep["verdict"] != "counterexample":
            continue
        killed += 1
        inst = rep["counterexample"]["instance"]
        rows = max((sum(r["count"] for r in rows) for rows in inst["plans"].values()), default=0)
        dom = max((len(v) for v in inst["domains"].values()), default=0)
        small += rows <= 3 and dom <= 3
        rf = dsl.load_rule_file(path)
        a, b = verifier.replay(rf.rules[0], rf.registry, inst)
        replayed += not ev.bag_equal(a, b)
    n = len(paths)
    ok = n >= 8 and killed == small == replayed == n
    detail = f"killed {killed}/{n}; within 3 rows and domain 3: {small}; replays unequal: {replayed}"
    assert record(4, "mutation kill rate", ok, detail)


def test_criterion_5_oracle_equivalence(record):
    rules, registry = corpus()
    applications, failures = 0, []
    for name, plan in application_cases():
        out = engine.apply_rule(rules[name], plan, registry, engine.BUILTIN_GUARDS)
        if not isinstance(out, engine.Applied):
            failures.append((name, "did not fire"))
            continue
        applications += 1
        for seed in range(20):
            db = random_db(seed)
            if not ev.bag_equal(ev.eval_plan(plan, db, registry), ev.eval_plan(out.plan, db, registry)):
                failures.append((name, seed))
    covered = {name for name, _ in application_cases()}
    ok = applications >= 40 and not failures
    detail = f"{applications} applications over {len(covered)} rules x 20 databases; failures: {len(failures)}"
    assert record(5, "oracle equivalence", ok, detail)


def test_criterion_6_custom_operator_semantics(record):
    _, registry = corpus()
    db = ev.Database()
    agree = 0
    for pred, left, right in semijoin_samples(100):
        custom = ev.eval_plan(ir.Custom("SemiJoin", (pred, left, right)), db, registry)
        agree += ev.bag_equal(custom, ev.eval_plan(semijoin_by_hand(pred, left, right), db))
    assert record(6, "custom-operator semantics", agree == 100, f"{agree}/100 samples agree")


def test_criterion_7_codegen_golden(record, tmp_path):
    outs = []
    for i in range(2):
        d = tmp_path / str(i)
        code, _ = cli_run("emit-optgen", TRANSPOSE, "-o", d, "--rule", "SemiJoinAggTranspose")
        outs.append((code, (d / "SemiJoinAggTranspose.opt").read_text()))
    golden = (GOLDEN / "SemiJoinAggTranspose.opt").read_text()
    text = outs[0][1]
    toks = codegen.optgen_tokens(text)
    names = {"SemiJoin", "GroupBy", "OnlyRefsCols", "RemapPredicate"} <= set(toks)
    guard = codegen.optgen_tokens("& (OnlyRefsCols $on $groupingCols)")
    guarded = any(toks[i:i + len(guard)] == guard for i in range(len(toks)))
    ok = all(c == 0 for c, _ in outs) and text == golden and outs[1][1] == text and names and guarded
    detail = f"golden byte-equal: {text == golden}; stable: {outs[1][1] == text}; node names and guard: {names and guarded}"
    assert record(7, "codegen golden files", ok, detail)


def test_criterion_8_dsl_robustness(record):
    files = sorted(CORPUS.glob("*.rules"))
    round_trip = 0
    for path in files:
        rf = dsl.load_rule_file(path)
        again = dsl.parse_rule_file(dsl.print_rule_file(rf))
        round_trip += not isinstance(again, list) and dsl.print_rule_file(again) == dsl.print_rule_file(rf)
    rng = random.Random("fuzz")
    seeds = [p.read_bytes() for p in files]
    crashes = 0
    for i in range(10_000):
        if i % 2:
            data = bytearray(rng.choice(seeds))
            for _ in range(rng.randint(1, 8)):
                data[rng.randrange(len(data))] = rng.randrange(256)
            data = bytes(data)
        else:
            data = rng.randbytes(rng.randint(0, 200))
        try:
            out = dsl.parse_rule_file(data)
            if isinstance(out, list) and not all(isinstance(d, Diagnostic) for d in out):
                crashes += 1
        except Exception:
            crashes += 1
    ok = round_trip == len(files) and crashes == 0
    assert record(8, "DSL robustness", ok, f"round trip {round_trip}/{len(files)}; 10000 fuzz inputs, crashes: {crashes}")


def test_criterion_9_effort_sanity(record):
    counts = {p.name: len(p.read_text().splitlines()) for p in CORPUS.glob("*.rules")}
    longest = max(counts, key=counts.get)
    ok = all(n <= 40 for n in counts.values())
    assert record(9, "effort sanity", ok, f"longest {longest} at {counts[longest]} lines (ceiling 40)")
