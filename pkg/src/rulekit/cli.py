"""Command-line front end: check, expand, verify, apply, eval, emit-optgen.

Exit codes: 0 success, 1 domain failure (counterexample, no match under
``--expect-match``, emission failure), 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import __version__
from . import codegen, dsl, engine, evaluator, plan as ir, verifier
from .diagnostics import DiagnosticError
from .extension import EMPTY_REGISTRY, expand
from .typecheck import typecheck_rule


class UsageError(Exception):
    pass


class FileDiagnostics(Exception):
    def __init__(self, path, diagnostics):
        self.path = path
        self.diagnostics = diagnostics
        super().__init__(str(path))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Loading


def rule_paths(args: Sequence[str]) -> List[Path]:
    out: List[Path] = []
    for a in args:
        p = Path(a)
        if p.is_dir():
            out.extend(sorted(p.glob("*.rules")))
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"no such file or directory: {a}")
    return out


def load_rules(args: Sequence[str]):
    """Parse rule files; returns ``[(path, rule_file)]`` and a merged registry."""
    loaded = []
    registry = EMPTY_REGISTRY
    for p in rule_paths(args):
        try:
            rf = dsl.load_rule_file(p)
        except DiagnosticError as e:
            raise FileDiagnostics(p, e.diagnostics) from None
        except OSError as e:
            raise UsageError(f"cannot read {p}: {e.strerror}") from None
        try:
            registry = registry.merge(rf.registry)
        except ValueError as e:
            raise UsageError(f"{p}: {e}") from None
        loaded.append((p, rf))
    return loaded, registry


def select(loaded, name: Optional[str]):
    pairs = [(p, r) for p, rf in loaded for r in rf.rules]
    if name is None:
        return pairs
    pairs = [(p, r) for p, r in pairs if r.name == name]
    if not pairs:
        raise UsageError(f"no rule named {name}")
    return pairs


def typed(rule, registry):
    out = typecheck_rule(rule, registry)
    if isinstance(out, list):
        raise DiagnosticError(out)
    return out


def resolve_seed(flag: Optional[int]) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("RULEKIT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"RULEKIT_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# Subcommands


def cmd_check(a, out) -> int:
    loaded, _ = load_rules(a.rules)
    if a.json:
        out.write(json.dumps({"files": [{"path": str(p), "rules": [r.name for r in rf.rules]} for p, rf in loaded], "ok": True}) + "\n")
    elif not a.quiet:
        for p, rf in loaded:
            out.write(f"{p}: ok ({len(rf.rules)} rules, {len(rf.defs)} definitions)\n")
    return 0


def cmd_expand(a, out) -> int:
    loaded, registry = load_rules(a.rules)
    entries = []
    for _, r in select(loaded, a.rule):
        entries.append((r.name, dsl.print_plan(expand(r.source, registry)), dsl.print_plan(expand(r.target, registry))))
    if a.json:
        out.write(json.dumps([{"rule": n, "from": f, "to": t} for n, f, t in entries]) + "\n")
    else:
        for n, f, t in entries:
            out.write(f"rule {n}\n  from {f}\n  to {t}\n")
    return 0


def cmd_verify(a, out) -> int:
    loaded, registry = load_rules(a.rules)
    cfg = verifier.VerifyConfig(
        trials=a.trials, min_domain=a.min_domain, max_domain=a.max_domain, max_rows=a.max_rows, seed=a.seed,
    )
    if not 1 <= cfg.min_domain <= cfg.max_domain or cfg.trials < 1 or cfg.max_rows < 0:
        raise UsageError("need trials >= 1, 1 <= min-domain <= max-domain and max-rows >= 0")
    failed = False
    reports = []
    for path, r in select(loaded, a.rule):
        rep = verifier.verify_rule(typed(r, registry), registry, cfg)
        obj = verifier.report_to_json(rep)
        if not rep.ok:
            failed = True
            obj["replay"] = f"rulekit verify {path} --rule {r.name} --seed {cfg.seed} --trials {cfg.trials}"
        reports.append(obj)
        if a.json:
            continue
        if rep.ok:
            if not a.quiet:
                out.write(f"{r.name}: no counterexample ({rep.trials_run} trials, {rep.elapsed:.2f}s)\n")
        else:
            out.write(f"{r.name}: counterexample at trial {rep.trials_run - 1}\n")
            out.write(json.dumps(obj["counterexample"], indent=2) + "\n")
            out.write(f"replay: {obj['replay']}\n")
    if a.json:
        out.write(json.dumps({"reports": reports, "ok": not failed, "bound": cfg.bound()}) + "\n")
    elif not a.quiet:
        out.write(f"note: {cfg.bound()}; no counterexample is not a proof of equivalence\n")
    return 1 if failed else 0


def _read_plan(path: str):
    try:
        return ir.load_plan(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read plan {path}: {e.strerror}") from None
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"bad plan file {path}: {e}") from None


def cmd_apply(a, out) -> int:
    loaded, registry = load_rules(a.rules)
    rules = [typed(r, registry) for _, r in select(loaded, a.rule)]
    plan = _read_plan(a.plan)
    try:
        ir.output_schema(plan, registry)
    except ir.SchemaError as e:
        raise UsageError(f"ill-typed plan {a.plan}: {e}") from None
    guards = engine.BUILTIN_GUARDS if a.builtin_guards else None
    try:
        if a.fixpoint:
            new, trace = engine.apply_rules_to_fixpoint(rules, plan, registry, a.max_passes, guards)
        else:
            new, trace = engine.apply_rules_to_fixpoint(rules, plan, registry, 1, guards)
            trace = [f for f in trace if f.rule != engine.MAX_PASSES_MARKER]
    except engine.ConstraintGuardMissing as e:
        raise UsageError(f"{e}; pass --builtin-guards to use the shipped guards") from None
    fired = [f for f in trace if f.rule != engine.MAX_PASSES_MARKER]
    if a.trace:
        for f in trace:
            sys.stderr.write(json.dumps({"rule": f.rule, "path": list(f.path)}) + "\n")
    if a.json:
        obj = {
            "plan": ir.plan_to_json(new),
            "trace": [{"rule": f.rule, "path": list(f.path), "pass": f.pass_index, "bindings": f.bindings} for f in trace],
            "changed": bool(fired),
        }
        out.write(json.dumps(obj, indent=2) + "\n")
    else:
        out.write(ir.dump_plan(new) + "\n")
    if a.expect_match and not fired:
        sys.stderr.write("no rule matched\n")
        return 1
    return 0


def cmd_eval(a, out) -> int:
    registry = EMPTY_REGISTRY
    if a.rules:
        _, registry = load_rules(a.rules)
    plan = _read_plan(a.plan)
    try:
        db = evaluator.load_database(Path(a.db).read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read database {a.db}: {e.strerror}") from None
    except (ValueError, KeyError, TypeError, evaluator.TypeErrorAtRuntime) as e:
        raise UsageError(f"bad database file {a.db}: {e}") from None
    try:
        bag = evaluator.eval_plan(plan, db, registry)
    except (evaluator.UnknownTable, evaluator.TypeErrorAtRuntime) as e:
        sys.stderr.write(f"evaluation failed: {type(e).__name__}: {e}\n")
        return 1
    out.write(json.dumps(evaluator.bag_to_json(bag), indent=None if a.json else 2) + "\n")
    return 0


def cmd_emit(a, out) -> int:
    loaded, registry = load_rules(a.rules)
    opmap = codegen.load_opmap(a.opmap) if a.opmap else codegen.load_opmap()
    target = Path(a.output)
    target.mkdir(parents=True, exist_ok=True)
    failed = False
    written = []
    cfg = verifier.VerifyConfig(seed=a.seed)
    for _, r in select(loaded, a.rule):
        t = typed(r, registry)
        try:
            rep = verifier.verify_rule(t, registry, cfg)
            verdict = f"{rep.verdict} (seed {cfg.seed}, {cfg.trials} trials)"
            rule = codegen.emit_optgen(t, registry, opmap, verdict)
        except (codegen.UnmappedOperator, codegen.UnsupportedPatternForTarget) as e:
            kind = type(e).__name__
            if a.rule:
                sys.stderr.write(f"{r.name}: {kind}: {e}\n")
                failed = True
            elif not a.quiet:
                sys.stderr.write(f"{r.name}: skipped ({kind}: {e})\n")
            continue
        dest = target / f"{r.name}.opt"
        dest.write_text(rule.text, encoding="utf-8")
        written.append(str(dest))
        if not a.quiet and not a.json:
            out.write(f"wrote {dest}\n")
    if a.json:
        out.write(json.dumps({"written": written, "ok": not failed}) + "\n")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand.  The copies
    # use SUPPRESS so a subcommand's default never hides an earlier value.
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default: $RULEKIT_SEED or 0)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="print only failures")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")

    p = _Parser(prog="rulekit", description="Typed query-rewrite rules with bounded equivalence checking.", parents=[common])
    p.set_defaults(seed=None, quiet=False, json=False)
    p.add_argument("--version", action="version", version=f"rulekit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("check", parents=[common], help="parse and typecheck rule files")
    s.add_argument("rules", nargs="+")
    s.set_defaults(run=cmd_check)

    s = sub.add_parser("expand", parents=[common], help="print rules with custom operators expanded")
    s.add_argument("rules", nargs="+")
    s.add_argument("--rule")
    s.set_defaults(run=cmd_expand)

    s = sub.add_parser("verify", parents=[common], help="bounded equivalence check")
    s.add_argument("rules", nargs="+")
    s.add_argument("--rule")
    s.add_argument("--trials", type=int, default=verifier.VerifyConfig.trials)
    s.add_argument("--min-domain", type=int, default=verifier.VerifyConfig.min_domain)
    s.add_argument("--max-domain", type=int, default=verifier.VerifyConfig.max_domain)
    s.add_argument("--max-rows", type=int, default=verifier.VerifyConfig.max_rows)
    s.set_defaults(run=cmd_verify)

    s = sub.add_parser("apply", parents=[common], help="rewrite a plan with rules")
    s.add_argument("--rules", nargs="+", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--rule")
    s.add_argument("--fixpoint", action="store_true")
    s.add_argument("--max-passes", type=int, default=10)
    s.add_argument("--expect-match", action="store_true")
    s.add_argument("--trace", action="store_true", help="write one JSON line per firing to stderr")
    s.add_argument("--builtin-guards", action="store_true", help="enable the shipped constraint guards")
    s.set_defaults(run=cmd_apply)

    s = sub.add_parser("eval", parents=[common], help="evaluate a plan on a database")
    s.add_argument("--plan", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--rules", nargs="*", default=[])
    s.set_defaults(run=cmd_eval)

    s = sub.add_parser("emit-optgen", parents=[common], help="write Optgen rules")
    s.add_argument("rules", nargs="+")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--opmap")
    s.add_argument("--rule")
    s.set_defaults(run=cmd_emit)
    return p


def run(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.command is None:
            raise UsageError("missing subcommand")
        a.seed = resolve_seed(a.seed)
        if getattr(a, "max_passes", 1) < 1:
            raise UsageError("--max-passes must be at least 1")
        return a.run(a, out)
    except UsageError as e:
        sys.stderr.write(f"rulekit: error: {e}\n")
        return 2
    except FileDiagnostics as e:
        for d in e.diagnostics:
            sys.stderr.write(d.render(str(e.path)) + "\n")
        return 2
    except DiagnosticError as e:
        for d in e.diagnostics:
            sys.stderr.write(d.render() + "\n")
        return 2
    except verifier.ConstraintUnsatisfiable as e:
        sys.stderr.write(f"rulekit: {e}\n")
        return 1


def main() -> None:
    sys.exit(run())
