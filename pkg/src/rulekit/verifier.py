"""Bounded small-model equivalence checking for rules.

Both sides of a rule are expanded to core operators and evaluated under many
random finite instantiations of the rule's symbols.  Abstract types become
small sets of tokens (``t0``, ``t1``, ...) plus Null; functions and
predicates become total lookup tables; aggregates become random functions of
the multiset they receive; plan symbols become small bags.  A disagreement is
shrunk and reported as a counterexample.

Finding no counterexample is evidence within the sampled bounds, not a proof.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import random
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

from . import pattern as pt
from .evaluator import bag_equal
from .extension import alpha_equal, expand
from .pattern import FuncKind, TBool, TName, TProduct, TypeRef


class ConstraintUnsatisfiable(Exception):
    pass


@dataclass(frozen=True)
class VerifyConfig:
    trials: int = 1000
    min_domain: int = 2
    max_domain: int = 4
    max_rows: int = 3
    retry_budget: int = 100
    seed: int = 0

    def bound(self) -> str:
        return (
            f"bounded check: {self.trials} trials, domains of {self.min_domain}-{self.max_domain} "
            f"values plus Null, at most {self.max_rows} rows per table, seed {self.seed}"
        )


@dataclass
class Instance:
    domains: Dict[str, List[str]]
    funcs: Dict[str, Dict[tuple, Any]]
    plans: Dict[str, Counter]
    agg_salt: str
    seed: int = 0
    trial: int = 0
    aggs: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def copy(self) -> "Instance":
        return Instance(
            {k: list(v) for k, v in self.domains.items()},
            {k: dict(v) for k, v in self.funcs.items()},
            {k: Counter(v) for k, v in self.plans.items()},
            self.agg_salt,
            self.seed,
            self.trial,
        )


@dataclass
class Counterexample:
    instance: Instance
    bag_from: Counter
    bag_to: Counter


@dataclass
class VerifyReport:
    rule: str
    verdict: str  # noCounterexampleFound | counterexample
    trials_run: int
    elapsed: float
    config: VerifyConfig
    counterexample: Optional[Counterexample] = None

    @property
    def ok(self) -> bool:
        return self.verdict == "noCounterexampleFound"


# ---------------------------------------------------------------------------
# Values


def values_of(t: TypeRef, domains: Dict[str, List[str]]) -> List[Any]:
    """Every value of type ``t``; Null is a member of each abstract type."""
    if isinstance(t, TName):
        return list(domains[t.name]) + [None]
    if isinstance(t, TBool):
        return [True, False, None]
    if isinstance(t, TProduct):
        return [tuple(v) for v in itertools.product(*(values_of(i, domains) for i in t.items))]
    raise TypeError(f"no values for {t}")


def random_value(t: TypeRef, domains, rng: random.Random):
    if isinstance(t, TName):
        vals = domains[t.name]
        i = rng.randrange(len(vals) + 1)
        return vals[i] if i < len(vals) else None
    if isinstance(t, TBool):
        return rng.choice((True, False, None))
    if isinstance(t, TProduct):
        return tuple(random_value(i, domains, rng) for i in t.items)
    raise TypeError(f"no values for {t}")


def to_json_value(v):
    if isinstance(v, tuple):
        return [to_json_value(x) for x in v]
    return v


def from_json_value(v):
    if isinstance(v, list):
        return tuple(from_json_value(x) for x in v)
    return v


def _enc(v) -> str:
    return json.dumps(to_json_value(v))


def canonical_multiset(bag: Counter) -> str:
    """Sorted ``(value, multiplicity)`` pairs; equal multisets encode equally."""
    items = sorted((_enc(v), n) for v, n in bag.items() if n > 0)
    return json.dumps(items)


PRED_WEIGHTS = ((True, 0.4), (False, 0.4), (None, 0.2))


def _pred_value(rng: random.Random):
    r = rng.random()
    acc = 0.0
    for v, w in PRED_WEIGHTS:
        acc += w
        if r < acc:
            return v
    return None


# ---------------------------------------------------------------------------
# Sampling


def _injective(table: Dict[tuple, Any]) -> bool:
    outs = [_enc(v) for v in table.values()]
    return len(set(outs)) == len(outs)


def _sample_table(sym: pt.FuncSymbol, domains, rng):
    keys = list(itertools.product(*(values_of(t, domains) for t in sym.params)))
    if sym.kind is FuncKind.PREDICATE:
        return {k: _pred_value(rng) for k in keys}
    return {k: random_value(sym.result, domains, rng) for k in keys}


def sample_instance(rule: pt.Rule, cfg: VerifyConfig, seed: Optional[int] = None, trial: int = 0) -> Instance:
    """A deterministic random instantiation of ``rule``'s symbols."""
    seed = cfg.seed if seed is None else seed
    rng = random.Random(f"{seed}/{trial}")
    domains = {}
    for t in rule.types:
        n = rng.randint(cfg.min_domain, cfg.max_domain)
        domains[t.name] = [f"t{i}" for i in range(n)]
    injective = {c.subject for c in rule.constraints if c.kind == "injective"}
    funcs: Dict[str, Dict[tuple, Any]] = {}
    for sym in rule.funcs:
        table = _sample_table(sym, domains, rng)
        if sym.name in injective:
            table = _sample_injective(sym, domains, rng, cfg)
        funcs[sym.name] = table
    plans = {}
    for p in rule.plans:
        n = rng.randint(0, cfg.max_rows)
        plans[p.name] = Counter(random_value(p.row_type, domains, rng) for _ in range(n))
    salt = f"{rng.getrandbits(64):016x}"
    return Instance(domains, funcs, plans, salt, seed, trial)


def _sample_injective(sym, domains, rng, cfg):
    result = sym.result
    for _ in range(4):
        for _ in range(cfg.retry_budget):
            table = _sample_table(sym, domains, rng)
            if _injective(table):
                return table
        # grow the codomain and try again
        if not isinstance(result, TName):
            break
        toks = domains[result.name]
        toks.append(f"t{len(toks)}")
    raise ConstraintUnsatisfiable(f"could not sample an injective table for {sym.name}")


def constraints_hold(rule: pt.Rule, inst: Instance) -> bool:
    return all(_injective(inst.funcs[c.subject]) for c in rule.constraints if c.kind == "injective")


# ---------------------------------------------------------------------------
# Pattern evaluation under an instance


def _and3(a, b):
    if a is False or b is False:
        return False
    if a is None or b is None:
        return None
    return True


def _or3(a, b):
    if a is True or b is True:
        return True
    if a is None or b is None:
        return None
    return False


def _eq3(a, b):
    if isinstance(a, tuple) and isinstance(b, tuple):
        out = True
        for x, y in zip(a, b):
            out = _and3(out, _eq3(x, y))
        return out
    if a is None or b is None:
        return None
    return a == b


def _all_null(v) -> bool:
    if isinstance(v, tuple):
        return all(_all_null(x) for x in v)
    return v is None


def _none_null(v) -> bool:
    if isinstance(v, tuple):
        return all(_none_null(x) for x in v)
    return v is not None


class PatternEvaluator:
    """Evaluate core-only patterns with table-backed symbols."""

    def __init__(self, rule: pt.Rule, inst: Instance):
        self.decls = rule.decls()
        self.inst = inst

    def aggregate(self, name: str, bag: Counter):
        enc = canonical_multiset(bag)
        memo = self.inst.aggs.setdefault(name, {})
        if enc not in memo:
            vals = values_of(self.decls.funcs[name].result, self.inst.domains)
            h = hashlib.blake2b(f"{self.inst.agg_salt}|{name}|{enc}".encode(), digest_size=8).digest()
            memo[enc] = vals[int.from_bytes(h, "big") % len(vals)]
        return memo[enc]

    def expr(self, e, env):
        if isinstance(e, pt.Var):
            return env[e.name]
        if isinstance(e, pt.Const):
            return None
        if isinstance(e, pt.Proj):
            return self.expr(e.expr, env)[e.index]
        if isinstance(e, pt.TupleExpr):
            return tuple(self.expr(i, env) for i in e.items)
        if isinstance(e, pt.Apply):
            return self.inst.funcs[e.fn][tuple(self.expr(a, env) for a in e.args)]
        raise TypeError(f"not an expression: {e!r}")

    def pred(self, p, env):
        if isinstance(p, pt.PredApply):
            return self.inst.funcs[p.fn][tuple(self.expr(a, env) for a in p.args)]
        if isinstance(p, pt.Top):
            return True
        if isinstance(p, pt.Bottom):
            return False
        if isinstance(p, pt.Not):
            v = self.pred(p.pred, env)
            return None if v is None else not v
        if isinstance(p, pt.And):
            return _and3(self.pred(p.left, env), self.pred(p.right, env))
        if isinstance(p, pt.Or):
            return _or3(self.pred(p.left, env), self.pred(p.right, env))
        if isinstance(p, pt.Eq):
            return _eq3(self.expr(p.left, env), self.expr(p.right, env))
        if isinstance(p, pt.Neq):
            v = _eq3(self.expr(p.left, env), self.expr(p.right, env))
            return None if v is None else not v
        if isinstance(p, pt.IsNull):
            return _all_null(self.expr(p.expr, env))
        if isinstance(p, pt.IsNotNull):
            return _none_null(self.expr(p.expr, env))
        if isinstance(p, pt.Exists):
            return any(n > 0 for n in self.plan(p.plan, env).values())
        raise TypeError(f"not a predicate: {p!r}")

    def plan(self, q, env=None) -> Counter:
        env = env or {}
        if isinstance(q, pt.Sym):
            return Counter(self.inst.plans[q.name])
        if isinstance(q, pt.Empty):
            return Counter()
        if isinstance(q, pt.Filter):
            (b,) = q.pred.binders
            return Counter({r: n for r, n in self.plan(q.input, env).items() if self.pred(q.pred.body, {**env, b: r}) is True})
        if isinstance(q, pt.Project):
            (b,) = q.fn.binders
            out = Counter()
            for r, n in self.plan(q.input, env).items():
                out[self.expr(q.fn.body, {**env, b: r})] += n
            return out
        if isinstance(q, pt.Join):
            bl, br = q.pred.binders
            left, right = self.plan(q.left, env), self.plan(q.right, env)
            out = Counter()
            for l, n in left.items():
                for r, m in right.items():
                    if self.pred(q.pred.body, {**env, bl: l, br: r}) is True:
                        out[(l, r)] += n * m
            return out
        if isinstance(q, pt.Union_):
            return self.plan(q.left, env) + self.plan(q.right, env)
        if isinstance(q, pt.Distinct):
            return Counter({r: 1 for r, n in self.plan(q.input, env).items() if n > 0})
        if isinstance(q, pt.Aggregate):
            (bk,) = q.key.binders
            (ba,) = q.agg.binders
            groups: Dict[Any, Counter] = {}
            for r, n in self.plan(q.input, env).items():
                k = self.expr(q.key.body, {**env, bk: r})
                groups.setdefault(_enc(k), (k, Counter()))[1][r] += n
            out = Counter()
            body = q.agg.body
            for k, rows in groups.values():
                args = Counter()
                for r, n in rows.items():
                    args[self.expr(body.args[0], {**env, ba: r})] += n
                out[(k, self.aggregate(body.fn, args))] += 1
            return out
        raise UnsupportedPattern(f"custom operator {pt.op_name(q)} survived expansion")


class UnsupportedPattern(Exception):
    pass


def evaluate_sides(rule: pt.Rule, src, dst, inst: Instance) -> Tuple[Counter, Counter]:
    ev = PatternEvaluator(rule, inst)
    return ev.plan(src), ev.plan(dst)


# ---------------------------------------------------------------------------
# Shrinking


def _map_value(v, t: TypeRef, name: str, old: str, new):
    if isinstance(t, TName):
        return new if (t.name == name and v == old) else v
    if isinstance(t, TProduct):
        return tuple(_map_value(x, i, name, old, new) for x, i in zip(v, t.items))
    return v


def _mentions(v, t: TypeRef, name: str, old: str) -> bool:
    if isinstance(t, TName):
        return t.name == name and v == old
    if isinstance(t, TProduct):
        return any(_mentions(x, i, name, old) for x, i in zip(v, t.items))
    return False


def merge_value(rule: pt.Rule, inst: Instance, name: str, old: str, new) -> Instance:
    """Remove token ``old`` from type ``name``, replacing it by ``new`` (a token or Null)."""
    out = inst.copy()
    out.domains[name] = [x for x in out.domains[name] if x != old]
    decls = rule.decls()
    for f, table in inst.funcs.items():
        sym = decls.funcs[f]
        kt = TProduct(tuple(sym.params)) if len(sym.params) != 1 else sym.params[0]
        res = sym.result
        new_table = {}
        for k, v in table.items():
            key = k if len(sym.params) != 1 else k[0]
            if _mentions(key, kt, name, old):
                continue
            new_table[k] = _map_value(v, res, name, old, new)
        out.funcs[f] = new_table
    for p, bag in inst.plans.items():
        t = decls.plans[p].row_type
        nb = Counter()
        for r, n in bag.items():
            nb[_map_value(r, t, name, old, new)] += n
        out.plans[p] = nb
    return out


def shrink(rule: pt.Rule, inst: Instance, refutes: Callable[[Instance], bool]) -> Instance:
    """Greedily drop rows, then merge domain values, while the instance still refutes."""
    changed = True
    while changed:
        changed = False
        for p in sorted(inst.plans):
            for r in sorted(inst.plans[p], key=_enc):
                while inst.plans[p][r] > 0:
                    cand = inst.copy()
                    cand.plans[p][r] -= 1
                    cand.plans[p] = +cand.plans[p]
                    if refutes(cand):
                        inst, changed = cand, True
                    else:
                        break
        for t in sorted(inst.domains):
            for old in reversed(list(inst.domains[t])):
                if old not in inst.domains[t] or len(inst.domains[t]) <= 1:
                    continue
                targets = [x for x in inst.domains[t] if x != old] + [None]
                for new in targets:
                    cand = merge_value(rule, inst, t, old, new)
                    if constraints_hold(rule, cand) and refutes(cand):
                        inst, changed = cand, True
                        break
    return inst


# ---------------------------------------------------------------------------
# Verification


def expanded_sides(rule: pt.Rule, registry) -> Tuple[pt.Plan, pt.Plan]:
    return expand(rule.source, registry), expand(rule.target, registry)


def verify_rule(typed_rule, registry=None, cfg: VerifyConfig = VerifyConfig()) -> VerifyReport:
    """Search for an instance on which the two sides disagree."""
    rule = typed_rule.rule if hasattr(typed_rule, "rule") else typed_rule
    start = time.perf_counter()
    src, dst = expanded_sides(rule, registry)
    for side in (src, dst):
        if any(isinstance(n, pt.Custom) for n in pt.iter_plan_nodes(side)):
            raise UnsupportedPattern("expansion left a custom operator behind")
    if alpha_equal(src, dst):
        return VerifyReport(rule.name, "noCounterexampleFound", 1, time.perf_counter() - start, cfg)

    def refutes(inst: Instance) -> bool:
        a, b = evaluate_sides(rule, src, dst, inst)
        return not bag_equal(a, b)

    for i in range(cfg.trials):
        inst = sample_instance(rule, cfg, cfg.seed, i)
        if refutes(inst):
            small = shrink(rule, inst, refutes)
            small.aggs = {}
            a, b = evaluate_sides(rule, src, dst, small)
            cex = Counterexample(small, a, b)
            return VerifyReport(rule.name, "counterexample", i + 1, time.perf_counter() - start, cfg, cex)
    return VerifyReport(rule.name, "noCounterexampleFound", cfg.trials, time.perf_counter() - start, cfg)


# ---------------------------------------------------------------------------
# Serialization and replay


def _bag_json(bag: Counter) -> list:
    return [{"row": to_json_value(r), "count": n} for r, n in sorted(bag.items(), key=lambda kv: _enc(kv[0])) if n > 0]


def instance_to_json(inst: Instance) -> dict:
    return {
        "seed": inst.seed,
        "trial": inst.trial,
        "domains": inst.domains,
        "funcs": {
            f: [{"args": to_json_value(k), "value": to_json_value(v)} for k, v in sorted(t.items(), key=lambda kv: _enc(kv[0]))]
            for f, t in sorted(inst.funcs.items())
        },
        "aggs": {
            a: [{"bag": json.loads(enc), "value": to_json_value(v)} for enc, v in sorted(m.items())]
            for a, m in sorted(inst.aggs.items())
        },
        "agg_salt": inst.agg_salt,
        "plans": {p: _bag_json(b) for p, b in sorted(inst.plans.items())},
    }


def instance_from_json(obj: dict) -> Instance:
    funcs = {f: {from_json_value(e["args"]): from_json_value(e["value"]) for e in t} for f, t in obj["funcs"].items()}
    plans = {p: Counter({from_json_value(e["row"]): e["count"] for e in b}) for p, b in obj["plans"].items()}
    inst = Instance(dict(obj["domains"]), funcs, plans, obj["agg_salt"], obj.get("seed", 0), obj.get("trial", 0))
    inst.aggs = {a: {json.dumps(e["bag"]): from_json_value(e["value"]) for e in m} for a, m in obj.get("aggs", {}).items()}
    return inst


def report_to_json(rep: VerifyReport) -> dict:
    out = {
        "rule": rep.rule,
        "verdict": rep.verdict,
        "trials_run": rep.trials_run,
        "elapsed_seconds": round(rep.elapsed, 3),
        "bound": rep.config.bound(),
    }
    if rep.counterexample is not None:
        c = rep.counterexample
        out["counterexample"] = {
            "instance": instance_to_json(c.instance),
            "from": _bag_json(c.bag_from),
            "to": _bag_json(c.bag_to),
        }
    return out


def replay(rule: pt.Rule, registry, instance_json: dict) -> Tuple[Counter, Counter]:
    """Re-evaluate both sides of ``rule`` on a serialized instance."""
    rule = getattr(rule, "rule", rule)
    inst = instance_from_json(instance_json)
    src, dst = expanded_sides(rule, registry)
    return evaluate_sides(rule, src, dst, inst)
