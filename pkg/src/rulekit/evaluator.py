"""Reference bag-semantics evaluator for logical plans.

Null is ``None``.  Predicates use SQL three-valued logic (``None`` is
Unknown) and filters/joins keep only rows whose predicate is True.  Distinct
and grouping treat Null as equal to Null.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from . import plan as ir
from .plan import Schema

Row = Tuple[Any, ...]
Bag = Counter


class UnknownTable(Exception):
    pass


class TypeErrorAtRuntime(Exception):
    pass


@dataclass
class Database:
    tables: Dict[str, Tuple[Schema, Bag]] = field(default_factory=dict)

    @staticmethod
    def of(**tables) -> "Database":
        """``Database.of(Order=(schema, rows))`` with rows as any iterable."""
        return Database({k: (s, Counter(tuple(r) for r in rows)) for k, (s, rows) in tables.items()})

    def to_json(self) -> dict:
        out = {}
        for name, (schema, bag) in self.tables.items():
            out[name] = {"schema": ir.schema_to_json(schema), "rows": [list(r) for r in sorted_rows(bag)]}
        return {"tables": out}

    @staticmethod
    def from_json(obj) -> "Database":
        tables = {}
        for name, t in obj["tables"].items():
            schema = ir.schema_from_json(t["schema"])
            rows = Counter()
            for r in t["rows"]:
                if len(r) != len(schema):
                    raise TypeErrorAtRuntime(f"row {r!r} does not match the schema of {name}")
                for v, ty in zip(r, schema.types):
                    try:
                        ir.check_value(v, ty)
                    except ir.SchemaError as e:
                        raise TypeErrorAtRuntime(f"table {name}: {e}") from None
                rows[tuple(r)] += 1
            tables[name] = (schema, rows)
        return Database(tables)


def load_database(text: str) -> Database:
    return Database.from_json(json.loads(text))


def bag_equal(a: Bag, b: Bag) -> bool:
    return +Counter(a) == +Counter(b)


def _sort_key(row):
    return tuple((v is not None, type(v).__name__, v if v is not None else 0) for v in row)


def sorted_rows(bag: Bag):
    """Rows expanded by multiplicity, in a deterministic order."""
    out = []
    for row in sorted(bag, key=_sort_key):
        out.extend([row] * bag[row])
    return out


def bag_to_json(bag: Bag) -> list:
    return [{"row": list(r), "count": bag[r]} for r in sorted(bag, key=_sort_key) if bag[r] > 0]


# ---------------------------------------------------------------------------
# Scalar evaluation


def _and(a, b):
    if a is False or b is False:
        return False
    if a is None or b is None:
        return None
    return True


def _or(a, b):
    if a is True or b is True:
        return True
    if a is None or b is None:
        return None
    return False


def _not(a):
    return None if a is None else not a


_CMP = {
    "eq": lambda a, b: a == b,
    "neq": lambda a, b: a != b,
    "lt": lambda a, b: a < b,
    "leq": lambda a, b: a <= b,
    "gt": lambda a, b: a > b,
    "geq": lambda a, b: a >= b,
}
_ARITH = {"add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b}


class Evaluator:
    def __init__(self, db: Database, registry=None):
        self.db = db
        self.registry = registry

    def expr(self, e: ir.ScalarExpr, env: Dict[str, Row]):
        if isinstance(e, ir.Col):
            row = env.get(e.side)
            if row is None or not 0 <= e.index < len(row):
                raise TypeErrorAtRuntime(f"column {e.side}.{e.index} is not available")
            return row[e.index]
        if isinstance(e, ir.Lit):
            return e.value
        if isinstance(e, ir.ExistsSub):
            owner = env["only"] if "only" in env else env["left"] + env["right"]
            return any(n > 0 for n in self.plan(e.plan, owner).values())
        if isinstance(e, ir.Call):
            fn = e.fn
            if fn == "and":
                a = self.expr(e.args[0], env)
                if a is False:
                    return False
                return _and(a, self.expr(e.args[1], env))
            if fn == "or":
                a = self.expr(e.args[0], env)
                if a is True:
                    return True
                return _or(a, self.expr(e.args[1], env))
            args = [self.expr(a, env) for a in e.args]
            if fn == "not":
                return _not(args[0])
            if fn == "isNull":
                return args[0] is None
            if fn == "isNotNull":
                return args[0] is not None
            if fn in _CMP or fn in _ARITH:
                a, b = args
                if a is None or b is None:
                    return None
                if type(a) is not type(b):
                    raise TypeErrorAtRuntime(f"{fn} applied to {a!r} and {b!r}")
                if fn in _ARITH and not isinstance(a, int):
                    raise TypeErrorAtRuntime(f"{fn} applied to non-integers")
                return (_CMP.get(fn) or _ARITH[fn])(a, b)
            raise TypeErrorAtRuntime(f"unknown builtin {fn}")
        raise TypeErrorAtRuntime(f"not an expression: {e!r}")

    def agg(self, a: ir.AggCall, rows: Bag, outer):
        if a.fn == "Count":
            return sum(rows.values())
        vals = []
        for r, n in rows.items():
            v = self.expr(a.arg, _env(r, outer))
            if v is not None:
                vals.extend([v] * n)
        if not vals:
            return None
        if a.fn == "Sum":
            return sum(vals)
        if a.fn == "Min":
            return min(vals)
        if a.fn == "Max":
            return max(vals)
        raise TypeErrorAtRuntime(f"unknown aggregate {a.fn}")

    def plan(self, p: ir.LogicalPlan, outer: Optional[Row] = None) -> Bag:
        if isinstance(p, ir.Scan):
            if p.table not in self.db.tables:
                raise UnknownTable(p.table)
            schema, rows = self.db.tables[p.table]
            if schema.types != p.schema.types:
                raise TypeErrorAtRuntime(f"scan of {p.table} expects {p.schema}, table has {schema}")
            return Counter(rows)
        if isinstance(p, ir.Values):
            return Counter(tuple(r) for r in p.rows)
        if isinstance(p, ir.Empty):
            return Counter()
        if isinstance(p, ir.Filter):
            src = self.plan(p.input, outer)
            return Counter({r: n for r, n in src.items() if self.expr(p.pred, _env(r, outer)) is True})
        if isinstance(p, ir.Project):
            out = Counter()
            for r, n in self.plan(p.input, outer).items():
                env = _env(r, outer)
                out[tuple(self.expr(e, env) for e, _ in p.exprs)] += n
            return out
        if isinstance(p, ir.Join):
            left = self.plan(p.left, outer)
            right = self.plan(p.right, outer)
            out = Counter()
            for l, n in left.items():
                for r, m in right.items():
                    if self.expr(p.pred, {"left": l, "right": r}) is True:
                        out[l + r] += n * m
            return out
        if isinstance(p, ir.Union_):
            return self.plan(p.left, outer) + self.plan(p.right, outer)
        if isinstance(p, ir.Distinct):
            return Counter({r: 1 for r, n in self.plan(p.input, outer).items() if n > 0})
        if isinstance(p, ir.Aggregate):
            groups: Dict[Row, Bag] = {}
            for r, n in self.plan(p.input, outer).items():
                env = _env(r, outer)
                key = tuple(self.expr(k, env) for k in p.keys)
                groups.setdefault(key, Counter())[r] += n
            out = Counter()
            for key, rows in groups.items():
                out[key + tuple(self.agg(a, rows, outer) for a in p.aggs)] += 1
            return out
        if isinstance(p, ir.Custom):
            if self.registry is None or self.registry.lookup(p.op) is None:
                raise TypeErrorAtRuntime(f"unregistered custom operator {p.op}")
            from .engine import lower_custom

            return self.plan(lower_custom(p, self.registry), outer)
        raise TypeErrorAtRuntime(f"not a plan node: {p!r}")


def _env(row, outer):
    env = {"only": row}
    if outer is not None:
        env["left"] = outer
    return env


def eval_plan(plan: ir.LogicalPlan, db: Database, registry=None) -> Bag:
    """Evaluate ``plan`` against ``db`` and return its bag of rows."""
    return Evaluator(db, registry).plan(plan)
