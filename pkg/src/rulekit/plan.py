"""Concrete logical plans: the trees rules are matched against and produce.

Scalar expressions address columns positionally.  ``side`` is ``only`` for
single-input operators and ``left``/``right`` inside join predicates.  Inside
an ``exists`` subplan, single-input operators use ``left`` to reach the row of
the enclosing operator (for a join that row is the left row followed by the
right row); references further out are not expressible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union


class SchemaError(Exception):
    pass


class ValueType(str, Enum):
    INT = "Int"
    STR = "Str"
    BOOL = "Bool"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Column:
    name: str
    type: ValueType


@dataclass(frozen=True)
class Schema:
    columns: Tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in schema {names}")

    @staticmethod
    def of(*cols: Tuple[str, Union[str, ValueType]]) -> "Schema":
        return Schema(tuple(Column(n, ValueType(t)) for n, t in cols))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def types(self) -> Tuple[ValueType, ...]:
        return tuple(c.type for c in self.columns)

    def __len__(self) -> int:
        return len(self.columns)

    def __str__(self) -> str:
        return "{" + ", ".join(f"{c.name}:{c.type}" for c in self.columns) + "}"


# ---------------------------------------------------------------------------
# Scalar expressions

SIDES = ("only", "left", "right")


@dataclass(frozen=True)
class Col:
    index: int
    side: str = "only"


@dataclass(frozen=True)
class Lit:
    type: ValueType
    value: Any = None


@dataclass(frozen=True)
class Call:
    fn: str
    args: Tuple["ScalarExpr", ...]


@dataclass(frozen=True)
class ExistsSub:
    plan: "LogicalPlan"


ScalarExpr = Union[Col, Lit, Call, ExistsSub]

ARITH = ("add", "sub", "mul")
COMPARE = ("eq", "neq", "lt", "leq", "gt", "geq")
LOGIC = ("and", "or", "not")
NULL_TESTS = ("isNull", "isNotNull")
BUILTINS = ARITH + COMPARE + LOGIC + NULL_TESTS

TRUE = Lit(ValueType.BOOL, True)


def call(fn: str, *args: ScalarExpr) -> Call:
    return Call(fn, tuple(args))


def col(index: int, side: str = "only") -> Col:
    return Col(index, side)


def lit(value, type: Union[str, ValueType, None] = None) -> Lit:
    if type is None:
        if isinstance(value, bool):
            type = ValueType.BOOL
        elif isinstance(value, int):
            type = ValueType.INT
        elif isinstance(value, str):
            type = ValueType.STR
        else:
            raise SchemaError("untyped null literal")
    return Lit(ValueType(type), value)


@dataclass(frozen=True)
class AggCall:
    fn: str
    arg: Optional[ScalarExpr] = None


AGG_FUNCS = ("Sum", "Count", "Min", "Max")

# ---------------------------------------------------------------------------
# Plans


@dataclass(frozen=True)
class Scan:
    table: str
    schema: Schema


@dataclass(frozen=True)
class Values:
    schema: Schema
    rows: Tuple[Tuple[Any, ...], ...]


@dataclass(frozen=True)
class Empty:
    schema: Schema


@dataclass(frozen=True)
class Filter:
    pred: ScalarExpr
    input: "LogicalPlan"


@dataclass(frozen=True)
class Project:
    exprs: Tuple[Tuple[ScalarExpr, str], ...]
    input: "LogicalPlan"


@dataclass(frozen=True)
class Join:
    pred: ScalarExpr
    left: "LogicalPlan"
    right: "LogicalPlan"


@dataclass(frozen=True)
class Union_:
    left: "LogicalPlan"
    right: "LogicalPlan"


@dataclass(frozen=True)
class Distinct:
    input: "LogicalPlan"


@dataclass(frozen=True)
class Aggregate:
    keys: Tuple[ScalarExpr, ...]
    aggs: Tuple[AggCall, ...]
    input: "LogicalPlan"


CustomArg = Union["LogicalPlan", ScalarExpr, Tuple[ScalarExpr, ...], Tuple[AggCall, ...]]


@dataclass(frozen=True)
class Custom:
    """A registered custom operator; argument shapes follow its parameter kinds.

    Plan parameters take a plan, predicate parameters a boolean expression,
    scalar parameters a tuple of expressions and aggregate parameters a tuple
    of :class:`AggCall`.  Lambda arguments address the parameter rows with
    ``only`` (one parameter) or ``left``/``right`` (two parameters).
    """

    op: str
    args: Tuple[CustomArg, ...]


LogicalPlan = Union[Scan, Values, Empty, Filter, Project, Join, Union_, Distinct, Aggregate, Custom]
PLAN_NODES = (Scan, Values, Empty, Filter, Project, Join, Union_, Distinct, Aggregate, Custom)


def is_plan(x) -> bool:
    return isinstance(x, PLAN_NODES)


def children(plan: LogicalPlan) -> Tuple[LogicalPlan, ...]:
    if isinstance(plan, (Filter, Project, Distinct, Aggregate)):
        return (plan.input,)
    if isinstance(plan, (Join, Union_)):
        return (plan.left, plan.right)
    if isinstance(plan, Custom):
        return tuple(a for a in plan.args if is_plan(a))
    return ()


def with_children(plan: LogicalPlan, new: List[LogicalPlan]) -> LogicalPlan:
    new = list(new)
    if isinstance(plan, Filter):
        return Filter(plan.pred, new[0])
    if isinstance(plan, Project):
        return Project(plan.exprs, new[0])
    if isinstance(plan, Distinct):
        return Distinct(new[0])
    if isinstance(plan, Aggregate):
        return Aggregate(plan.keys, plan.aggs, new[0])
    if isinstance(plan, Join):
        return Join(plan.pred, new[0], new[1])
    if isinstance(plan, Union_):
        return Union_(new[0], new[1])
    if isinstance(plan, Custom):
        it = iter(new)
        return Custom(plan.op, tuple(next(it) if is_plan(a) else a for a in plan.args))
    return plan


def op_name(plan: LogicalPlan) -> str:
    if isinstance(plan, Custom):
        return plan.op
    if isinstance(plan, Union_):
        return "Union"
    return type(plan).__name__


def node_at(plan: LogicalPlan, path: Iterable[int]) -> LogicalPlan:
    for i in path:
        plan = children(plan)[i]
    return plan


def replace_at(plan: LogicalPlan, path, new: LogicalPlan) -> LogicalPlan:
    path = list(path)
    if not path:
        return new
    kids = list(children(plan))
    kids[path[0]] = replace_at(kids[path[0]], path[1:], new)
    return with_children(plan, kids)


# ---------------------------------------------------------------------------
# Conjuncts and dependencies


def split_conjuncts(expr: ScalarExpr) -> List[ScalarExpr]:
    """Flatten top-level ``and`` calls, preserving left-to-right order."""
    if isinstance(expr, Call) and expr.fn == "and":
        out: List[ScalarExpr] = []
        for a in expr.args:
            out.extend(split_conjuncts(a))
        return out
    return [expr]


def conjoin(parts: Iterable[ScalarExpr]) -> ScalarExpr:
    """Left-associated conjunction; the empty conjunction is ``TRUE``."""
    parts = list(parts)
    if not parts:
        return TRUE
    out = parts[0]
    for p in parts[1:]:
        out = Call("and", (out, p))
    return out


def column_deps(expr: ScalarExpr, left_arity: Optional[int] = None) -> set:
    """Column references ``(side, index)`` of ``expr``, including correlations.

    Correlated references inside an ``exists`` subplan point at the row of the
    operator owning ``expr``; they are reported as ``only`` references, or
    split into ``left``/``right`` when ``left_arity`` (a join predicate) is given.
    """
    out: set = set()
    _deps(expr, out, left_arity)
    return out


def _deps(expr, out, left_arity):
    if isinstance(expr, Col):
        out.add((expr.side, expr.index))
    elif isinstance(expr, Call):
        for a in expr.args:
            _deps(a, out, left_arity)
    elif isinstance(expr, ExistsSub):
        for i in outer_refs(expr.plan):
            if left_arity is None:
                out.add(("only", i))
            elif i < left_arity:
                out.add(("left", i))
            else:
                out.add(("right", i - left_arity))


def outer_refs(plan: LogicalPlan) -> set:
    """Indices of the enclosing row referenced by a correlated subplan."""
    out: set = set()
    for node in iter_nodes(plan):
        if not isinstance(node, (Filter, Project, Aggregate)):
            continue
        for e in node_exprs(node):
            _outer(e, out)
    return out


def _outer(expr, out):
    if isinstance(expr, Col) and expr.side == "left":
        out.add(expr.index)
    elif isinstance(expr, Call):
        for a in expr.args:
            _outer(a, out)
    # a nested ExistsSub re-roots "left" at its own owner


def node_exprs(node: LogicalPlan) -> List[ScalarExpr]:
    """Scalar expressions evaluated directly by ``node`` (not its children)."""
    if isinstance(node, (Filter, Join)):
        return [node.pred]
    if isinstance(node, Project):
        return [e for e, _ in node.exprs]
    if isinstance(node, Aggregate):
        return list(node.keys) + [a.arg for a in node.aggs if a.arg is not None]
    if isinstance(node, Custom):
        out: List[ScalarExpr] = []
        for a in node.args:
            if is_plan(a):
                continue
            if isinstance(a, tuple):
                for item in a:
                    if isinstance(item, AggCall):
                        if item.arg is not None:
                            out.append(item.arg)
                    else:
                        out.append(item)
            else:
                out.append(a)
        return out
    return []


def iter_nodes(plan: LogicalPlan):
    """Pre-order plan nodes, not descending into subplans of expressions."""
    yield plan
    for c in children(plan):
        yield from iter_nodes(c)


# ---------------------------------------------------------------------------
# Schema derivation


def _agg_name(a: AggCall, input_schema: Schema, i: int) -> str:
    if a.fn == "Count":
        return "count"
    if isinstance(a.arg, Col) and a.arg.side == "only":
        return f"{a.fn.lower()}_{input_schema.columns[a.arg.index].name}"
    return f"{a.fn.lower()}_{i}"


def dedupe(names: Iterable[str]) -> List[str]:
    out: List[str] = []
    seen = set()
    for n in names:
        cand, k = n, 1
        while cand in seen:
            cand = f"{n}_{k}"
            k += 1
        seen.add(cand)
        out.append(cand)
    return out


def output_schema(plan: LogicalPlan, registry=None, outer: Optional[Schema] = None) -> Schema:
    """Derive (and check) the output schema of ``plan``.

    ``outer`` is the schema of the enclosing row when ``plan`` is a correlated
    subplan.  Raises :class:`SchemaError` on ill-formed plans.
    """
    if isinstance(plan, Scan):
        return plan.schema
    if isinstance(plan, Values):
        for row in plan.rows:
            if len(row) != len(plan.schema):
                raise SchemaError("values row arity does not match schema")
            for v, t in zip(row, plan.schema.types):
                check_value(v, t)
        return plan.schema
    if isinstance(plan, Empty):
        return plan.schema
    if isinstance(plan, Filter):
        s = output_schema(plan.input, registry, outer)
        _expect_bool(plan.pred, _scope(only=s, left=outer), registry)
        return s
    if isinstance(plan, Project):
        s = output_schema(plan.input, registry, outer)
        scope = _scope(only=s, left=outer)
        cols = [Column(n, expr_type(e, scope, registry)) for e, n in plan.exprs]
        if not cols:
            raise SchemaError("project with no output columns")
        return Schema(tuple(cols))
    if isinstance(plan, Join):
        ls = output_schema(plan.left, registry, outer)
        rs = output_schema(plan.right, registry, outer)
        _expect_bool(plan.pred, _scope(left=ls, right=rs), registry)
        return concat_schemas(ls, rs)
    if isinstance(plan, Union_):
        ls = output_schema(plan.left, registry, outer)
        rs = output_schema(plan.right, registry, outer)
        if ls.types != rs.types:
            raise SchemaError(f"union inputs disagree: {ls} vs {rs}")
        return ls
    if isinstance(plan, Distinct):
        return output_schema(plan.input, registry, outer)
    if isinstance(plan, Aggregate):
        s = output_schema(plan.input, registry, outer)
        scope = _scope(only=s, left=outer)
        names, types = [], []
        for i, k in enumerate(plan.keys):
            types.append(expr_type(k, scope, registry))
            names.append(s.columns[k.index].name if isinstance(k, Col) and k.side == "only" else f"key{i}")
        for i, a in enumerate(plan.aggs):
            types.append(agg_type(a, scope, registry))
            names.append(_agg_name(a, s, i))
        if not types:
            raise SchemaError("aggregate with no output columns")
        return Schema(tuple(Column(n, t) for n, t in zip(dedupe(names), types)))
    if isinstance(plan, Custom):
        if registry is None or registry.lookup(plan.op) is None:
            raise SchemaError(f"unregistered custom operator {plan.op}")
        if outer is not None and any(outer_refs(c) for c in children(plan)):
            raise SchemaError("correlated references below a custom operator are not supported")
        from .engine import lower_custom

        return output_schema(lower_custom(plan, registry), registry, outer)
    raise SchemaError(f"not a plan node: {plan!r}")


def concat_schemas(a: Schema, b: Schema) -> Schema:
    cols = list(a.columns) + list(b.columns)
    names = dedupe(c.name for c in cols)
    return Schema(tuple(Column(n, c.type) for n, c in zip(names, cols)))


def _scope(**sides) -> Dict[str, Schema]:
    return {k: v for k, v in sides.items() if v is not None}


def _outer_of(scope: Dict[str, Schema]) -> Schema:
    if "only" in scope:
        return scope["only"]
    return concat_schemas(scope["left"], scope["right"])


def _expect_bool(expr, scope, registry):
    t = expr_type(expr, scope, registry)
    if t is not ValueType.BOOL:
        raise SchemaError(f"predicate has type {t}, expected Bool")


def expr_type(expr: ScalarExpr, scope: Dict[str, Schema], registry=None) -> ValueType:
    if isinstance(expr, Col):
        s = scope.get(expr.side)
        if s is None:
            raise SchemaError(f"column side {expr.side!r} is not available here")
        if not 0 <= expr.index < len(s):
            raise SchemaError(f"column reference {expr.side}.{expr.index} out of range")
        return s.columns[expr.index].type
    if isinstance(expr, Lit):
        check_value(expr.value, expr.type)
        return expr.type
    if isinstance(expr, ExistsSub):
        output_schema(expr.plan, registry, _outer_of(scope))
        return ValueType.BOOL
    if isinstance(expr, Call):
        ts = [expr_type(a, scope, registry) for a in expr.args]
        fn = expr.fn
        if fn in ARITH:
            _arity(fn, ts, 2)
            if any(t is not ValueType.INT for t in ts):
                raise SchemaError(f"{fn} expects Int arguments")
            return ValueType.INT
        if fn in COMPARE:
            _arity(fn, ts, 2)
            if ts[0] is not ts[1]:
                raise SchemaError(f"{fn} compares {ts[0]} with {ts[1]}")
            return ValueType.BOOL
        if fn in ("and", "or"):
            _arity(fn, ts, 2)
            if any(t is not ValueType.BOOL for t in ts):
                raise SchemaError(f"{fn} expects Bool arguments")
            return ValueType.BOOL
        if fn == "not":
            _arity(fn, ts, 1)
            if ts[0] is not ValueType.BOOL:
                raise SchemaError("not expects a Bool argument")
            return ValueType.BOOL
        if fn in NULL_TESTS:
            _arity(fn, ts, 1)
            return ValueType.BOOL
        raise SchemaError(f"unknown builtin {fn}")
    raise SchemaError(f"not a scalar expression: {expr!r}")


def agg_type(a: AggCall, scope, registry=None) -> ValueType:
    if a.fn == "Count":
        if a.arg is not None:
            expr_type(a.arg, scope, registry)
        return ValueType.INT
    if a.fn not in AGG_FUNCS:
        raise SchemaError(f"unknown aggregate {a.fn}")
    if a.arg is None:
        raise SchemaError(f"{a.fn} needs an argument")
    t = expr_type(a.arg, scope, registry)
    if a.fn == "Sum" and t is not ValueType.INT:
        raise SchemaError("Sum expects an Int argument")
    return t


def _arity(fn, ts, n):
    if len(ts) != n:
        raise SchemaError(f"{fn} takes {n} argument(s), got {len(ts)}")


def check_value(v, t: ValueType) -> None:
    if v is None:
        return
    ok = {
        ValueType.INT: isinstance(v, int) and not isinstance(v, bool),
        ValueType.STR: isinstance(v, str),
        ValueType.BOOL: isinstance(v, bool),
    }[t]
    if not ok:
        raise SchemaError(f"value {v!r} is not of type {t}")


# ---------------------------------------------------------------------------
# JSON encoding


def schema_to_json(s: Schema) -> list:
    return [[c.name, c.type.value] for c in s.columns]


def schema_from_json(obj) -> Schema:
    return Schema(tuple(Column(str(n), ValueType(t)) for n, t in obj))


def expr_to_json(e) -> dict:
    if isinstance(e, Col):
        return {"col": {"side": e.side, "index": e.index}}
    if isinstance(e, Lit):
        return {"lit": {"type": e.type.value, "value": e.value}}
    if isinstance(e, Call):
        return {"call": {"fn": e.fn, "args": [expr_to_json(a) for a in e.args]}}
    if isinstance(e, ExistsSub):
        return {"exists": plan_to_json(e.plan)}
    raise TypeError(f"not a scalar expression: {e!r}")


def expr_from_json(obj) -> ScalarExpr:
    if "col" in obj:
        c = obj["col"]
        if c.get("side", "only") not in SIDES:
            raise ValueError(f"bad column side {c.get('side')!r}")
        return Col(int(c["index"]), c.get("side", "only"))
    if "lit" in obj:
        return Lit(ValueType(obj["lit"]["type"]), obj["lit"]["value"])
    if "call" in obj:
        return Call(obj["call"]["fn"], tuple(expr_from_json(a) for a in obj["call"]["args"]))
    if "exists" in obj:
        return ExistsSub(plan_from_json(obj["exists"]))
    raise ValueError(f"unrecognised expression {obj!r}")


def agg_to_json(a: AggCall) -> dict:
    out = {"fn": a.fn}
    if a.arg is not None:
        out["arg"] = expr_to_json(a.arg)
    return out


def agg_from_json(obj) -> AggCall:
    arg = obj.get("arg")
    return AggCall(obj["fn"], expr_from_json(arg) if arg is not None else None)


def plan_to_json(p: LogicalPlan) -> dict:
    if isinstance(p, Scan):
        return {"op": "scan", "table": p.table, "schema": schema_to_json(p.schema)}
    if isinstance(p, Values):
        return {"op": "values", "schema": schema_to_json(p.schema), "rows": [list(r) for r in p.rows]}
    if isinstance(p, Empty):
        return {"op": "empty", "schema": schema_to_json(p.schema)}
    if isinstance(p, Filter):
        return {"op": "filter", "pred": expr_to_json(p.pred), "input": plan_to_json(p.input)}
    if isinstance(p, Project):
        return {
            "op": "project",
            "exprs": [{"expr": expr_to_json(e), "name": n} for e, n in p.exprs],
            "input": plan_to_json(p.input),
        }
    if isinstance(p, Join):
        return {
            "op": "join",
            "pred": expr_to_json(p.pred),
            "left": plan_to_json(p.left),
            "right": plan_to_json(p.right),
        }
    if isinstance(p, Union_):
        return {"op": "union", "left": plan_to_json(p.left), "right": plan_to_json(p.right)}
    if isinstance(p, Distinct):
        return {"op": "distinct", "input": plan_to_json(p.input)}
    if isinstance(p, Aggregate):
        return {
            "op": "aggregate",
            "keys": [expr_to_json(k) for k in p.keys],
            "aggs": [agg_to_json(a) for a in p.aggs],
            "input": plan_to_json(p.input),
        }
    if isinstance(p, Custom):
        args = []
        for a in p.args:
            if is_plan(a):
                args.append({"plan": plan_to_json(a)})
            elif isinstance(a, tuple) and a and isinstance(a[0], AggCall):
                args.append({"aggs": [agg_to_json(x) for x in a]})
            elif isinstance(a, tuple):
                args.append({"exprs": [expr_to_json(x) for x in a]})
            else:
                args.append({"pred": expr_to_json(a)})
        return {"op": "custom", "name": p.op, "args": args}
    raise TypeError(f"not a plan node: {p!r}")


def plan_from_json(obj) -> LogicalPlan:
    op = obj["op"]
    if op == "scan":
        return Scan(obj["table"], schema_from_json(obj["schema"]))
    if op == "values":
        return Values(schema_from_json(obj["schema"]), tuple(tuple(r) for r in obj["rows"]))
    if op == "empty":
        return Empty(schema_from_json(obj["schema"]))
    if op == "filter":
        return Filter(expr_from_json(obj["pred"]), plan_from_json(obj["input"]))
    if op == "project":
        return Project(
            tuple((expr_from_json(x["expr"]), str(x["name"])) for x in obj["exprs"]),
            plan_from_json(obj["input"]),
        )
    if op == "join":
        return Join(expr_from_json(obj["pred"]), plan_from_json(obj["left"]), plan_from_json(obj["right"]))
    if op == "union":
        return Union_(plan_from_json(obj["left"]), plan_from_json(obj["right"]))
    if op == "distinct":
        return Distinct(plan_from_json(obj["input"]))
    if op == "aggregate":
        return Aggregate(
            tuple(expr_from_json(k) for k in obj["keys"]),
            tuple(agg_from_json(a) for a in obj["aggs"]),
            plan_from_json(obj["input"]),
        )
    if op == "custom":
        args = []
        for a in obj["args"]:
            if "plan" in a:
                args.append(plan_from_json(a["plan"]))
            elif "pred" in a:
                args.append(expr_from_json(a["pred"]))
            elif "exprs" in a:
                args.append(tuple(expr_from_json(x) for x in a["exprs"]))
            elif "aggs" in a:
                args.append(tuple(agg_from_json(x) for x in a["aggs"]))
            else:
                raise ValueError(f"unrecognised custom argument {a!r}")
        return Custom(obj["name"], tuple(args))
    raise ValueError(f"unknown plan op {op!r}")


def dump_plan(plan: LogicalPlan) -> str:
    return json.dumps({"plan": plan_to_json(plan)}, indent=2)


def load_plan(text: str) -> LogicalPlan:
    obj = json.loads(text)
    return plan_from_json(obj["plan"] if "plan" in obj else obj)


# ---------------------------------------------------------------------------
# Readable rendering

_INFIX = {
    "add": "+", "sub": "-", "mul": "*", "eq": "=", "neq": "≠",
    "lt": "<", "leq": "≤", "gt": ">", "geq": "≥", "and": "∧", "or": "∨",
}


def render_expr(e: ScalarExpr, namer, prec: int = 0) -> str:
    """Infix rendering; ``namer(col)`` names a column reference."""
    if not isinstance(e, (Lit, ExistsSub, Call)):
        return namer(e)
    if isinstance(e, Lit):
        if e.value is None:
            return "NULL"
        if isinstance(e.value, bool):
            return "TRUE" if e.value else "FALSE"
        return repr(e.value) if isinstance(e.value, str) else str(e.value)
    if isinstance(e, ExistsSub):
        return f"∃({describe(e.plan)})"
    if e.fn in _INFIX and len(e.args) == 2:
        mine = {"or": 1, "and": 2}.get(e.fn, 3 if e.fn in COMPARE else 4)
        s = f"{render_expr(e.args[0], namer, mine)} {_INFIX[e.fn]} {render_expr(e.args[1], namer, mine + 1)}"
        return f"({s})" if mine < prec else s
    if e.fn == "not":
        return "¬" + render_expr(e.args[0], namer, 5)
    if e.fn == "isNull":
        return f"{render_expr(e.args[0], namer, 5)} IS NULL"
    if e.fn == "isNotNull":
        return f"{render_expr(e.args[0], namer, 5)} IS NOT NULL"
    return f"{e.fn}(" + ", ".join(render_expr(a, namer) for a in e.args) + ")"


def render_agg(a: AggCall, namer) -> str:
    return f"{a.fn}(" + ("" if a.arg is None else render_expr(a.arg, namer)) + ")"


def describe(plan: LogicalPlan, registry=None) -> str:
    """One-line rendering for traces and messages."""
    if isinstance(plan, Scan):
        return f"Scan({plan.table})"
    if isinstance(plan, Values):
        return f"Values({len(plan.rows)} rows)"
    if isinstance(plan, Empty):
        return f"Empty({', '.join(plan.schema.names)})"
    plain = lambda c: f"{c.side}.{c.index}" if c.side != "only" else f"${c.index}"
    if isinstance(plan, Filter):
        return f"Filter({render_expr(plan.pred, plain)}, {describe(plan.input)})"
    if isinstance(plan, Project):
        items = ", ".join(render_expr(e, plain) + f" AS {n}" for e, n in plan.exprs)
        return f"Project([{items}], {describe(plan.input)})"
    if isinstance(plan, Join):
        return f"Join({render_expr(plan.pred, plain)}, {describe(plan.left)}, {describe(plan.right)})"
    if isinstance(plan, Union_):
        return f"Union({describe(plan.left)}, {describe(plan.right)})"
    if isinstance(plan, Distinct):
        return f"Distinct({describe(plan.input)})"
    if isinstance(plan, Aggregate):
        keys = ", ".join(render_expr(k, plain) for k in plan.keys)
        aggs = ", ".join(render_agg(a, plain) for a in plan.aggs)
        return f"Aggregate([{keys}], [{aggs}], {describe(plan.input)})"
    if isinstance(plan, Custom):
        parts = []
        for a in plan.args:
            if is_plan(a):
                parts.append(describe(a))
            elif isinstance(a, tuple):
                parts.append(
                    "[" + ", ".join(render_agg(x, plain) if isinstance(x, AggCall) else render_expr(x, plain) for x in a) + "]"
                )
            else:
                parts.append(render_expr(a, plain))
        return f"{plan.op}({', '.join(parts)})"
    return repr(plan)
