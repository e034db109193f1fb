"""Rule-language AST: patterns over typed uninterpreted symbols.

Patterns reference symbols by name; the enclosing :class:`Rule` (or custom
operator definition) carries the declarations.  A lambda binder written as
``(k, v)`` is stored under the synthetic name ``"(k,v)"`` and its parts are
accessed through :class:`Proj`, so the AST only ever has single binders.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterator, List, NamedTuple, Optional, Tuple, Union

from .diagnostics import Code, Diagnostic

# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class TName:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class TProduct:
    items: Tuple["TypeRef", ...]

    def __str__(self) -> str:
        return "(" + ", ".join(str(t) for t in self.items) + ")"


@dataclass(frozen=True)
class TBool:
    def __str__(self) -> str:
        return "Bool"


@dataclass(frozen=True)
class TBag:
    """Only used as the parameter type of aggregate symbols."""

    item: "TypeRef"

    def __str__(self) -> str:
        return f"Bag<{self.item}>"


TypeRef = Union[TName, TProduct, TBool, TBag]
BOOL = TBool()


def type_names(t: TypeRef) -> Iterator[str]:
    if isinstance(t, TName):
        yield t.name
    elif isinstance(t, TProduct):
        for item in t.items:
            yield from type_names(item)
    elif isinstance(t, TBag):
        yield from type_names(t.item)


# ---------------------------------------------------------------------------
# Symbols


class FuncKind(str, Enum):
    SCALAR = "scalar"
    PREDICATE = "predicate"
    AGGREGATE = "aggregate"


@dataclass(frozen=True)
class TypeSymbol:
    name: str


@dataclass(frozen=True)
class FuncSymbol:
    name: str
    params: Tuple[TypeRef, ...]
    result: TypeRef
    kind: FuncKind

    @staticmethod
    def scalar(name: str, params, result) -> "FuncSymbol":
        params = tuple(params)
        kind = FuncKind.PREDICATE if result == BOOL else FuncKind.SCALAR
        return FuncSymbol(name, params, result, kind)

    @staticmethod
    def aggregate(name: str, item: TypeRef, result: TypeRef) -> "FuncSymbol":
        return FuncSymbol(name, (TBag(item),), result, FuncKind.AGGREGATE)


@dataclass(frozen=True)
class PlanSymbol:
    name: str
    row_type: TypeRef


@dataclass(frozen=True)
class Constraint:
    kind: str
    subject: str


# ---------------------------------------------------------------------------
# Scalar expressions


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    """A literal; only Null is expressible at the pattern level."""

    value: None = None


@dataclass(frozen=True)
class Apply:
    fn: str
    args: Tuple["Expr", ...]


@dataclass(frozen=True)
class Proj:
    """Component ``index`` of a product-typed expression."""

    expr: "Expr"
    index: int


@dataclass(frozen=True)
class TupleExpr:
    items: Tuple["Expr", ...]


Expr = Union[Var, Const, Apply, Proj, TupleExpr]

# ---------------------------------------------------------------------------
# Predicates


@dataclass(frozen=True)
class PredApply:
    fn: str
    args: Tuple[Expr, ...]


@dataclass(frozen=True)
class Top:
    pass


@dataclass(frozen=True)
class Bottom:
    pass


TOP = Top()
BOTTOM = Bottom()


@dataclass(frozen=True)
class Not:
    pred: "Pred"


@dataclass(frozen=True)
class And:
    left: "Pred"
    right: "Pred"


@dataclass(frozen=True)
class Or:
    left: "Pred"
    right: "Pred"


@dataclass(frozen=True)
class Eq:
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Neq:
    left: Expr
    right: Expr


@dataclass(frozen=True)
class IsNull:
    expr: Expr


@dataclass(frozen=True)
class IsNotNull:
    expr: Expr


@dataclass(frozen=True)
class Exists:
    plan: "Plan"


Pred = Union[PredApply, Top, Bottom, Not, And, Or, Eq, Neq, IsNull, IsNotNull, Exists]


@dataclass(frozen=True)
class AggApply:
    fn: str
    args: Tuple[Expr, ...]


@dataclass(frozen=True)
class Lambda:
    binders: Tuple[str, ...]
    body: Union[Pred, Expr, AggApply]


# ---------------------------------------------------------------------------
# Plans


@dataclass(frozen=True)
class Sym:
    name: str


@dataclass(frozen=True)
class Empty:
    type: TypeRef


@dataclass(frozen=True)
class Filter:
    pred: Lambda
    input: "Plan"


@dataclass(frozen=True)
class Project:
    fn: Lambda
    input: "Plan"


@dataclass(frozen=True)
class Join:
    pred: Lambda
    left: "Plan"
    right: "Plan"


@dataclass(frozen=True)
class Union_:
    left: "Plan"
    right: "Plan"


@dataclass(frozen=True)
class Distinct:
    input: "Plan"


@dataclass(frozen=True)
class Aggregate:
    key: Lambda
    agg: Lambda
    input: "Plan"


@dataclass(frozen=True)
class Custom:
    name: str
    args: Tuple[Union["Plan", Lambda], ...]


Plan = Union[Sym, Empty, Filter, Project, Join, Union_, Distinct, Aggregate, Custom]
PLAN_TYPES = (Sym, Empty, Filter, Project, Join, Union_, Distinct, Aggregate, Custom)

CORE_OPERATORS = ("Empty", "Filter", "Project", "Join", "Union", "Distinct", "Aggregate")


def op_name(plan: Plan) -> str:
    if isinstance(plan, Union_):
        return "Union"
    if isinstance(plan, Custom):
        return plan.name
    return type(plan).__name__


def plan_children(plan: Plan) -> Tuple[Plan, ...]:
    if isinstance(plan, (Filter, Project, Distinct, Aggregate)):
        return (plan.input,)
    if isinstance(plan, (Join, Union_)):
        return (plan.left, plan.right)
    if isinstance(plan, Custom):
        return tuple(a for a in plan.args if not isinstance(a, Lambda))
    return ()


def plan_lambdas(plan: Plan) -> Tuple[Lambda, ...]:
    if isinstance(plan, (Filter, Join)):
        return (plan.pred,)
    if isinstance(plan, Project):
        return (plan.fn,)
    if isinstance(plan, Aggregate):
        return (plan.key, plan.agg)
    if isinstance(plan, Custom):
        return tuple(a for a in plan.args if isinstance(a, Lambda))
    return ()


# Destructuring binders -------------------------------------------------------


def tuple_binder(parts) -> str:
    return "(" + ",".join(parts) + ")"


def binder_parts(name: str) -> Optional[Tuple[str, ...]]:
    if name.startswith("("):
        return tuple(name[1:-1].split(","))
    return None


def binder_names(name: str) -> Tuple[str, ...]:
    """Names a binder introduces into scope (the parts, for a tuple binder)."""
    parts = binder_parts(name)
    return parts if parts is not None else (name,)


# ---------------------------------------------------------------------------
# Rules


@dataclass(frozen=True)
class Rule:
    name: str
    types: Tuple[TypeSymbol, ...]
    funcs: Tuple[FuncSymbol, ...]
    aggs: Tuple[FuncSymbol, ...]
    plans: Tuple[PlanSymbol, ...]
    source: Plan
    target: Plan
    constraints: Tuple[Constraint, ...] = ()

    def decls(self) -> "Decls":
        return Decls.of(self.types, self.funcs + self.aggs, self.plans)


@dataclass
class Decls:
    """Name-indexed view of a declaration list."""

    types: Dict[str, TypeSymbol] = field(default_factory=dict)
    funcs: Dict[str, FuncSymbol] = field(default_factory=dict)
    plans: Dict[str, PlanSymbol] = field(default_factory=dict)

    @classmethod
    def of(cls, types, funcs, plans) -> "Decls":
        return cls(
            {t.name: t for t in types},
            {f.name: f for f in funcs},
            {p.name: p for p in plans},
        )


# ---------------------------------------------------------------------------
# Traversal


def iter_plan_nodes(plan: Plan) -> Iterator[Plan]:
    """All plan nodes, including those inside ``Exists`` subqueries (pre-order)."""
    yield plan
    for lam in plan_lambdas(plan):
        for sub in _body_plans(lam.body):
            yield from iter_plan_nodes(sub)
    for child in plan_children(plan):
        yield from iter_plan_nodes(child)


def _body_plans(node) -> Iterator[Plan]:
    if isinstance(node, Exists):
        yield node.plan
    elif isinstance(node, Not):
        yield from _body_plans(node.pred)
    elif isinstance(node, (And, Or)):
        yield from _body_plans(node.left)
        yield from _body_plans(node.right)


def iter_applications(plan: Plan) -> Iterator[Union[Apply, PredApply, AggApply]]:
    for node in iter_plan_nodes(plan):
        for lam in plan_lambdas(node):
            yield from _apps(lam.body)


def _apps(node) -> Iterator[Union[Apply, PredApply, AggApply]]:
    if isinstance(node, (Apply, PredApply, AggApply)):
        yield node
        for a in node.args:
            yield from _apps(a)
    elif isinstance(node, Proj):
        yield from _apps(node.expr)
    elif isinstance(node, TupleExpr):
        for item in node.items:
            yield from _apps(item)
    elif isinstance(node, Not):
        yield from _apps(node.pred)
    elif isinstance(node, (And, Or, Eq, Neq)):
        yield from _apps(node.left)
        yield from _apps(node.right)
    elif isinstance(node, (IsNull, IsNotNull)):
        yield from _apps(node.expr)


class FreeSymbols(NamedTuple):
    plans: FrozenSet[str]
    funcs: FrozenSet[str]
    types: FrozenSet[str]


def free_symbols(pattern: Plan, decls: Optional[Decls] = None) -> FreeSymbols:
    """Symbols of every kind occurring in ``pattern``.

    Type symbols are collected from ``Empty`` nodes and, when ``decls`` is
    given, from the declared signatures of every plan and function symbol that
    occurs.
    """
    plans, funcs, types = set(), set(), set()
    for node in iter_plan_nodes(pattern):
        if isinstance(node, Sym):
            plans.add(node.name)
        elif isinstance(node, Empty):
            types.update(type_names(node.type))
    for app in iter_applications(pattern):
        funcs.add(app.fn)
    if decls is not None:
        for p in plans:
            if p in decls.plans:
                types.update(type_names(decls.plans[p].row_type))
        for f in funcs:
            if f in decls.funcs:
                sym = decls.funcs[f]
                for t in sym.params + (sym.result,):
                    types.update(type_names(t))
    return FreeSymbols(frozenset(plans), frozenset(funcs), frozenset(types))


# ---------------------------------------------------------------------------
# Structural validation


def validate_rule(rule: Rule, registry=None) -> List[Diagnostic]:
    """Check declaration and scoping invariants of ``rule``.

    Returns an empty list when the rule is well-formed.  Custom operators are
    resolved against ``registry`` (an :class:`~rulekit.extension.Registry`).
    """
    diags: List[Diagnostic] = []
    seen: Dict[str, str] = {}
    groups = (
        ("type", rule.types),
        ("func", rule.funcs),
        ("agg", rule.aggs),
        ("plan", rule.plans),
    )
    for label, items in groups:
        for sym in items:
            if sym.name in seen:
                diags.append(
                    Diagnostic(
                        Code.DUPLICATE_NAME,
                        f"duplicate declaration of {sym.name}",
                        path=("decls", label, sym.name),
                    )
                )
            seen[sym.name] = label
    decls = rule.decls()
    diags.extend(validate_decls(decls, ("decls",)))

    checker = _ScopeChecker(decls, registry, diags)
    checker.plan(rule.source, (), ("from",))
    checker.plan(rule.target, (), ("to",))

    src = free_symbols(rule.source)
    dst = free_symbols(rule.target)
    for name in sorted((dst.plans - src.plans) | (dst.funcs - src.funcs)):
        if name in decls.plans or name in decls.funcs:
            diags.append(
                Diagnostic(
                    Code.TO_ONLY_SYMBOL,
                    f"symbol {name} is used in `to` but not captured by `from`",
                    path=("to",),
                )
            )

    for c in rule.constraints:
        if c.kind != "injective":
            diags.append(
                Diagnostic(Code.BAD_CONSTRAINT, f"unknown constraint kind {c.kind}", path=("where",))
            )
        sym = decls.funcs.get(c.subject)
        if sym is None or sym.kind is not FuncKind.SCALAR:
            diags.append(
                Diagnostic(
                    Code.BAD_CONSTRAINT,
                    f"constraint subject {c.subject} is not a declared scalar function",
                    path=("where", c.subject),
                )
            )

    if not diags:
        from .typecheck import output_types

        try:
            src_t, dst_t = output_types(rule, registry)
        except Exception:  # type errors are reported by typecheck_rule
            return diags
        if src_t != dst_t:
            diags.append(
                Diagnostic(
                    Code.OUTPUT_TYPE_MISMATCH,
                    f"output type mismatch: `from` yields Bag<{src_t}>, `to` yields Bag<{dst_t}>",
                    path=("to",),
                )
            )
    return diags


def validate_decls(decls: Decls, path) -> List[Diagnostic]:
    diags = []

    def check_type(t: TypeRef, where):
        if isinstance(t, TName):
            if t.name not in decls.types:
                diags.append(
                    Diagnostic(Code.UNBOUND_SYMBOL, f"unbound symbol {t.name}", path=where)
                )
        elif isinstance(t, TProduct):
            if len(t.items) < 2:
                diags.append(Diagnostic(Code.BAD_DECLARATION, "product types need at least two components", path=where))
            for item in t.items:
                check_type(item, where)
        elif isinstance(t, TBag):
            check_type(t.item, where)

    for f in decls.funcs.values():
        where = tuple(path) + (f.name,)
        for t in f.params:
            if isinstance(t, TBag) and f.kind is not FuncKind.AGGREGATE:
                diags.append(Diagnostic(Code.BAD_DECLARATION, f"{f.name}: Bag parameters are reserved for aggregates", path=where))
            check_type(t, where)
        check_type(f.result, where)
        if f.kind is FuncKind.PREDICATE and f.result != BOOL:
            diags.append(Diagnostic(Code.BAD_DECLARATION, f"predicate {f.name} must return Bool", path=where))
        if f.kind is FuncKind.AGGREGATE and (len(f.params) != 1 or not isinstance(f.params[0], TBag)):
            diags.append(Diagnostic(Code.BAD_DECLARATION, f"aggregate {f.name} must take exactly one Bag<...>", path=where))
    for p in decls.plans.values():
        check_type(p.row_type, tuple(path) + (p.name,))
    return diags


class _ScopeChecker:
    def __init__(self, decls: Decls, registry, diags: List[Diagnostic]):
        self.decls = decls
        self.registry = registry
        self.diags = diags

    def error(self, code, msg, path):
        self.diags.append(Diagnostic(code, msg, path=tuple(path)))

    def plan(self, node: Plan, scope: Tuple[str, ...], path):
        label = op_name(node)
        here = tuple(path) + (label,)
        if isinstance(node, Sym):
            if node.name not in self.decls.plans:
                self.error(Code.UNBOUND_SYMBOL, f"unbound symbol {node.name}", here)
            return
        if isinstance(node, Empty):
            for n in type_names(node.type):
                if n not in self.decls.types:
                    self.error(Code.UNBOUND_SYMBOL, f"unbound symbol {n}", here)
            return
        if isinstance(node, Custom):
            self.custom(node, scope, here)
            return
        arities = {Filter: (1,), Project: (1,), Join: (2,), Aggregate: (1, 1)}
        for lam, arity in zip(plan_lambdas(node), arities.get(type(node), ())):
            self.lam(lam, arity, scope, here)
        for i, child in enumerate(plan_children(node)):
            self.plan(child, scope, here + (f"#{i}",))

    def custom(self, node: Custom, scope, here):
        d = self.registry.lookup(node.name) if self.registry is not None else None
        if d is None:
            self.error(Code.UNKNOWN_OPERATOR, f"unknown operator {node.name}", here)
            return
        if len(d.params) != len(node.args):
            self.error(
                Code.ARITY_MISMATCH,
                f"{node.name} expects {len(d.params)} arguments, got {len(node.args)}",
                here,
            )
            return
        for i, (param, arg) in enumerate(zip(d.params, node.args)):
            where = here + (f"#{i}",)
            if param.is_plan:
                if isinstance(arg, Lambda):
                    self.error(Code.ARITY_MISMATCH, f"argument {i} of {node.name} must be a plan", where)
                else:
                    self.plan(arg, scope, where)
            elif not isinstance(arg, Lambda):
                self.error(Code.ARITY_MISMATCH, f"argument {i} of {node.name} must be a lambda", where)
            else:
                self.lam(arg, param.arity, scope, where)

    def lam(self, lam: Lambda, arity: int, scope, path):
        if len(lam.binders) != arity:
            self.error(
                Code.ARITY_MISMATCH,
                f"lambda takes {arity} binder(s), got {len(lam.binders)}",
                path,
            )
        inner = scope
        names_here = []
        for b in lam.binders:
            for n in binder_names(b):
                if n in inner or n in names_here:
                    self.error(Code.SHADOWING, f"binder {n} shadows an enclosing binder", path)
                names_here.append(n)
            inner = inner + (b,) + binder_names(b)
        self.body(lam.body, inner, tuple(path) + ("λ",))

    def body(self, node, scope, path):
        if isinstance(node, Var):
            if node.name not in scope:
                self.error(Code.UNBOUND_VARIABLE, f"unbound variable {node.name}", path)
        elif isinstance(node, (Apply, PredApply, AggApply)):
            want = {Apply: FuncKind.SCALAR, PredApply: FuncKind.PREDICATE, AggApply: FuncKind.AGGREGATE}[type(node)]
            sym = self.decls.funcs.get(node.fn)
            if sym is None:
                self.error(Code.UNBOUND_SYMBOL, f"unbound symbol {node.fn}", path)
            elif sym.kind is not want:
                self.error(
                    Code.TYPE_MISMATCH,
                    f"{node.fn} is a {sym.kind.value} symbol, used as {want.value}",
                    path,
                )
            elif len(sym.params) != len(node.args):
                self.error(
                    Code.ARITY_MISMATCH,
                    f"{node.fn} expects {len(sym.params)} argument(s), got {len(node.args)}",
                    path,
                )
            for a in node.args:
                self.body(a, scope, path)
        elif isinstance(node, Proj):
            self.body(node.expr, scope, path)
        elif isinstance(node, TupleExpr):
            for item in node.items:
                self.body(item, scope, path)
        elif isinstance(node, Not):
            self.body(node.pred, scope, path)
        elif isinstance(node, (And, Or, Eq, Neq)):
            self.body(node.left, scope, path)
            self.body(node.right, scope, path)
        elif isinstance(node, (IsNull, IsNotNull)):
            self.body(node.expr, scope, path)
        elif isinstance(node, Exists):
            self.plan(node.plan, scope, tuple(path) + ("Exists",))
