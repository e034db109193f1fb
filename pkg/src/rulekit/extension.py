"""Custom operators: a registry of definitions and their expansion to core patterns."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from . import pattern as pt
from .diagnostics import Code, Diagnostic
from .pattern import TBag, TypeRef


@dataclass(frozen=True)
class ParamSpec:
    """A custom-operator parameter.

    ``kind`` is one of ``plan``, ``predicate``, ``scalar`` or ``aggregate``.
    Plans carry ``row_type``; lambdas carry the binder types in
    ``arg_types`` (a single element type for aggregates) and, except for
    predicates, a ``result``.
    """

    name: str
    kind: str
    row_type: Optional[TypeRef] = None
    arg_types: Tuple[TypeRef, ...] = ()
    result: Optional[TypeRef] = None

    @property
    def is_plan(self) -> bool:
        return self.kind == "plan"

    @property
    def arity(self) -> int:
        return 1 if self.kind == "aggregate" else len(self.arg_types)

    def as_symbol(self) -> Union[pt.PlanSymbol, pt.FuncSymbol]:
        if self.kind == "plan":
            return pt.PlanSymbol(self.name, self.row_type)
        if self.kind == "aggregate":
            return pt.FuncSymbol.aggregate(self.name, self.arg_types[0], self.result)
        if self.kind == "predicate":
            return pt.FuncSymbol(self.name, self.arg_types, pt.BOOL, pt.FuncKind.PREDICATE)
        return pt.FuncSymbol(self.name, self.arg_types, self.result, pt.FuncKind.SCALAR)


@dataclass(frozen=True)
class CustomOpDef:
    name: str
    params: Tuple[ParamSpec, ...]
    output_type: TypeRef
    semantics: pt.Plan

    @property
    def type_params(self) -> Tuple[str, ...]:
        seen: Dict[str, None] = {}
        for p in self.params:
            for t in (p.row_type, p.result, *p.arg_types):
                if t is not None:
                    for n in pt.type_names(t):
                        seen.setdefault(n, None)
        for n in pt.type_names(self.output_type):
            seen.setdefault(n, None)
        return tuple(seen)

    def decls(self) -> pt.Decls:
        syms = [p.as_symbol() for p in self.params]
        return pt.Decls.of(
            [pt.TypeSymbol(n) for n in self.type_params],
            [s for s in syms if isinstance(s, pt.FuncSymbol)],
            [s for s in syms if isinstance(s, pt.PlanSymbol)],
        )

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


class Registry:
    """Immutable mapping of custom operator names to checked definitions."""

    def __init__(self, defs: Optional[Mapping[str, CustomOpDef]] = None, typings=None):
        self._defs: Dict[str, CustomOpDef] = dict(defs or {})
        self._typings = dict(typings or {})

    def lookup(self, name: str) -> Optional[CustomOpDef]:
        return self._defs.get(name)

    def typing(self, name: str):
        return self._typings[name]

    def __contains__(self, name: str) -> bool:
        return name in self._defs

    def __iter__(self):
        return iter(self._defs.values())

    def __len__(self) -> int:
        return len(self._defs)

    def merge(self, other: "Registry") -> "Registry":
        defs, typings = dict(self._defs), dict(self._typings)
        for d in other:
            mine = defs.get(d.name)
            if mine is not None and mine != d:
                raise ValueError(f"conflicting definitions of {d.name}")
            defs[d.name] = d
            typings[d.name] = other.typing(d.name)
        return Registry(defs, typings)

    def _with(self, d: CustomOpDef, typing) -> "Registry":
        defs, typings = dict(self._defs), dict(self._typings)
        defs[d.name] = d
        typings[d.name] = typing
        return Registry(defs, typings)


EMPTY_REGISTRY = Registry()


def register(d: CustomOpDef, registry: Registry) -> Union[Registry, Diagnostic]:
    """Typecheck ``d`` against its parameters and add it to ``registry``."""
    from .typecheck import Inference, TypeCheckError

    where = ("def", d.name)
    if d.name in registry or d.name in pt.CORE_OPERATORS:
        return Diagnostic(Code.DUPLICATE_NAME, f"duplicate operator name {d.name}", path=where)
    names = [p.name for p in d.params]
    if len(set(names)) != len(names):
        return Diagnostic(Code.DUPLICATE_NAME, f"duplicate parameter name in {d.name}", path=where)
    for node in pt.iter_plan_nodes(d.semantics):
        if isinstance(node, pt.Custom) and node.name not in registry:
            return Diagnostic(
                Code.UNRESOLVED_REFERENCE, f"{d.name} refers to undefined operator {node.name}", path=where
            )
        if isinstance(node, pt.Empty):
            return Diagnostic(Code.BAD_DECLARATION, f"{d.name}: Empty is not allowed in definitions", path=where)
    decls = d.decls()
    used = pt.free_symbols(d.semantics)
    for name in sorted((used.plans | used.funcs) - set(names)):
        return Diagnostic(Code.UNRESOLVED_REFERENCE, f"{d.name} refers to undeclared symbol {name}", path=where)
    for name in names:
        if name not in used.plans and name not in used.funcs:
            return Diagnostic(
                Code.UNRESOLVED_REFERENCE, f"{d.name} does not use its parameter {name}", path=where
            )
    diags = pt.validate_decls(decls, where)
    if diags:
        return diags[0]
    inf = Inference(decls, registry)
    try:
        got = inf.plan(d.semantics, {}, where)
        inf.unify(d.output_type, got, where, f"semantics of {d.name}")
        typing = inf.finish()
    except TypeCheckError as e:
        return e.diagnostic()
    return registry._with(d, typing)


def build_registry(defs: Iterable[CustomOpDef], registry: Registry = EMPTY_REGISTRY) -> Registry:
    for d in defs:
        out = register(d, registry)
        if isinstance(out, Diagnostic):
            raise ValueError(out.message)
        registry = out
    return registry


# ---------------------------------------------------------------------------
# Expansion


def free_vars(node) -> set:
    """Binder names referenced by a pattern fragment (tuple binders include their parts)."""
    out: set = set()
    _fv(node, frozenset(), out)
    return out


def _fv(node, bound, out):
    if isinstance(node, pt.Var):
        if node.name not in bound:
            out.add(node.name)
            out.update(pt.binder_names(node.name))
    elif isinstance(node, pt.Lambda):
        inner = bound | set(node.binders)
        for b in node.binders:
            inner |= set(pt.binder_names(b))
        _fv(node.body, inner, out)
    elif isinstance(node, pt.PLAN_TYPES):
        for lam in pt.plan_lambdas(node):
            _fv(lam, bound, out)
        for c in pt.plan_children(node):
            _fv(c, bound, out)
    elif isinstance(node, (pt.Apply, pt.PredApply, pt.AggApply)):
        for a in node.args:
            _fv(a, bound, out)
    elif isinstance(node, pt.Proj):
        _fv(node.expr, bound, out)
    elif isinstance(node, pt.TupleExpr):
        for i in node.items:
            _fv(i, bound, out)
    elif isinstance(node, pt.Not):
        _fv(node.pred, bound, out)
    elif isinstance(node, (pt.And, pt.Or, pt.Eq, pt.Neq)):
        _fv(node.left, bound, out)
        _fv(node.right, bound, out)
    elif isinstance(node, (pt.IsNull, pt.IsNotNull)):
        _fv(node.expr, bound, out)
    elif isinstance(node, pt.Exists):
        _fv(node.plan, bound, out)


def fresh_binder(name: str, avoid) -> str:
    parts = pt.binder_parts(name)
    if parts is None:
        if name not in avoid:
            return name
        for i in itertools.count(1):
            cand = f"{name}{i}"
            if cand not in avoid:
                return cand
    if not (set(parts) | {name}) & set(avoid):
        return name
    for i in itertools.count(1):
        cand = tuple(f"{p}{i}" for p in parts)
        if not set(cand) & set(avoid):
            return pt.tuple_binder(cand)
    raise AssertionError("unreachable")


def _names(binder: str) -> set:
    return {binder, *pt.binder_names(binder)}


def substitute(node, sigma: Mapping[str, pt.Expr]):
    """Capture-avoiding substitution of binder names in a body or plan pattern."""
    if not sigma:
        return node
    fv = set()
    for e in sigma.values():
        fv |= free_vars(e)
    return _subst(node, dict(sigma), fv)


def _subst(node, sigma, fv):
    if isinstance(node, pt.Var):
        return sigma.get(node.name, node)
    if isinstance(node, pt.Proj):
        inner = _subst(node.expr, sigma, fv)
        if isinstance(inner, pt.TupleExpr):
            return inner.items[node.index]
        return pt.Proj(inner, node.index)
    if isinstance(node, pt.TupleExpr):
        return pt.TupleExpr(tuple(_subst(i, sigma, fv) for i in node.items))
    if isinstance(node, pt.Apply):
        return pt.Apply(node.fn, tuple(_subst(a, sigma, fv) for a in node.args))
    if isinstance(node, pt.PredApply):
        return pt.PredApply(node.fn, tuple(_subst(a, sigma, fv) for a in node.args))
    if isinstance(node, pt.AggApply):
        return pt.AggApply(node.fn, tuple(_subst(a, sigma, fv) for a in node.args))
    if isinstance(node, pt.Not):
        return pt.Not(_subst(node.pred, sigma, fv))
    if isinstance(node, (pt.And, pt.Or, pt.Eq, pt.Neq)):
        return type(node)(_subst(node.left, sigma, fv), _subst(node.right, sigma, fv))
    if isinstance(node, (pt.IsNull, pt.IsNotNull)):
        return type(node)(_subst(node.expr, sigma, fv))
    if isinstance(node, pt.Exists):
        return pt.Exists(_subst(node.plan, sigma, fv))
    if isinstance(node, pt.Lambda):
        inner = {k: v for k, v in sigma.items() if not any(k in _names(b) for b in node.binders)}
        binders = []
        for b in node.binders:
            if _names(b) & fv:
                nb = fresh_binder(b, fv | free_vars(node.body))
                inner[b] = pt.Var(nb)
                binders.append(nb)
            else:
                binders.append(b)
        return pt.Lambda(tuple(binders), _subst(node.body, inner, fv))
    if isinstance(node, pt.PLAN_TYPES):
        return map_plan(node, lambda p: _subst(p, sigma, fv), lambda lam: _subst(lam, sigma, fv))
    return node


def map_plan(node: pt.Plan, on_child, on_lambda) -> pt.Plan:
    """Rebuild ``node`` with its children and lambdas transformed."""
    if isinstance(node, (pt.Sym, pt.Empty)):
        return node
    if isinstance(node, pt.Filter):
        return pt.Filter(on_lambda(node.pred), on_child(node.input))
    if isinstance(node, pt.Project):
        return pt.Project(on_lambda(node.fn), on_child(node.input))
    if isinstance(node, pt.Join):
        return pt.Join(on_lambda(node.pred), on_child(node.left), on_child(node.right))
    if isinstance(node, pt.Union_):
        return pt.Union_(on_child(node.left), on_child(node.right))
    if isinstance(node, pt.Distinct):
        return pt.Distinct(on_child(node.input))
    if isinstance(node, pt.Aggregate):
        return pt.Aggregate(on_lambda(node.key), on_lambda(node.agg), on_child(node.input))
    if isinstance(node, pt.Custom):
        return pt.Custom(
            node.name,
            tuple(on_lambda(a) if isinstance(a, pt.Lambda) else on_child(a) for a in node.args),
        )
    raise TypeError(f"not a plan pattern: {node!r}")


def expand(pattern: pt.Plan, registry: Registry) -> pt.Plan:
    """Replace every custom operator by its (recursively expanded) semantics."""
    return _expand_plan(pattern, registry, frozenset())


def _expand_plan(node, registry, scope):
    if isinstance(node, pt.Custom):
        args = tuple(
            _expand_lambda(a, registry, scope) if isinstance(a, pt.Lambda) else _expand_plan(a, registry, scope)
            for a in node.args
        )
        d = registry.lookup(node.name)
        if d is None:
            raise KeyError(f"unknown operator {node.name}")
        out = _Instantiator(d, args, scope).run()
        return _expand_plan(out, registry, scope)
    return map_plan(
        node,
        lambda c: _expand_plan(c, registry, scope),
        lambda lam: _expand_lambda(lam, registry, scope),
    )


def _expand_lambda(lam: pt.Lambda, registry, scope):
    inner = set(scope)
    for b in lam.binders:
        inner |= _names(b)
    return pt.Lambda(lam.binders, _expand_body(lam.body, registry, frozenset(inner)))


def _expand_body(node, registry, scope):
    if isinstance(node, pt.Exists):
        return pt.Exists(_expand_plan(node.plan, registry, scope))
    if isinstance(node, pt.Not):
        return pt.Not(_expand_body(node.pred, registry, scope))
    if isinstance(node, (pt.And, pt.Or)):
        return type(node)(_expand_body(node.left, registry, scope), _expand_body(node.right, registry, scope))
    return node


class _Instantiator:
    """Substitutes actual arguments into one definition's semantics."""

    def __init__(self, d: CustomOpDef, args, scope):
        self.d = d
        self.plans = {}
        self.fns: Dict[str, pt.Lambda] = {}
        for p, a in zip(d.params, args):
            (self.plans if p.is_plan else self.fns)[p.name] = a
        self.avoid = set(scope)
        for a in args:
            self.avoid |= free_vars(a)

    def run(self) -> pt.Plan:
        return self.plan(self.d.semantics, {}, frozenset(self.avoid))

    def plan(self, node, ren, avoid):
        if isinstance(node, pt.Sym):
            return self.plans[node.name]
        return map_plan(node, lambda c: self.plan(c, ren, avoid), lambda lam: self.lam(lam, ren, avoid))

    def lam(self, lam: pt.Lambda, ren, avoid):
        ren = dict(ren)
        avoid = set(avoid)
        binders = []
        for b in lam.binders:
            want = self._preferred(b, lam.body) or b
            chosen = fresh_binder(want, avoid)
            if chosen != want and want != b:
                chosen = fresh_binder(b, avoid)
            avoid |= _names(chosen)
            ren[b] = pt.Var(chosen)
            binders.append(chosen)
        return pt.Lambda(tuple(binders), self.body(lam.body, ren, frozenset(avoid)))

    def _preferred(self, binder: str, body) -> Optional[str]:
        for app in _iter_calls(body):
            arg_lam = self.fns.get(app.fn)
            if arg_lam is None:
                continue
            for j, a in enumerate(app.args):
                if a == pt.Var(binder) and j < len(arg_lam.binders):
                    return arg_lam.binders[j]
        return None

    def body(self, node, ren, avoid):
        if isinstance(node, (pt.PredApply, pt.Apply, pt.AggApply)) and node.fn in self.fns:
            actuals = [self.body(a, ren, avoid) for a in node.args]
            arg_lam = self.fns[node.fn]
            if isinstance(node, pt.AggApply):
                # aggregate params take the group binder; the body is the user's α
                return substitute(arg_lam.body, {arg_lam.binders[0]: actuals[0]})
            return substitute(arg_lam.body, dict(zip(arg_lam.binders, actuals)))
        if isinstance(node, pt.Var):
            return ren.get(node.name, node)
        if isinstance(node, pt.Proj):
            inner = self.body(node.expr, ren, avoid)
            if isinstance(inner, pt.TupleExpr):
                return inner.items[node.index]
            return pt.Proj(inner, node.index)
        if isinstance(node, pt.TupleExpr):
            return pt.TupleExpr(tuple(self.body(i, ren, avoid) for i in node.items))
        if isinstance(node, (pt.Apply, pt.PredApply, pt.AggApply)):
            return type(node)(node.fn, tuple(self.body(a, ren, avoid) for a in node.args))
        if isinstance(node, pt.Not):
            return pt.Not(self.body(node.pred, ren, avoid))
        if isinstance(node, (pt.And, pt.Or, pt.Eq, pt.Neq)):
            return type(node)(self.body(node.left, ren, avoid), self.body(node.right, ren, avoid))
        if isinstance(node, (pt.IsNull, pt.IsNotNull)):
            return type(node)(self.body(node.expr, ren, avoid))
        if isinstance(node, pt.Exists):
            return pt.Exists(self.plan(node.plan, ren, avoid))
        return node


def _iter_calls(node):
    if isinstance(node, (pt.PredApply, pt.Apply, pt.AggApply)):
        yield node
        for a in node.args:
            yield from _iter_calls(a)
    elif isinstance(node, pt.Not):
        yield from _iter_calls(node.pred)
    elif isinstance(node, (pt.And, pt.Or, pt.Eq, pt.Neq)):
        yield from _iter_calls(node.left)
        yield from _iter_calls(node.right)
    elif isinstance(node, (pt.IsNull, pt.IsNotNull)):
        yield from _iter_calls(node.expr)
    elif isinstance(node, pt.Proj):
        yield from _iter_calls(node.expr)
    elif isinstance(node, pt.TupleExpr):
        for i in node.items:
            yield from _iter_calls(i)
    elif isinstance(node, pt.Exists):
        for lam_node in pt.iter_plan_nodes(node.plan):
            for lam in pt.plan_lambdas(lam_node):
                yield from _iter_calls(lam.body)


def contains_custom(pattern: pt.Plan) -> bool:
    return any(isinstance(n, pt.Custom) for n in pt.iter_plan_nodes(pattern))


def alpha_equal(a, b) -> bool:
    """Structural equality up to consistent renaming of lambda binders."""
    return _alpha(a, b, {}, {})


def _alpha(a, b, ma, mb) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, pt.Var):
        return ma.get(a.name, a.name) == mb.get(b.name, b.name)
    if isinstance(a, pt.Lambda):
        if len(a.binders) != len(b.binders):
            return False
        ma, mb = dict(ma), dict(mb)
        for i, (x, y) in enumerate(zip(a.binders, b.binders)):
            px, py = pt.binder_parts(x), pt.binder_parts(y)
            if (px is None) != (py is None) or (px and len(px) != len(py)):
                return False
            token = f"#{id(a)}.{i}"
            ma[x] = token
            mb[y] = token
        return _alpha(a.body, b.body, ma, mb)
    if hasattr(a, "__dataclass_fields__"):
        for f in a.__dataclass_fields__:
            if not _alpha(getattr(a, f), getattr(b, f), ma, mb):
                return False
        return True
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_alpha(x, y, ma, mb) for x, y in zip(a, b))
    return a == b
