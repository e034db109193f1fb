"""Type inference for rule patterns.

Rule type symbols are rigid: ``K`` only unifies with ``K``.  Type parameters
of custom operator definitions are instantiated with fresh flexible
variables at every use site, so ``SemiJoin`` can be applied to a left input
of type ``(K, V)``.  Unification is first-order, with no subtyping.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from . import pattern as pt
from .diagnostics import Code, Diagnostic
from .pattern import BOOL, TBag, TBool, TName, TProduct, TypeRef


@dataclass(frozen=True)
class TVar:
    id: int

    def __str__(self) -> str:
        return f"?{self.id}"


class TypeCheckError(Exception):
    def __init__(self, code: Code, message: str, path=()):
        super().__init__(message)
        self.code = code
        self.message = message
        self.path = tuple(path)

    def diagnostic(self) -> Diagnostic:
        return Diagnostic(self.code, self.message, path=self.path)


@dataclass
class Typing:
    """Type annotations for one pattern tree, keyed by node identity."""

    plan_types: Dict[int, TypeRef] = field(default_factory=dict)
    binder_types: Dict[int, Tuple[TypeRef, ...]] = field(default_factory=dict)
    expr_types: Dict[int, TypeRef] = field(default_factory=dict)

    def plan(self, node) -> TypeRef:
        return self.plan_types[id(node)]

    def binders(self, lam) -> Tuple[TypeRef, ...]:
        return self.binder_types[id(lam)]

    def expr(self, node) -> TypeRef:
        return self.expr_types[id(node)]


@dataclass
class TypedRule:
    rule: pt.Rule
    typing: Typing
    source_type: TypeRef
    target_type: TypeRef

    @property
    def name(self) -> str:
        return self.rule.name


class Inference:
    """One inference session; owns the substitution for flexible variables."""

    def __init__(self, decls: pt.Decls, registry=None):
        self.decls = decls
        self.registry = registry
        self.subst: Dict[int, TypeRef] = {}
        self.counter = itertools.count()
        self.typing = Typing()

    # unification -------------------------------------------------------

    def fresh(self) -> TVar:
        return TVar(next(self.counter))

    def walk(self, t: TypeRef) -> TypeRef:
        while isinstance(t, TVar) and t.id in self.subst:
            t = self.subst[t.id]
        return t

    def zonk(self, t: TypeRef) -> TypeRef:
        t = self.walk(t)
        if isinstance(t, TProduct):
            return TProduct(tuple(self.zonk(i) for i in t.items))
        if isinstance(t, TBag):
            return TBag(self.zonk(t.item))
        return t

    def occurs(self, v: TVar, t: TypeRef) -> bool:
        t = self.walk(t)
        if t == v:
            return True
        if isinstance(t, TProduct):
            return any(self.occurs(v, i) for i in t.items)
        if isinstance(t, TBag):
            return self.occurs(v, t.item)
        return False

    def unify(self, a: TypeRef, b: TypeRef, path, what="type") -> None:
        a, b = self.walk(a), self.walk(b)
        if a == b:
            return
        if isinstance(a, TVar) or isinstance(b, TVar):
            v, t = (a, b) if isinstance(a, TVar) else (b, a)
            if self.occurs(v, t):
                raise TypeCheckError(Code.TYPE_MISMATCH, f"infinite type in {what}", path)
            self.subst[v.id] = t
            return
        if isinstance(a, TProduct) and isinstance(b, TProduct) and len(a.items) == len(b.items):
            for x, y in zip(a.items, b.items):
                self.unify(x, y, path, what)
            return
        if isinstance(a, TBag) and isinstance(b, TBag):
            self.unify(a.item, b.item, path, what)
            return
        raise TypeCheckError(
            Code.TYPE_MISMATCH,
            f"type mismatch in {what}: expected {self.zonk(a)}, found {self.zonk(b)}",
            path,
        )

    # plans -------------------------------------------------------------

    def plan(self, node, env: Dict[str, TypeRef], path) -> TypeRef:
        here = tuple(path) + (pt.op_name(node),)
        t = self._plan(node, env, here)
        self.typing.plan_types[id(node)] = t
        return t

    def _plan(self, node, env, here) -> TypeRef:
        if isinstance(node, pt.Sym):
            sym = self.decls.plans.get(node.name)
            if sym is None:
                raise TypeCheckError(Code.UNBOUND_SYMBOL, f"unbound symbol {node.name}", here)
            return sym.row_type
        if isinstance(node, pt.Empty):
            for n in pt.type_names(node.type):
                if n not in self.decls.types:
                    raise TypeCheckError(Code.UNBOUND_SYMBOL, f"unbound symbol {n}", here)
            return node.type
        if isinstance(node, pt.Filter):
            row = self.plan(node.input, env, here + ("#0",))
            self.pred_lambda(node.pred, (row,), env, here)
            return row
        if isinstance(node, pt.Project):
            row = self.plan(node.input, env, here + ("#0",))
            return self.expr_lambda(node.fn, (row,), env, here)
        if isinstance(node, pt.Join):
            left = self.plan(node.left, env, here + ("#0",))
            right = self.plan(node.right, env, here + ("#1",))
            self.pred_lambda(node.pred, (left, right), env, here)
            return TProduct((left, right))
        if isinstance(node, pt.Union_):
            left = self.plan(node.left, env, here + ("#0",))
            right = self.plan(node.right, env, here + ("#1",))
            self.unify(left, right, here, "Union inputs")
            return left
        if isinstance(node, pt.Distinct):
            return self.plan(node.input, env, here + ("#0",))
        if isinstance(node, pt.Aggregate):
            row = self.plan(node.input, env, here + ("#0",))
            key = self.expr_lambda(node.key, (row,), env, here + ("key",))
            val = self.agg_lambda(node.agg, row, env, here + ("agg",))
            return TProduct((key, val))
        if isinstance(node, pt.Custom):
            return self.custom(node, env, here)
        raise TypeCheckError(Code.SYNTAX, f"not a plan pattern: {node!r}", here)

    def custom(self, node: pt.Custom, env, here) -> TypeRef:
        d = self.registry.lookup(node.name) if self.registry is not None else None
        if d is None:
            raise TypeCheckError(Code.UNKNOWN_OPERATOR, f"unknown operator {node.name}", here)
        if len(d.params) != len(node.args):
            raise TypeCheckError(
                Code.ARITY_MISMATCH,
                f"{node.name} expects {len(d.params)} arguments, got {len(node.args)}",
                here,
            )
        inst = {n: self.fresh() for n in d.type_params}

        def sub(t):
            return substitute_names(t, inst)

        order = sorted(range(len(d.params)), key=lambda i: not d.params[i].is_plan)
        for i in order:
            param, arg = d.params[i], node.args[i]
            where = here + (f"#{i}",)
            if param.is_plan:
                if isinstance(arg, pt.Lambda):
                    raise TypeCheckError(Code.ARITY_MISMATCH, f"argument {i} of {node.name} must be a plan", where)
                got = self.plan(arg, env, where)
                self.unify(sub(param.row_type), got, where, f"argument {param.name} of {node.name}")
                continue
            if not isinstance(arg, pt.Lambda):
                raise TypeCheckError(Code.ARITY_MISMATCH, f"argument {i} of {node.name} must be a lambda", where)
            if param.kind == "predicate":
                self.pred_lambda(arg, tuple(sub(t) for t in param.arg_types), env, where)
            elif param.kind == "scalar":
                got = self.expr_lambda(arg, tuple(sub(t) for t in param.arg_types), env, where)
                self.unify(sub(param.result), got, where, f"argument {param.name} of {node.name}")
            else:
                got = self.agg_lambda(arg, sub(param.arg_types[0]), env, where)
                self.unify(sub(param.result), got, where, f"argument {param.name} of {node.name}")
        return sub(d.output_type)

    # lambdas -----------------------------------------------------------

    def bind(self, lam: pt.Lambda, types, env, path) -> Dict[str, TypeRef]:
        if len(lam.binders) != len(types):
            raise TypeCheckError(
                Code.ARITY_MISMATCH,
                f"lambda takes {len(types)} binder(s), got {len(lam.binders)}",
                path,
            )
        inner = dict(env)
        for b, t in zip(lam.binders, types):
            parts = pt.binder_parts(b)
            if parts is not None:
                w = self.walk(t)
                if isinstance(w, TVar):
                    self.unify(w, TProduct(tuple(self.fresh() for _ in parts)), path)
                    w = self.walk(w)
                if not isinstance(w, TProduct) or len(w.items) != len(parts):
                    raise TypeCheckError(
                        Code.TYPE_MISMATCH,
                        f"cannot destructure {self.zonk(t)} into {len(parts)} components",
                        path,
                    )
            inner[b] = t
        self.typing.binder_types[id(lam)] = tuple(types)
        return inner

    def pred_lambda(self, lam, types, env, path) -> None:
        inner = self.bind(lam, types, env, path)
        self.pred(lam.body, inner, tuple(path) + ("λ",))

    def expr_lambda(self, lam, types, env, path) -> TypeRef:
        inner = self.bind(lam, types, env, path)
        if not _is_expr(lam.body):
            raise TypeCheckError(Code.TYPE_MISMATCH, "expected a scalar expression", path)
        return self.expr(lam.body, inner, tuple(path) + ("λ",))

    def agg_lambda(self, lam, row, env, path) -> TypeRef:
        inner = self.bind(lam, (row,), env, path)
        body = lam.body
        if not isinstance(body, pt.AggApply):
            raise TypeCheckError(Code.TYPE_MISMATCH, "expected an aggregate application", path)
        sym = self._sym(body.fn, pt.FuncKind.AGGREGATE, len(body.args), path)
        (bag,) = sym.params
        (arg,) = body.args
        self.unify(bag.item, self.expr(arg, inner, path), path, f"argument of {body.fn}")
        return sym.result

    # bodies ------------------------------------------------------------

    def _sym(self, name, kind, nargs, path) -> pt.FuncSymbol:
        sym = self.decls.funcs.get(name)
        if sym is None:
            raise TypeCheckError(Code.UNBOUND_SYMBOL, f"unbound symbol {name}", path)
        if sym.kind is not kind:
            raise TypeCheckError(
                Code.TYPE_MISMATCH, f"{name} is a {sym.kind.value} symbol, used as {kind.value}", path
            )
        if len(sym.params) != nargs:
            raise TypeCheckError(
                Code.ARITY_MISMATCH, f"{name} expects {len(sym.params)} argument(s), got {nargs}", path
            )
        return sym

    def pred(self, node, env, path) -> None:
        if isinstance(node, pt.PredApply):
            sym = self._sym(node.fn, pt.FuncKind.PREDICATE, len(node.args), path)
            for i, (a, want) in enumerate(zip(node.args, sym.params)):
                self.unify(want, self.expr(a, env, path), path, f"argument {i} of {node.fn}")
        elif isinstance(node, (pt.Top, pt.Bottom)):
            pass
        elif isinstance(node, pt.Not):
            self.pred(node.pred, env, path)
        elif isinstance(node, (pt.And, pt.Or)):
            self.pred(node.left, env, path)
            self.pred(node.right, env, path)
        elif isinstance(node, (pt.Eq, pt.Neq)):
            self.unify(self.expr(node.left, env, path), self.expr(node.right, env, path), path, "comparison")
        elif isinstance(node, (pt.IsNull, pt.IsNotNull)):
            self.expr(node.expr, env, path)
        elif isinstance(node, pt.Exists):
            self.plan(node.plan, env, tuple(path) + ("Exists",))
        else:
            raise TypeCheckError(Code.TYPE_MISMATCH, "expected a predicate", path)

    def expr(self, node, env, path) -> TypeRef:
        t = self._expr(node, env, path)
        self.typing.expr_types[id(node)] = t
        return t

    def _expr(self, node, env, path) -> TypeRef:
        if isinstance(node, pt.Var):
            if node.name not in env:
                raise TypeCheckError(Code.UNBOUND_VARIABLE, f"unbound variable {node.name}", path)
            return env[node.name]
        if isinstance(node, pt.Const):
            return self.fresh()
        if isinstance(node, pt.Apply):
            sym = self._sym(node.fn, pt.FuncKind.SCALAR, len(node.args), path)
            for i, (a, want) in enumerate(zip(node.args, sym.params)):
                self.unify(want, self.expr(a, env, path), path, f"argument {i} of {node.fn}")
            return sym.result
        if isinstance(node, pt.Proj):
            t = self.walk(self.expr(node.expr, env, path))
            if not isinstance(t, TProduct) or node.index >= len(t.items):
                raise TypeCheckError(
                    Code.TYPE_MISMATCH, f"component {node.index} of non-product {self.zonk(t)}", path
                )
            return t.items[node.index]
        if isinstance(node, pt.TupleExpr):
            return TProduct(tuple(self.expr(i, env, path) for i in node.items))
        raise TypeCheckError(Code.TYPE_MISMATCH, "expected a scalar expression", path)

    # finishing ---------------------------------------------------------

    def finish(self) -> Typing:
        out = Typing()
        for table_in, table_out in (
            (self.typing.plan_types, out.plan_types),
            (self.typing.expr_types, out.expr_types),
        ):
            for k, t in table_in.items():
                table_out[k] = self._closed(t)
        for k, ts in self.typing.binder_types.items():
            out.binder_types[k] = tuple(self._closed(t) for t in ts)
        return out

    def _closed(self, t) -> TypeRef:
        z = self.zonk(t)
        if _has_var(z):
            raise TypeCheckError(Code.TYPE_MISMATCH, f"ambiguous type {z} (cannot infer)", ())
        return z


def _is_expr(node) -> bool:
    return isinstance(node, (pt.Var, pt.Const, pt.Apply, pt.Proj, pt.TupleExpr))


def _has_var(t) -> bool:
    if isinstance(t, TVar):
        return True
    if isinstance(t, TProduct):
        return any(_has_var(i) for i in t.items)
    if isinstance(t, TBag):
        return _has_var(t.item)
    return False


def substitute_names(t: TypeRef, mapping) -> TypeRef:
    if isinstance(t, TName):
        return mapping.get(t.name, t)
    if isinstance(t, TProduct):
        return TProduct(tuple(substitute_names(i, mapping) for i in t.items))
    if isinstance(t, TBag):
        return TBag(substitute_names(t.item, mapping))
    return t


def typecheck_rule(rule: pt.Rule, registry=None) -> Union[TypedRule, List[Diagnostic]]:
    """Annotate every pattern node of ``rule`` with its type.

    Returns a :class:`TypedRule`, or the diagnostics explaining why the rule
    is ill-typed.
    """
    diags = pt.validate_decls(rule.decls(), ("decls",))
    if diags:
        return diags
    inf = Inference(rule.decls(), registry)
    try:
        src = inf.plan(rule.source, {}, ("from",))
        dst = inf.plan(rule.target, {}, ("to",))
        inf.unify(src, dst, ("to",), "rule output")
        typing = inf.finish()
    except TypeCheckError as e:
        if e.code is Code.TYPE_MISMATCH and e.path == ("to",) and "rule output" in e.message:
            return [Diagnostic(Code.OUTPUT_TYPE_MISMATCH, "output type mismatch: " + e.message, path=e.path)]
        return [e.diagnostic()]
    return TypedRule(rule, typing, inf.zonk(src), inf.zonk(dst))


def output_types(rule: pt.Rule, registry=None) -> Tuple[TypeRef, TypeRef]:
    """Row types of ``from`` and ``to``, each inferred independently."""
    types = []
    for side, pattern in (("from", rule.source), ("to", rule.target)):
        inf = Inference(rule.decls(), registry)
        types.append(inf.zonk(inf.plan(pattern, {}, (side,))))
    return types[0], types[1]


def typecheck_plan(pattern, decls: pt.Decls, registry=None) -> Tuple[TypeRef, Typing]:
    """Infer the row type of a standalone pattern; raises TypeCheckError."""
    inf = Inference(decls, registry)
    t = inf.plan(pattern, {}, ())
    return inf.zonk(t), inf.finish()
