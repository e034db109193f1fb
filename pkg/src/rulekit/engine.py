"""Match/transform interpreter for rules over concrete logical plans.

Matching walks ``from`` top-down alongside the plan.  At each operator it
matches the children first, then resolves the operator's lambdas against the
concrete expressions.  Each pattern binder is represented by a vector of
concrete expressions (one per column of its abstract type), and the columns
assigned to an abstract type are recorded in the context's ``types`` map.
Function bindings store their bodies against formal :class:`Param` slots, so
a binding can only mention columns covered by its parameters.

Transformation walks ``to`` bottom-up and splices the bound subplans and
substituted function bodies back together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from . import pattern as pt
from . import plan as ir
from .pattern import FuncKind, TBool, TName, TProduct, TypeRef
from .plan import Col, ValueType


class UnsupportedPattern(Exception):
    """The pattern needs a capability the interpreter does not have."""


class MissingBinding(Exception):
    pass


class ConstraintGuardMissing(Exception):
    pass


class _NoMatch(Exception):
    def __init__(self, path, reason):
        super().__init__(reason)
        self.path = tuple(path)
        self.reason = reason


@dataclass(frozen=True)
class Param:
    """Formal slot ``index`` of parameter ``pos`` inside a function binding body."""

    pos: int
    index: int


@dataclass(frozen=True)
class Slot:
    name: str
    type: ValueType


@dataclass(frozen=True)
class FunctionBinding:
    kind: FuncKind
    params: Tuple[int, ...]  # width of each formal parameter
    body: tuple  # expressions, a single predicate, or AggCalls
    names: Tuple[str, ...] = field(default=(), compare=False)


@dataclass
class MatchContext:
    plans: Dict[str, ir.LogicalPlan] = field(default_factory=dict)
    funcs: Dict[str, FunctionBinding] = field(default_factory=dict)
    types: Dict[str, Tuple[Slot, ...]] = field(default_factory=dict)

    def copy(self) -> "MatchContext":
        return MatchContext(dict(self.plans), dict(self.funcs), dict(self.types))


@dataclass(frozen=True)
class Matched:
    ctx: MatchContext


@dataclass(frozen=True)
class NoMatch:
    path: Tuple[str, ...]
    reason: str


MatchOutcome = Union[Matched, NoMatch]


# ---------------------------------------------------------------------------
# Expression helpers

# ``owner`` describes the expression context: None for a single-input
# operator, or the left arity for a join-like (two-row) context.
Owner = Optional[int]


def to_outer(expr, owner: Owner):
    """Re-address an owner-context expression from inside a correlated subplan."""
    if isinstance(expr, Col):
        if owner is None:
            if expr.side != "only":
                raise UnsupportedPattern("reference to an enclosing row two levels out")
            return Col(expr.index, "left")
        if expr.side == "left":
            return Col(expr.index, "left")
        if expr.side == "right":
            return Col(owner + expr.index, "left")
        raise UnsupportedPattern("unexpected column side in a join context")
    if isinstance(expr, ir.Lit):
        return expr
    if isinstance(expr, ir.Call):
        return ir.Call(expr.fn, tuple(to_outer(a, owner) for a in expr.args))
    raise UnsupportedPattern("subquery inside a correlated reference")


class _Leftover(Exception):
    pass


def abstract(expr, vecs: Sequence[Sequence], owner: Owner = None):
    """Rewrite ``expr`` over formal slots; raises ``_Leftover`` on stray columns."""
    table = {}
    for pos, vec in enumerate(vecs):
        for i, e in enumerate(vec):
            table.setdefault(e, Param(pos, i))
    return _abs(expr, table, owner, 0, True)


def _abs(e, table, owner, depth, strict_here):
    hit = table.get(e)
    if hit is not None:
        return hit
    if isinstance(e, Col):
        strict = (depth == 0) or (depth == 1 and e.side == "left")
        if strict and strict_here:
            raise _Leftover(e)
        return e
    if isinstance(e, ir.Lit):
        return e
    if isinstance(e, ir.Call):
        return ir.Call(e.fn, tuple(_abs(a, table, owner, depth, strict_here) for a in e.args))
    if isinstance(e, ir.ExistsSub):
        inner = {}
        if depth == 0:
            for k, v in table.items():
                try:
                    inner.setdefault(to_outer(k, owner), v)
                except UnsupportedPattern:
                    pass
        return ir.ExistsSub(_abs_plan(e.plan, inner, depth + 1))
    raise UnsupportedPattern(f"cannot abstract {e!r}")


def _abs_plan(p, table, depth):
    def ex(e, single):
        if single:
            return _abs(e, table, None, depth, True)
        return _abs(e, {}, None, depth + 1, False)

    if isinstance(p, ir.Filter):
        return ir.Filter(ex(p.pred, True), _abs_plan(p.input, table, depth))
    if isinstance(p, ir.Project):
        return ir.Project(tuple((ex(e, True), n) for e, n in p.exprs), _abs_plan(p.input, table, depth))
    if isinstance(p, ir.Aggregate):
        return ir.Aggregate(
            tuple(ex(k, True) for k in p.keys),
            tuple(ir.AggCall(a.fn, None if a.arg is None else ex(a.arg, True)) for a in p.aggs),
            _abs_plan(p.input, table, depth),
        )
    if isinstance(p, ir.Join):
        return ir.Join(ex(p.pred, False), _abs_plan(p.left, table, depth), _abs_plan(p.right, table, depth))
    if isinstance(p, ir.Custom):
        return ir.Custom(p.op, tuple(_abs_plan(a, table, depth) if ir.is_plan(a) else a for a in p.args))
    return ir.with_children(p, [_abs_plan(c, table, depth) for c in ir.children(p)])


def instantiate(body, vecs: Sequence[Sequence], owner: Owner = None):
    """Substitute concrete expressions for the formal slots of ``body``."""
    return _inst(body, vecs, owner, 0)


def _inst(e, vecs, owner, depth):
    if isinstance(e, Param):
        try:
            v = vecs[e.pos][e.index]
        except IndexError:
            raise MissingBinding(f"slot {e.pos}.{e.index} has no argument") from None
        if depth == 0:
            return v
        if depth == 1:
            return to_outer(v, owner)
        raise UnsupportedPattern("formal slot nested two subqueries deep")
    if isinstance(e, ir.Call):
        return ir.Call(e.fn, tuple(_inst(a, vecs, owner, depth) for a in e.args))
    if isinstance(e, ir.AggCall):
        return ir.AggCall(e.fn, None if e.arg is None else _inst(e.arg, vecs, owner, depth))
    if isinstance(e, ir.ExistsSub):
        return ir.ExistsSub(_inst_plan(e.plan, vecs, owner, depth + 1))
    return e


def _inst_plan(p, vecs, owner, depth):
    f = lambda e: _inst(e, vecs, owner, depth)
    if isinstance(p, ir.Filter):
        return ir.Filter(f(p.pred), _inst_plan(p.input, vecs, owner, depth))
    if isinstance(p, ir.Project):
        return ir.Project(tuple((f(e), n) for e, n in p.exprs), _inst_plan(p.input, vecs, owner, depth))
    if isinstance(p, ir.Aggregate):
        return ir.Aggregate(
            tuple(f(k) for k in p.keys),
            tuple(f(a) for a in p.aggs),
            _inst_plan(p.input, vecs, owner, depth),
        )
    if isinstance(p, ir.Join):
        return ir.Join(f(p.pred), _inst_plan(p.left, vecs, owner, depth), _inst_plan(p.right, vecs, owner, depth))
    return ir.with_children(p, [_inst_plan(c, vecs, owner, depth) for c in ir.children(p)])


def _is_true(e) -> bool:
    return isinstance(e, ir.Lit) and e.type is ValueType.BOOL and e.value is True


def _and(a, b):
    if _is_true(a):
        return b
    if _is_true(b):
        return a
    return ir.Call("and", (a, b))


# ---------------------------------------------------------------------------
# The per-rule session


@dataclass
class _Frame:
    """Concrete context of a lambda body: column scope and owner kind."""

    scope: Dict[str, ir.Schema]
    owner: Owner

    def sub(self) -> "_Frame":
        if self.owner is None:
            outer = self.scope["only"]
        else:
            outer = ir.concat_schemas(self.scope["left"], self.scope["right"])
        return _Frame({"left": outer}, None)


class _Session:
    def __init__(self, typing, decls: pt.Decls, registry, ctx: Optional[MatchContext] = None):
        self.typing = typing
        self.decls = decls
        self.registry = registry
        self.ctx = ctx or MatchContext()

    # types ---------------------------------------------------------------

    def width(self, t: TypeRef) -> int:
        if isinstance(t, TName):
            if t.name not in self.ctx.types:
                raise _NoMatch((), f"type {t.name} is not instantiated")
            return len(self.ctx.types[t.name])
        if isinstance(t, TProduct):
            return sum(self.width(i) for i in t.items)
        if isinstance(t, TBool):
            return 1
        raise UnsupportedPattern(f"no width for {t}")

    def slots(self, t: TypeRef) -> Tuple[Slot, ...]:
        if isinstance(t, TName):
            if t.name not in self.ctx.types:
                raise MissingBinding(f"type {t.name} is not instantiated")
            return self.ctx.types[t.name]
        if isinstance(t, TProduct):
            out: Tuple[Slot, ...] = ()
            for i in t.items:
                out += self.slots(i)
            return out
        return (Slot("b", ValueType.BOOL),)

    def _known(self, t) -> bool:
        try:
            self.width(t)
            return True
        except _NoMatch:
            return False

    def bind_type(self, t: TypeRef, slots: Sequence[Slot], path) -> None:
        slots = tuple(slots)
        if isinstance(t, TName):
            have = self.ctx.types.get(t.name)
            if have is None:
                self.ctx.types[t.name] = slots
            elif tuple(s.type for s in have) != tuple(s.type for s in slots):
                raise _NoMatch(path, f"type {t.name} is instantiated inconsistently")
            return
        if isinstance(t, TProduct):
            parts = self.split(t, slots, path)
            for item, part in zip(t.items, parts):
                self.bind_type(item, part, path)
            return
        if isinstance(t, TBool):
            if len(slots) != 1 or slots[0].type is not ValueType.BOOL:
                raise _NoMatch(path, "expected a Bool column")
            return
        raise UnsupportedPattern(f"cannot instantiate {t}")

    def split(self, t: TProduct, seq: Sequence, path) -> List[Sequence]:
        """Split ``seq`` by the columns of the components of ``t``."""
        widths = [self.width(i) if self._known(i) else None for i in t.items]
        unknown = [i for i, w in enumerate(widths) if w is None]
        if len(unknown) > 1:
            raise _NoMatch(path, f"cannot split columns among {t}")
        if unknown:
            rest = len(seq) - sum(w for w in widths if w is not None)
            if rest < 1:
                raise _NoMatch(path, f"too few columns for {t}")
            widths[unknown[0]] = rest
        if sum(widths) != len(seq):
            raise _NoMatch(path, f"expected {sum(widths)} columns for {t}, found {len(seq)}")
        out, i = [], 0
        for w in widths:
            out.append(seq[i : i + w])
            i += w
        return out

    # expression evaluation ------------------------------------------------

    def eval(self, e, env: Mapping[str, list], path=()) -> list:
        """The concrete column vector denoted by pattern expression ``e``."""
        if isinstance(e, pt.Var):
            if e.name not in env:
                raise UnsupportedPattern(f"binder {e.name} is not available here")
            return list(env[e.name])
        if isinstance(e, pt.Proj):
            vec = self.eval(e.expr, env, path)
            t = self.typing.expr(e.expr)
            return list(self.split(t, vec, path)[e.index])
        if isinstance(e, pt.TupleExpr):
            out: list = []
            for item in e.items:
                out.extend(self.eval(item, env, path))
            return out
        if isinstance(e, pt.Apply):
            b = self.ctx.funcs.get(e.fn)
            if b is None:
                raise _NoMatch(path, f"function {e.fn} is applied before it is bound")
            args = [self.eval(a, env, path) for a in e.args]
            return [instantiate(x, args) for x in b.body]
        if isinstance(e, pt.Const):
            (slot,) = self.slots(self.typing.expr(e)) or (None,)
            return [ir.Lit(slot.type, None)]
        raise UnsupportedPattern(f"not an expression pattern: {e!r}")

    def arg_vecs(self, app, env, path) -> List[list]:
        sym = self.decls.funcs[app.fn]
        vecs = []
        for a, t in zip(app.args, sym.params):
            v = self.eval(a, env, path)
            if len(v) != self.width(t):
                raise _NoMatch(path, f"argument of {app.fn} has the wrong width")
            vecs.append(v)
        return vecs

    def bind_func(self, name, binding: FunctionBinding, path) -> None:
        have = self.ctx.funcs.get(name)
        if have is not None and have != binding:
            raise _NoMatch(path, f"{name} is bound inconsistently")
        if have is None:
            self.ctx.funcs[name] = binding

    # binder vectors ---------------------------------------------------------

    def bind_lambda(self, lam: pt.Lambda, vectors: List[list], env, path) -> dict:
        types = self.typing.binders(lam)
        inner = dict(env)
        for b, t, vec in zip(lam.binders, types, vectors):
            if self.width(t) != len(vec):
                raise _NoMatch(path, f"binder {b} expects {self.width(t)} columns, found {len(vec)}")
            inner[b] = vec
        return inner

    @staticmethod
    def row(n: int, side: str) -> list:
        return [Col(i, side) for i in range(n)]

    # matching: plans ----------------------------------------------------------

    def match(self, pat, node, env, path) -> None:
        here = tuple(path) + (pt.op_name(pat),)
        if isinstance(pat, pt.Sym):
            sym = self.decls.plans[pat.name]
            if env and ir.outer_refs(node):
                raise _NoMatch(here, "correlated subplans cannot bind a plan symbol")
            bound = self.ctx.plans.get(pat.name)
            if bound is not None and bound != node:
                raise _NoMatch(here, f"{pat.name} is bound to a different plan")
            schema = self.schema(node, env)
            self.bind_type(sym.row_type, _slots_of(schema), here)
            self.ctx.plans[pat.name] = node
            return
        if isinstance(pat, pt.Empty):
            if not isinstance(node, ir.Empty):
                raise _NoMatch(here, "expected an empty relation")
            self.bind_type(pat.type, _slots_of(node.schema), here)
            return
        if isinstance(pat, pt.Custom):
            if not isinstance(node, ir.Custom) or node.op != pat.name:
                raise _NoMatch(here, f"expected a {pat.name} node")
            self.match_custom(pat, node, env, here)
            return
        want = {
            pt.Filter: ir.Filter, pt.Project: ir.Project, pt.Join: ir.Join,
            pt.Union_: ir.Union_, pt.Distinct: ir.Distinct, pt.Aggregate: ir.Aggregate,
        }[type(pat)]
        if not isinstance(node, want):
            raise _NoMatch(here, f"expected {pt.op_name(pat)}, found {ir.op_name(node)}")
        for i, (pc, nc) in enumerate(zip(pt.plan_children(pat), ir.children(node))):
            self.match(pc, nc, env, here + (f"#{i}",))
        outer = self.outer_schema(env)
        if isinstance(pat, pt.Filter):
            s = self.schema(node.input, env)
            frame = _Frame(_scope(only=s, left=outer), None)
            inner = self.bind_lambda(pat.pred, [self.row(len(s), "only")], env, here)
            self.match_pred(pat.pred.body, node.pred, inner, frame, here + ("λ",))
        elif isinstance(pat, pt.Join):
            ls, rs = self.schema(node.left, env), self.schema(node.right, env)
            frame = _Frame({"left": ls, "right": rs}, len(ls))
            inner = self.bind_lambda(pat.pred, [self.row(len(ls), "left"), self.row(len(rs), "right")], {}, here)
            self.match_pred(pat.pred.body, node.pred, inner, frame, here + ("λ",))
        elif isinstance(pat, pt.Project):
            s = self.schema(node.input, env)
            out = self.schema(node, env)
            inner = self.bind_lambda(pat.fn, [self.row(len(s), "only")], env, here)
            self.match_vec(pat.fn.body, [e for e, _ in node.exprs], _slots_of(out), inner, here + ("λ",))
        elif isinstance(pat, pt.Aggregate):
            s = self.schema(node.input, env)
            out = _slots_of(self.schema(node, env))
            nk = len(node.keys)
            inner = self.bind_lambda(pat.key, [self.row(len(s), "only")], env, here)
            self.match_vec(pat.key.body, list(node.keys), out[:nk], inner, here + ("key",))
            inner = self.bind_lambda(pat.agg, [self.row(len(s), "only")], env, here)
            self.match_agg(pat.agg.body, node.aggs, out[nk:], inner, here + ("agg",))

    def match_custom(self, pat: pt.Custom, node: ir.Custom, env, here) -> None:
        d = self.registry.lookup(pat.name)
        if len(node.args) != len(d.params):
            raise _NoMatch(here, f"{pat.name} node has the wrong number of arguments")
        order = sorted(range(len(d.params)), key=lambda i: not d.params[i].is_plan)
        for i in order:
            param, parg, narg = d.params[i], pat.args[i], node.args[i]
            where = here + (f"#{i}",)
            if param.is_plan:
                if not ir.is_plan(narg):
                    raise _NoMatch(where, "expected a plan argument")
                self.match(parg, narg, env, where)
                continue
            vectors, frame = self.custom_rows(parg, {}, where)
            inner = self.bind_lambda(parg, vectors, {}, where)
            if param.kind == "predicate":
                if ir.is_plan(narg) or isinstance(narg, tuple):
                    raise _NoMatch(where, "expected a predicate argument")
                self.match_pred(parg.body, narg, inner, frame, where + ("λ",))
            elif param.kind == "scalar":
                if not isinstance(narg, tuple) or any(isinstance(x, ir.AggCall) for x in narg):
                    raise _NoMatch(where, "expected scalar expressions")
                slots = tuple(Slot(f"c{j}", ir.expr_type(x, frame.scope, self.registry)) for j, x in enumerate(narg))
                self.match_vec(parg.body, list(narg), slots, inner, where + ("λ",))
            else:
                if not isinstance(narg, tuple) or not all(isinstance(x, ir.AggCall) for x in narg):
                    raise _NoMatch(where, "expected aggregate calls")
                slots = tuple(Slot(f"a{j}", ir.agg_type(x, frame.scope, self.registry)) for j, x in enumerate(narg))
                self.match_agg(parg.body, narg, slots, inner, where + ("λ",))

    def custom_rows(self, lam: pt.Lambda, env, path):
        widths = [self.width(t) for t in self.typing.binders(lam)]
        if len(widths) == 1:
            slots = self.slots(self.typing.binders(lam)[0])
            return [self.row(widths[0], "only")], _Frame({"only": _schema_of(slots)}, None)
        if len(widths) == 2:
            ls = _schema_of(self.slots(self.typing.binders(lam)[0]))
            rs = _schema_of(self.slots(self.typing.binders(lam)[1]))
            return [self.row(widths[0], "left"), self.row(widths[1], "right")], _Frame(
                {"left": ls, "right": rs}, widths[0]
            )
        raise UnsupportedPattern("custom operator lambdas take one or two binders")

    def outer_schema(self, env) -> Optional[ir.Schema]:
        return getattr(self, "_outer", None) if env else None

    def schema(self, node, env) -> ir.Schema:
        try:
            return ir.output_schema(node, self.registry, self.outer_schema(env))
        except ir.SchemaError as e:
            raise _NoMatch((), f"ill-formed plan: {e}") from None

    # matching: expressions ---------------------------------------------------

    def match_vec(self, pat, concrete: list, slots: Sequence[Slot], env, path) -> None:
        if isinstance(pat, pt.Apply) and pat.fn not in self.ctx.funcs:
            sym = self.decls.funcs[pat.fn]
            vecs = self.arg_vecs(pat, env, path)
            try:
                body = tuple(abstract(c, vecs) for c in concrete)
            except _Leftover:
                raise _NoMatch(path, f"{pat.fn} depends on columns outside its arguments") from None
            self.bind_type(sym.result, slots, path)
            if self.width(sym.result) != len(concrete):
                raise _NoMatch(path, f"{pat.fn} yields the wrong number of columns")
            names = tuple(_display(a, i) for i, a in enumerate(pat.args))
            self.bind_func(pat.fn, FunctionBinding(FuncKind.SCALAR, tuple(len(v) for v in vecs), body, names), path)
            return
        if isinstance(pat, pt.TupleExpr):
            t = TProduct(tuple(self.typing.expr(i) for i in pat.items))
            for item, part, sl in zip(pat.items, self.split(t, concrete, path), self.split(t, slots, path)):
                self.match_vec(item, list(part), sl, env, path)
            return
        if isinstance(pat, pt.Const):
            if len(concrete) != 1 or not (isinstance(concrete[0], ir.Lit) and concrete[0].value is None):
                raise _NoMatch(path, "expected a null literal")
            self.bind_type(self.typing.expr(pat), slots, path)
            return
        got = self.eval(pat, env, path)
        if got != list(concrete):
            raise _NoMatch(path, "expression does not match")

    def match_agg(self, pat, aggs, slots, env, path) -> None:
        if not isinstance(pat, pt.AggApply):
            raise UnsupportedPattern("aggregate lambdas must apply an aggregate symbol")
        sym = self.decls.funcs[pat.fn]
        (arg,) = pat.args
        vec = self.eval(arg, env, path)
        try:
            body = tuple(ir.AggCall(a.fn, None if a.arg is None else abstract(a.arg, [vec])) for a in aggs)
        except _Leftover:
            raise _NoMatch(path, f"{pat.fn} depends on columns outside its group") from None
        if pat.fn in self.ctx.funcs:
            if self.ctx.funcs[pat.fn].body != body:
                raise _NoMatch(path, f"{pat.fn} is bound inconsistently")
            return
        self.bind_type(sym.result, slots, path)
        self.bind_func(pat.fn, FunctionBinding(FuncKind.AGGREGATE, (len(vec),), body, (_display(arg, 0),)), path)

    def match_pred(self, pat, concrete, env, frame: _Frame, path) -> None:
        slots = _flatten_and(pat)
        if len(slots) > 1:
            self.partition(slots, concrete, env, frame, path)
            return
        if isinstance(pat, pt.PredApply) and pat.fn not in self.ctx.funcs:
            self.bind_pred(pat, [concrete], env, frame, path, whole=concrete)
            return
        self.match_structural(pat, concrete, env, frame, path)

    def bind_pred(self, app: pt.PredApply, parts, env, frame, path, whole=None) -> None:
        vecs = self.arg_vecs(app, env, path)
        try:
            bodies = [abstract(c, vecs, frame.owner) for c in parts]
        except _Leftover:
            raise _NoMatch(path, f"{app.fn} depends on columns outside its arguments") from None
        if whole is not None:
            body = abstract(whole, vecs, frame.owner)
        else:
            body = ir.conjoin(bodies)
        names = tuple(_display(a, i) for i, a in enumerate(app.args))
        self.bind_func(app.fn, FunctionBinding(FuncKind.PREDICATE, tuple(len(v) for v in vecs), (body,), names), path)

    def admits(self, app: pt.PredApply, c, env, frame, path) -> bool:
        try:
            vecs = self.arg_vecs(app, env, path)
            abstract(c, vecs, frame.owner)
            return True
        except (_Leftover, _NoMatch, UnsupportedPattern):
            return False

    def partition(self, slots, concrete, env, frame, path) -> None:
        """Greedy left-to-right assignment of concrete conjuncts to pattern conjuncts.

        A conjunct goes to the first admitting slot that is still empty, or
        else to the first admitting symbol slot.
        """
        conjuncts = ir.split_conjuncts(concrete)
        symbol = [isinstance(s, pt.PredApply) and s.fn not in self.ctx.funcs for s in slots]
        seen = set()
        for i, s in enumerate(slots):
            if symbol[i]:
                if s.fn in seen:
                    symbol[i] = False
                seen.add(s.fn)
        taken: List[list] = [[] for _ in slots]
        for c in conjuncts:
            fallback = None
            for i, s in enumerate(slots):
                if symbol[i]:
                    if self.admits(s, c, env, frame, path):
                        if not taken[i]:
                            taken[i].append(c)
                            break
                        if fallback is None:
                            fallback = i
                elif not taken[i]:
                    trial = self.ctx.copy()
                    try:
                        self.match_structural(s, c, env, frame, path)
                    except _NoMatch:
                        self.ctx = trial
                        continue
                    taken[i].append(c)
                    break
            else:
                if fallback is None:
                    raise _NoMatch(path, "a conjunct fits none of the pattern predicates")
                taken[fallback].append(c)
        absorbed = any(taken[i] for i in range(len(slots)) if symbol[i])
        for i, s in enumerate(slots):
            if taken[i]:
                if symbol[i]:
                    self.bind_pred(s, taken[i], env, frame, path)
                continue
            if symbol[i] and absorbed:
                vecs = self.arg_vecs(s, env, path)
                names = tuple(_display(a, j) for j, a in enumerate(s.args))
                self.bind_func(
                    s.fn, FunctionBinding(FuncKind.PREDICATE, tuple(len(v) for v in vecs), (ir.TRUE,), names), path
                )
                continue
            raise _NoMatch(path, "a pattern predicate has no matching conjunct")

    def match_structural(self, pat, c, env, frame: _Frame, path) -> None:
        def expect(fn, n):
            if not (isinstance(c, ir.Call) and c.fn == fn and len(c.args) == n):
                raise _NoMatch(path, f"expected {fn}")
            return c.args

        if isinstance(pat, pt.PredApply):
            b = self.ctx.funcs[pat.fn]
            got = instantiate(b.body[0], self.arg_vecs(pat, env, path), frame.owner)
            if got != c:
                raise _NoMatch(path, f"predicate does not match the binding of {pat.fn}")
        elif isinstance(pat, pt.Top):
            if not _is_true(c):
                raise _NoMatch(path, "expected TRUE")
        elif isinstance(pat, pt.Bottom):
            if not (isinstance(c, ir.Lit) and c.value is False):
                raise _NoMatch(path, "expected FALSE")
        elif isinstance(pat, pt.Not):
            (a,) = expect("not", 1)
            self.match_pred(pat.pred, a, env, frame, path)
        elif isinstance(pat, pt.And):
            a, b = expect("and", 2)
            self.match_pred(pat.left, a, env, frame, path)
            self.match_pred(pat.right, b, env, frame, path)
        elif isinstance(pat, pt.Or):
            a, b = expect("or", 2)
            self.match_pred(pat.left, a, env, frame, path)
            self.match_pred(pat.right, b, env, frame, path)
        elif isinstance(pat, (pt.Eq, pt.Neq)):
            a, b = expect("eq" if isinstance(pat, pt.Eq) else "neq", 2)
            self.match_scalar(pat.left, a, env, frame, path)
            self.match_scalar(pat.right, b, env, frame, path)
        elif isinstance(pat, (pt.IsNull, pt.IsNotNull)):
            (a,) = expect("isNull" if isinstance(pat, pt.IsNull) else "isNotNull", 1)
            self.match_scalar(pat.expr, a, env, frame, path)
        elif isinstance(pat, pt.Exists):
            if not isinstance(c, ir.ExistsSub):
                raise _NoMatch(path, "expected a subquery")
            sub = frame.sub()
            inner_env = {}
            for k, v in env.items():
                try:
                    inner_env[k] = [to_outer(x, frame.owner) for x in v]
                except UnsupportedPattern:
                    pass
            saved = getattr(self, "_outer", None)
            self._outer = sub.scope["left"]
            try:
                self.match(pat.plan, c.plan, inner_env or {"": []}, tuple(path) + ("Exists",))
            finally:
                self._outer = saved
        else:
            raise UnsupportedPattern(f"cannot match predicate pattern {pat!r}")

    def match_scalar(self, pat, c, env, frame, path) -> None:
        if isinstance(pat, pt.Apply) and pat.fn not in self.ctx.funcs:
            sym = self.decls.funcs[pat.fn]
            vecs = self.arg_vecs(pat, env, path)
            try:
                body = (abstract(c, vecs, frame.owner),)
            except _Leftover:
                raise _NoMatch(path, f"{pat.fn} depends on columns outside its arguments") from None
            slot = Slot(pat.fn.lower(), ir.expr_type(c, frame.scope, self.registry))
            self.bind_type(sym.result, (slot,), path)
            names = tuple(_display(a, i) for i, a in enumerate(pat.args))
            self.bind_func(pat.fn, FunctionBinding(FuncKind.SCALAR, tuple(len(v) for v in vecs), body, names), path)
            return
        if isinstance(pat, pt.Const):
            if not (isinstance(c, ir.Lit) and c.value is None):
                raise _NoMatch(path, "expected a null literal")
            return
        got = self.eval(pat, env, path)
        if got != [c]:
            raise _NoMatch(path, "expression does not match")

    # transform ---------------------------------------------------------------

    def build(self, pat, env, outer: Optional[ir.Schema] = None) -> ir.LogicalPlan:
        if isinstance(pat, pt.Sym):
            if pat.name not in self.ctx.plans:
                raise MissingBinding(f"plan symbol {pat.name} is not bound")
            return self.ctx.plans[pat.name]
        if isinstance(pat, pt.Empty):
            return ir.Empty(_schema_of(self.slots(pat.type)))
        if isinstance(pat, pt.Distinct):
            return ir.Distinct(self.build(pat.input, env, outer))
        if isinstance(pat, pt.Union_):
            return ir.Union_(self.build(pat.left, env, outer), self.build(pat.right, env, outer))
        if isinstance(pat, pt.Filter):
            child = self.build(pat.input, env, outer)
            s = ir.output_schema(child, self.registry, outer)
            frame = _Frame(_scope(only=s, left=outer), None)
            inner = self._bind_build(pat.pred, [self.row(len(s), "only")], env)
            return ir.Filter(self.build_pred(pat.pred.body, inner, frame), child)
        if isinstance(pat, pt.Join):
            left = self.build(pat.left, env, outer)
            right = self.build(pat.right, env, outer)
            ls = ir.output_schema(left, self.registry, outer)
            rs = ir.output_schema(right, self.registry, outer)
            frame = _Frame({"left": ls, "right": rs}, len(ls))
            inner = self._bind_build(pat.pred, [self.row(len(ls), "left"), self.row(len(rs), "right")], {})
            return ir.Join(self.build_pred(pat.pred.body, inner, frame), left, right)
        if isinstance(pat, pt.Project):
            child = self.build(pat.input, env, outer)
            s = ir.output_schema(child, self.registry, outer)
            inner = self._bind_build(pat.fn, [self.row(len(s), "only")], env)
            exprs = self.eval(pat.fn.body, inner)
            names = ir.dedupe(sl.name for sl in self.slots(self.typing.expr(pat.fn.body)))
            return ir.Project(tuple(zip(exprs, names)), child)
        if isinstance(pat, pt.Aggregate):
            child = self.build(pat.input, env, outer)
            s = ir.output_schema(child, self.registry, outer)
            inner = self._bind_build(pat.key, [self.row(len(s), "only")], env)
            keys = self.eval(pat.key.body, inner)
            inner = self._bind_build(pat.agg, [self.row(len(s), "only")], env)
            return ir.Aggregate(tuple(keys), self.build_agg(pat.agg.body, inner), child)
        if isinstance(pat, pt.Custom):
            d = self.registry.lookup(pat.name)
            args = []
            for param, parg in zip(d.params, pat.args):
                if param.is_plan:
                    args.append(self.build(parg, env, outer))
                    continue
                vectors, frame = self.custom_rows(parg, {}, ())
                inner = self._bind_build(parg, vectors, {})
                if param.kind == "predicate":
                    args.append(self.build_pred(parg.body, inner, frame))
                elif param.kind == "scalar":
                    args.append(tuple(self.eval(parg.body, inner)))
                else:
                    args.append(self.build_agg(parg.body, inner))
            return ir.Custom(pat.name, tuple(args))
        raise UnsupportedPattern(f"cannot build {pat!r}")

    def _bind_build(self, lam, vectors, env):
        try:
            return self.bind_lambda(lam, vectors, env, ())
        except _NoMatch as e:
            raise MissingBinding(e.reason) from None

    def build_agg(self, body, env) -> Tuple[ir.AggCall, ...]:
        b = self.ctx.funcs.get(body.fn)
        if b is None:
            raise MissingBinding(f"aggregate {body.fn} is not bound")
        vec = self.eval(body.args[0], env)
        return tuple(instantiate(a, [vec]) for a in b.body)

    def build_pred(self, pat, env, frame: _Frame):
        if isinstance(pat, pt.PredApply):
            b = self.ctx.funcs.get(pat.fn)
            if b is None:
                raise MissingBinding(f"predicate {pat.fn} is not bound")
            vecs = [self.eval(a, env) for a in pat.args]
            return instantiate(b.body[0], vecs, frame.owner)
        if isinstance(pat, pt.Top):
            return ir.TRUE
        if isinstance(pat, pt.Bottom):
            return ir.Lit(ValueType.BOOL, False)
        if isinstance(pat, pt.Not):
            return ir.Call("not", (self.build_pred(pat.pred, env, frame),))
        if isinstance(pat, pt.And):
            return _and(self.build_pred(pat.left, env, frame), self.build_pred(pat.right, env, frame))
        if isinstance(pat, pt.Or):
            return ir.Call("or", (self.build_pred(pat.left, env, frame), self.build_pred(pat.right, env, frame)))
        if isinstance(pat, (pt.Eq, pt.Neq)):
            a, b = self.eval(pat.left, env), self.eval(pat.right, env)
            if len(a) != 1 or len(b) != 1:
                raise UnsupportedPattern("comparison of multi-column values")
            return ir.Call("eq" if isinstance(pat, pt.Eq) else "neq", (a[0], b[0]))
        if isinstance(pat, (pt.IsNull, pt.IsNotNull)):
            a = self.eval(pat.expr, env)
            if len(a) != 1:
                raise UnsupportedPattern("null test of a multi-column value")
            return ir.Call("isNull" if isinstance(pat, pt.IsNull) else "isNotNull", (a[0],))
        if isinstance(pat, pt.Exists):
            sub = frame.sub()
            inner = {}
            for k, v in env.items():
                try:
                    inner[k] = [to_outer(x, frame.owner) for x in v]
                except UnsupportedPattern:
                    pass
            return ir.ExistsSub(self.build(pat.plan, inner, sub.scope["left"]))
        raise UnsupportedPattern(f"cannot build predicate {pat!r}")


def _flatten_and(p) -> list:
    if isinstance(p, pt.And):
        return _flatten_and(p.left) + _flatten_and(p.right)
    return [p]


def _scope(**sides):
    return {k: v for k, v in sides.items() if v is not None}


def _slots_of(schema: ir.Schema) -> Tuple[Slot, ...]:
    return tuple(Slot(c.name, c.type) for c in schema.columns)


def _schema_of(slots: Sequence[Slot]) -> ir.Schema:
    names = ir.dedupe(s.name for s in slots)
    return ir.Schema(tuple(ir.Column(n, s.type) for n, s in zip(names, slots)))


def _display(arg, i) -> str:
    if isinstance(arg, pt.Var):
        parts = pt.binder_parts(arg.name)
        return "".join(parts) if parts else arg.name
    if isinstance(arg, pt.Proj) and isinstance(arg.expr, pt.Var):
        parts = pt.binder_parts(arg.expr.name)
        if parts:
            return parts[arg.index]
    return f"a{i}"


# ---------------------------------------------------------------------------
# Public API


def match_pattern(rule, plan: ir.LogicalPlan, registry=None) -> MatchOutcome:
    """Match the ``from`` pattern of a typed rule against ``plan``."""
    s = _Session(rule.typing, rule.rule.decls(), registry)
    try:
        s.match(rule.rule.source, plan, {}, ("from",))
    except _NoMatch as e:
        return NoMatch(e.path, e.reason)
    except UnsupportedPattern as e:
        return NoMatch(("from",), f"unsupported: {e}")
    return Matched(s.ctx)


def apply_transform(rule, ctx: MatchContext, registry=None) -> ir.LogicalPlan:
    """Instantiate the ``to`` pattern of a typed rule under ``ctx``."""
    s = _Session(rule.typing, rule.rule.decls(), registry, ctx)
    return s.build(rule.rule.target, {})


Guard = Callable[[str, FunctionBinding, MatchContext], bool]


def injective_guard(name: str, binding: FunctionBinding, ctx: MatchContext) -> bool:
    """Accept a scalar binding only if every input column is passed through unchanged."""
    if binding.kind is not FuncKind.SCALAR or len(binding.params) != 1:
        return False
    passed = {e.index for e in binding.body if isinstance(e, Param)}
    return passed == set(range(binding.params[0]))


BUILTIN_GUARDS: Dict[str, Guard] = {"injective": injective_guard}


def _check_guards(rule, ctx, guards) -> bool:
    for c in rule.rule.constraints:
        guard = (guards or {}).get(c.kind)
        if guard is None:
            raise ConstraintGuardMissing(f"rule {rule.name} needs a guard for constraint {c.kind}({c.subject})")
        if not guard(c.subject, ctx.funcs[c.subject], ctx):
            return False
    return True


@dataclass(frozen=True)
class Applied:
    plan: ir.LogicalPlan
    ctx: MatchContext


def apply_rule(rule, plan: ir.LogicalPlan, registry=None, guards=None) -> Union[Applied, NoMatch]:
    """Match and transform at the root of ``plan``."""
    if rule.rule.constraints:
        for c in rule.rule.constraints:
            if c.kind not in (guards or {}):
                raise ConstraintGuardMissing(f"rule {rule.name} needs a guard for constraint {c.kind}({c.subject})")
    out = match_pattern(rule, plan, registry)
    if isinstance(out, NoMatch):
        return out
    if not _check_guards(rule, out.ctx, guards):
        return NoMatch(("where",), "constraint guard rejected the binding")
    try:
        new = apply_transform(rule, out.ctx, registry)
        before = ir.output_schema(plan, registry).types
        after = ir.output_schema(new, registry).types
    except (UnsupportedPattern, ir.SchemaError) as e:
        return NoMatch(("to",), f"cannot build the rewritten plan: {e}")
    if before != after:
        return NoMatch(("to",), "rewritten plan changes the output column types")
    return Applied(new, out.ctx)


@dataclass(frozen=True)
class Firing:
    rule: str
    path: Tuple[int, ...]
    pass_index: int
    bindings: Dict[str, str] = field(default_factory=dict, compare=False, hash=False)


MAX_PASSES_MARKER = "<max-passes>"


def apply_rules_to_fixpoint(rules, plan, registry=None, max_passes: int = 10, guards=None):
    """Rewrite pre-order, first matching rule per node, until a pass changes nothing.

    Within a pass a node that fires is not descended into; its new subtree is
    visited by the following pass.

    Returns ``(plan, trace)``.  When ``max_passes`` is exhausted while the plan
    is still changing, a final trace entry named ``<max-passes>`` records it.
    """
    if max_passes < 1:
        raise ValueError("max_passes must be at least 1")
    trace: List[Firing] = []
    for p in range(max_passes):
        plan, changed = _one_pass(rules, plan, registry, guards, (), p, trace)
        if not changed:
            return plan, trace
    trace.append(Firing(MAX_PASSES_MARKER, (), max_passes))
    return plan, trace


def _one_pass(rules, node, registry, guards, path, p, trace):
    # A node rewritten in this pass is not descended into until the next
    # pass, so a rule whose output contains its own match cannot loop.
    for rule in rules:
        out = apply_rule(rule, node, registry, guards)
        if isinstance(out, Applied):
            trace.append(Firing(rule.name, path, p, render_bindings(rule, out.ctx)))
            return out.plan, True
    changed = False
    kids = list(ir.children(node))
    for i, k in enumerate(kids):
        kids[i], c = _one_pass(rules, k, registry, guards, path + (i,), p, trace)
        changed = changed or c
    if kids:
        node = ir.with_children(node, kids)
    return node, changed


# ---------------------------------------------------------------------------
# Custom operators and rendering


def lower_custom(node: ir.Custom, registry) -> ir.LogicalPlan:
    """Expand one concrete custom node through its definition's semantics."""
    d = registry.lookup(node.op)
    if d is None:
        raise ir.SchemaError(f"unregistered custom operator {node.op}")
    if len(node.args) != len(d.params):
        raise ir.SchemaError(f"{node.op} takes {len(d.params)} arguments")
    s = _Session(registry.typing(node.op), d.decls(), registry)
    for param, arg in zip(d.params, node.args):
        if param.is_plan:
            if not ir.is_plan(arg):
                raise ir.SchemaError(f"argument {param.name} of {node.op} must be a plan")
            try:
                s.bind_type(param.row_type, _slots_of(ir.output_schema(arg, registry)), ())
            except _NoMatch as e:
                raise ir.SchemaError(f"{node.op}: {e.reason}") from None
            s.ctx.plans[param.name] = arg
    for param, arg in zip(d.params, node.args):
        if param.is_plan:
            continue
        try:
            slots = [s.slots(t) for t in param.arg_types]
        except MissingBinding as e:
            raise ir.SchemaError(f"{node.op}: {e}") from None
        if len(slots) == 1:
            vecs, scope, owner = [s.row(len(slots[0]), "only")], {"only": _schema_of(slots[0])}, None
        elif len(slots) == 2:
            vecs = [s.row(len(slots[0]), "left"), s.row(len(slots[1]), "right")]
            scope, owner = {"left": _schema_of(slots[0]), "right": _schema_of(slots[1])}, len(slots[0])
        else:
            raise UnsupportedPattern("custom lambdas take one or two binders")
        try:
            if param.kind == "predicate":
                if ir.expr_type(arg, scope, registry) is not ValueType.BOOL:
                    raise ir.SchemaError(f"argument {param.name} of {node.op} must be boolean")
                body: tuple = (abstract(arg, vecs, owner),)
                kind = FuncKind.PREDICATE
            elif param.kind == "scalar":
                body = tuple(abstract(e, vecs, owner) for e in arg)
                s.bind_type(param.result, [Slot(f"c{i}", ir.expr_type(e, scope, registry)) for i, e in enumerate(arg)], ())
                kind = FuncKind.SCALAR
            else:
                body = tuple(ir.AggCall(a.fn, None if a.arg is None else abstract(a.arg, vecs)) for a in arg)
                s.bind_type(param.result, [Slot(f"a{i}", ir.agg_type(a, scope, registry)) for i, a in enumerate(arg)], ())
                kind = FuncKind.AGGREGATE
        except (_Leftover, _NoMatch, TypeError) as e:
            raise ir.SchemaError(f"argument {param.name} of {node.op} is malformed: {e}") from None
        s.ctx.funcs[param.name] = FunctionBinding(kind, tuple(len(v) for v in vecs), body)
    return s.build(d.semantics, {})


def render_binding(b: FunctionBinding, ctx: MatchContext, sym: pt.FuncSymbol) -> str:
    names = list(b.names) or [f"a{i}" for i in range(len(b.params))]
    param_types = sym.params if sym.kind is not FuncKind.AGGREGATE else (sym.params[0].item,)
    slot_names = []
    for t in param_types:
        try:
            slot_names.append([sl.name for sl in _Session(None, None, None, ctx).slots(t)])
        except MissingBinding:
            slot_names.append([])

    def namer(c):
        if isinstance(c, Param):
            base = names[c.pos] if c.pos < len(names) else f"a{c.pos}"
            cols = slot_names[c.pos] if c.pos < len(slot_names) else []
            return f"{base}.{cols[c.index]}" if c.index < len(cols) else f"{base}.{c.index}"
        return f"{c.side}.{c.index}" if c.side != "only" else f"${c.index}"

    def expr(e):
        return ir.render_agg(e, namer) if isinstance(e, ir.AggCall) else ir.render_expr(e, namer)

    binder = names[0] if len(names) == 1 else "(" + ",".join(names) + ")"
    items = [expr(e) for e in b.body]
    body = items[0] if len(items) == 1 else "(" + ", ".join(items) + ")"
    return f"λ{binder}. {body}"


def render_bindings(rule, ctx: MatchContext) -> Dict[str, str]:
    """Readable ``symbol -> binding`` map, in declaration order."""
    decls = rule.rule.decls()
    out: Dict[str, str] = {}
    for f in list(rule.rule.funcs) + list(rule.rule.aggs):
        if f.name in ctx.funcs:
            out[f.name] = render_binding(ctx.funcs[f.name], ctx, decls.funcs[f.name])
    for p in rule.rule.plans:
        if p.name in ctx.plans:
            out[p.name] = ir.describe(ctx.plans[p.name])
    return out
