"""Surface syntax for ``.rules`` files, with a parser and a canonical printer.

A file holds custom-operator definitions and rules::

    def SemiJoin(P: (X, Y) -> Bool, L: Bag<X>, R: Bag<Y>) -> Bag<X> =
      Filter(x -> Exists(Filter(y -> P(x, y), R)), L);

    rule PruneEmptyFilter {
      types T;
      funcs P: T -> Bool;
      from Filter(x -> P(x), Empty<T>);
      to Empty<T>;
    }

``--`` starts a comment.  Definitions are parsed before rules, so a rule may
use any definition in the file; a definition may only use earlier ones.
Parsing stops at the first error of each item and resumes at the next one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import pattern as pt
from .diagnostics import Code, Diagnostic, Span
from .extension import EMPTY_REGISTRY, CustomOpDef, ParamSpec, Registry, register
from .pattern import BOOL, FuncKind, TBag, TBool, TName, TProduct, TypeRef

HEADER = "-- rulekit rule file"
MAX_DEPTH = 64

KEYWORDS = {
    "def", "rule", "types", "funcs", "aggs", "plans", "from", "to", "where",
    "and", "or", "is", "not", "null", "True", "False", "Not", "Exists", "Bool", "Bag", "Empty",
}


@dataclass(frozen=True)
class RuleFile:
    defs: Tuple[CustomOpDef, ...] = ()
    rules: Tuple[pt.Rule, ...] = ()

    @cached_property
    def registry(self) -> Registry:
        reg = EMPTY_REGISTRY
        for d in self.defs:
            out = register(d, reg)
            if isinstance(out, Diagnostic):
                raise ValueError(out.message)
            reg = out
        return reg

    def rule(self, name: str) -> pt.Rule:
        for r in self.rules:
            if r.name == name:
                return r
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Lexer


@dataclass(frozen=True)
class Token:
    kind: str  # ident | int | punct | eof
    text: str
    span: Span


class ParseError(Exception):
    def __init__(self, code: Code, message: str, span: Optional[Span]):
        super().__init__(message)
        self.code = code
        self.message = message
        self.span = span

    def diagnostic(self) -> Diagnostic:
        return Diagnostic(self.code, self.message, span=self.span)


_PUNCT2 = ("->", "!=")
_PUNCT1 = "(){}<>,;:.="


def tokenize(text: str) -> List[Token]:
    out: List[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            i, line, col = i + 1, line + 1, 1
            continue
        if c in " \t\r":
            i, col = i + 1, col + 1
            continue
        if text.startswith("--", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        start = col
        if c.isascii() and (c.isalpha() or c == "_"):
            j = i
            while j < n and text[j].isascii() and (text[j].isalnum() or text[j] == "_"):
                j += 1
            kind, word = "ident", text[i:j]
        elif c.isascii() and c.isdigit():
            j = i
            while j < n and text[j].isascii() and text[j].isdigit():
                j += 1
            kind, word = "int", text[i:j]
        elif text[i : i + 2] in _PUNCT2:
            kind, word, j = "punct", text[i : i + 2], i + 2
        elif c in _PUNCT1:
            kind, word, j = "punct", c, i + 1
        else:
            raise ParseError(Code.SYNTAX, f"unexpected character {c!r}", Span(line, col, line, col + 1))
        col += j - i
        out.append(Token(kind, word, Span(line, start, line, col)))
        i = j
    out.append(Token("eof", "", Span(line, col, line, col)))
    return out


# ---------------------------------------------------------------------------
# Parser


@dataclass
class _Scope:
    """Binders in scope: name -> (binder, part index or None)."""

    names: Dict[str, Tuple[str, Optional[int]]] = field(default_factory=dict)
    binders: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def extend(self, binder: str) -> "_Scope":
        names = dict(self.names)
        parts = pt.binder_parts(binder)
        if parts is None:
            names[binder] = (binder, None)
        else:
            for i, p in enumerate(parts):
                names[p] = (binder, i)
        binders = dict(self.binders)
        binders[binder] = parts or ()
        return _Scope(names, binders)


@dataclass
class _Env:
    """Declarations visible to a pattern being parsed."""

    types: Optional[set]  # None: implicit type parameters (inside a def)
    funcs: Dict[str, pt.FuncSymbol]
    plans: Dict[str, pt.PlanSymbol]


class _Parser:
    def __init__(self, tokens: Sequence[Token], kinds: Dict[str, Tuple[ParamSpec, ...]]):
        self.toks = list(tokens)
        self.pos = 0
        self.kinds = kinds
        self.depth = 0
        self.env = _Env(None, {}, {})

    # token helpers ---------------------------------------------------------

    @property
    def tok(self) -> Token:
        return self.toks[self.pos]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.pos + k, len(self.toks) - 1)]

    def at(self, text: str) -> bool:
        t = self.tok
        return t.text == text and t.kind in ("punct", "ident")

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.pos += 1
        return t

    def fail(self, msg: str, tok: Optional[Token] = None, code: Code = Code.SYNTAX):
        tok = tok or self.tok
        raise ParseError(code, msg, tok.span)

    def expect(self, text: str) -> Token:
        if not self.at(text):
            shown = self.tok.text or "end of input"
            self.fail(f"expected '{text}', found '{shown}'")
        return self.advance()

    def ident(self, what: str = "a name") -> Token:
        t = self.tok
        if t.kind != "ident" or t.text in KEYWORDS:
            self.fail(f"expected {what}, found '{t.text or 'end of input'}'")
        return self.advance()

    def nest(self):
        parser = self

        class _Depth:
            def __enter__(self):
                parser.depth += 1
                if parser.depth > MAX_DEPTH:
                    parser.fail(f"nesting deeper than {MAX_DEPTH} levels", code=Code.NESTING)

            def __exit__(self, *exc):
                parser.depth -= 1

        return _Depth()

    # types -------------------------------------------------------------------

    def type_ref(self, allow_bag: bool = False) -> TypeRef:
        with self.nest():
            if self.at("Bool"):
                self.advance()
                return BOOL
            if self.at("Bag"):
                t = self.advance()
                if not allow_bag:
                    self.fail("Bag<...> is only allowed for plans and aggregate inputs", t, Code.BAD_DECLARATION)
                self.expect("<")
                item = self.type_ref()
                self.expect(">")
                return TBag(item)
            if self.at("("):
                self.advance()
                items = [self.type_ref()]
                while self.at(","):
                    self.advance()
                    items.append(self.type_ref())
                self.expect(")")
                if len(items) == 1:
                    return items[0]
                return TProduct(tuple(items))
            t = self.ident("a type")
            if self.env.types is not None and t.text not in self.env.types:
                self.fail(f"unbound symbol {t.text}", t, Code.UNBOUND_SYMBOL)
            return TName(t.text)

    def bag(self) -> TypeRef:
        t = self.tok
        ty = self.type_ref(allow_bag=True)
        if not isinstance(ty, TBag):
            self.fail("expected Bag<...>", t, Code.BAD_DECLARATION)
        return ty.item

    def signature(self) -> Tuple[Tuple[TypeRef, ...], TypeRef]:
        """``(A, B) -> R`` or ``A -> R``; ``((A, B)) -> R`` takes one product."""
        if self.at("("):
            self.advance()
            params = [self.type_ref()]
            while self.at(","):
                self.advance()
                params.append(self.type_ref())
            self.expect(")")
        else:
            params = [self.type_ref()]
        self.expect("->")
        return tuple(params), self.type_ref()

    # expressions ---------------------------------------------------------------

    def func(self, tok: Token, want: FuncKind, nargs: int) -> pt.FuncSymbol:
        sym = self.env.funcs.get(tok.text)
        if sym is None:
            self.fail(f"unbound symbol {tok.text}", tok, Code.UNBOUND_SYMBOL)
        if sym.kind is not want:
            self.fail(f"{tok.text} is a {sym.kind.value} symbol, used as {want.value}", tok, Code.TYPE_MISMATCH)
        if len(sym.params) != nargs:
            self.fail(f"{tok.text} expects {len(sym.params)} argument(s), got {nargs}", tok, Code.ARITY_MISMATCH)
        return sym

    def args(self, scope: _Scope) -> Tuple[pt.Expr, ...]:
        self.expect("(")
        out = []
        if not self.at(")"):
            out.append(self.expr(scope))
            while self.at(","):
                self.advance()
                out.append(self.expr(scope))
        self.expect(")")
        return tuple(out)

    def expr(self, scope: _Scope, head: Optional[list] = None) -> pt.Expr:
        """Parse an expression; a top-level application's name token goes to ``head``."""
        with self.nest():
            e = self.primary(scope, head)
            while self.at("."):
                self.advance()
                t = self.tok
                if t.kind != "int":
                    self.fail("expected a component index after '.'")
                self.advance()
                if head:
                    self.func(head.pop(), FuncKind.SCALAR, len(e.args))
                e = pt.Proj(e, int(t.text))
            return e

    def primary(self, scope: _Scope, head: Optional[list]) -> pt.Expr:
        t = self.tok
        if self.at("null"):
            self.advance()
            return pt.Const()
        if self.at("("):
            self.advance()
            items = [self.expr(scope)]
            while self.at(","):
                self.advance()
                items.append(self.expr(scope))
            self.expect(")")
            if len(items) == 1:
                return items[0]
            return _retuple(tuple(items), scope)
        t = self.ident("an expression")
        if self.at("("):
            args = self.args(scope)
            if head is None:
                self.func(t, FuncKind.SCALAR, len(args))
            else:
                head.append(t)
            return pt.Apply(t.text, args)
        if t.text not in scope.names:
            self.fail(f"unbound variable {t.text}", t, Code.UNBOUND_VARIABLE)
        binder, part = scope.names[t.text]
        return pt.Var(binder) if part is None else pt.Proj(pt.Var(binder), part)

    # predicates ----------------------------------------------------------------

    def pred(self, scope: _Scope) -> pt.Pred:
        with self.nest():
            p = self.conj(scope)
            while self.at("or"):
                self.advance()
                p = pt.Or(p, self.conj(scope))
            return p

    def conj(self, scope: _Scope) -> pt.Pred:
        p = self.atom(scope)
        while self.at("and"):
            self.advance()
            p = pt.And(p, self.atom(scope))
        return p

    def atom(self, scope: _Scope) -> pt.Pred:
        with self.nest():
            if self.at("True"):
                self.advance()
                return pt.TOP
            if self.at("False"):
                self.advance()
                return pt.BOTTOM
            if self.at("Not") and self.peek().text == "(":
                self.advance()
                self.expect("(")
                p = self.pred(scope)
                self.expect(")")
                return pt.Not(p)
            if self.at("Exists") and self.peek().text == "(":
                self.advance()
                self.expect("(")
                q = self.plan(scope)
                self.expect(")")
                return pt.Exists(q)
            if self.at("("):
                save = self.pos
                try:
                    self.advance()
                    p = self.pred(scope)
                    self.expect(")")
                    if not (self.at("=") or self.at("!=") or self.at("is") or self.at(".")):
                        return p
                except ParseError as e:
                    if e.code is Code.NESTING:
                        raise
                self.pos = save
            head: list = []
            e = self.expr(scope, head)
            if self.at("=") or self.at("!="):
                op = self.advance().text
                if head:
                    self.func(head.pop(), FuncKind.SCALAR, len(e.args))
                rhs = self.expr(scope)
                return pt.Eq(e, rhs) if op == "=" else pt.Neq(e, rhs)
            if self.at("is"):
                self.advance()
                negated = self.at("not")
                if negated:
                    self.advance()
                self.expect("null")
                if head:
                    self.func(head.pop(), FuncKind.SCALAR, len(e.args))
                return pt.IsNotNull(e) if negated else pt.IsNull(e)
            if head and isinstance(e, pt.Apply):
                self.func(head.pop(), FuncKind.PREDICATE, len(e.args))
                return pt.PredApply(e.fn, e.args)
            self.fail("expected a predicate")

    # lambdas and plans ---------------------------------------------------------

    def lam(self, scope: _Scope, arity: int, kind: str) -> pt.Lambda:
        first = self.tok
        binders: List[str] = []
        seen = set()
        while not self.at("->"):
            if self.at("("):
                self.advance()
                parts = [self.ident("a binder")]
                while self.at(","):
                    self.advance()
                    parts.append(self.ident("a binder"))
                self.expect(")")
                if len(parts) == 1:
                    self.fail("a destructuring binder needs at least two parts", parts[0])
                toks = parts
                binder = pt.tuple_binder(p.text for p in parts)
            elif self.tok.kind == "ident" and self.tok.text not in KEYWORDS:
                toks = [self.advance()]
                binder = toks[0].text
            else:
                self.fail("expected a lambda (binders followed by '->')")
            for t in toks:
                if t.text in scope.names or t.text in seen:
                    self.fail(f"binder {t.text} shadows an enclosing binder", t, Code.SHADOWING)
                seen.add(t.text)
            binders.append(binder)
        if len(binders) != arity:
            self.fail(f"lambda takes {arity} binder(s), got {len(binders)}", first, Code.ARITY_MISMATCH)
        self.advance()
        inner = scope
        for b in binders:
            inner = inner.extend(b)
        if kind == "predicate":
            body = self.pred(inner)
        elif kind == "scalar":
            body = self.expr(inner)
        else:
            t = self.ident("an aggregate application")
            args = self.args(inner)
            self.func(t, FuncKind.AGGREGATE, len(args))
            body = pt.AggApply(t.text, args)
        return pt.Lambda(tuple(binders), body)

    _CORE = {
        "Filter": (("predicate", 1), "plan"),
        "Project": (("scalar", 1), "plan"),
        "Join": (("predicate", 2), "plan", "plan"),
        "Union": ("plan", "plan"),
        "Distinct": ("plan",),
        "Aggregate": (("scalar", 1), ("aggregate", 1), "plan"),
    }

    def plan(self, scope: _Scope) -> pt.Plan:
        with self.nest():
            t = self.tok
            if self.at("Empty"):
                self.advance()
                self.expect("<")
                ty = self.type_ref()
                self.expect(">")
                return pt.Empty(ty)
            name = self.ident("a plan")
            if not self.at("("):
                if name.text not in self.env.plans:
                    self.fail(f"unbound symbol {name.text}", name, Code.UNBOUND_SYMBOL)
                return pt.Sym(name.text)
            if name.text in self._CORE:
                shape = self._CORE[name.text]
            elif name.text in self.kinds:
                shape = tuple("plan" if p.is_plan else (p.kind, p.arity) for p in self.kinds[name.text])
            else:
                self.fail(f"unknown operator {name.text}", name, Code.UNKNOWN_OPERATOR)
            self.expect("(")
            args: list = []
            for i, want in enumerate(shape):
                if i:
                    if self.at(")"):
                        self.fail(f"{name.text} expects {len(shape)} arguments, got {i}", name, Code.ARITY_MISMATCH)
                    self.expect(",")
                looks_lambda = self._looks_like_lambda()
                if want == "plan":
                    if looks_lambda:
                        self.fail(f"argument {i + 1} of {name.text} must be a plan", code=Code.ARITY_MISMATCH)
                    args.append(self.plan(scope))
                else:
                    if not looks_lambda:
                        self.fail(f"argument {i + 1} of {name.text} must be a lambda", code=Code.ARITY_MISMATCH)
                    kind, arity = want
                    args.append(self.lam(scope, arity, kind))
            if self.at(","):
                self.fail(f"{name.text} expects {len(shape)} arguments", name, Code.ARITY_MISMATCH)
            self.expect(")")
            return _build_op(name.text, args)

    def _looks_like_lambda(self) -> bool:
        i = self.pos
        while True:
            t = self.toks[i]
            if t.kind == "ident" and t.text not in KEYWORDS:
                i += 1
            elif t.text == "(":
                i += 1
                while self.toks[i].kind == "ident" or self.toks[i].text == ",":
                    i += 1
                if self.toks[i].text != ")":
                    return False
                i += 1
            else:
                return t.text == "->" and i > self.pos


def _build_op(name: str, args: list) -> pt.Plan:
    if name == "Filter":
        return pt.Filter(*args)
    if name == "Project":
        return pt.Project(*args)
    if name == "Join":
        return pt.Join(*args)
    if name == "Union":
        return pt.Union_(*args)
    if name == "Distinct":
        return pt.Distinct(*args)
    if name == "Aggregate":
        return pt.Aggregate(*args)
    return pt.Custom(name, tuple(args))


def _retuple(items: Tuple[pt.Expr, ...], scope: _Scope) -> pt.Expr:
    """``(k, v)`` written for the parts of binder ``(k,v)`` is that binder."""
    first = items[0]
    if isinstance(first, pt.Proj) and isinstance(first.expr, pt.Var):
        b = first.expr.name
        parts = scope.binders.get(b)
        if parts and len(parts) == len(items) and all(
            isinstance(it, pt.Proj) and it.expr == pt.Var(b) and it.index == i for i, it in enumerate(items)
        ):
            return pt.Var(b)
    return pt.TupleExpr(items)


# ---------------------------------------------------------------------------
# Items


@dataclass
class _Item:
    kind: str
    start: int
    end: int  # index one past the closing token


def _split_items(toks: List[Token], diags: List[Diagnostic]) -> List[_Item]:
    items, i = [], 0
    while toks[i].kind != "eof":
        t = toks[i]
        if t.kind == "ident" and t.text == "def":
            j = i
            while toks[j].kind != "eof" and toks[j].text != ";":
                if j > i and toks[j].text in ("def", "rule") and toks[j].kind == "ident":
                    break
                j += 1
            if toks[j].text != ";":
                diags.append(Diagnostic(Code.SYNTAX, "definition is not terminated by ';'", span=toks[j].span))
                i = j
                continue
            items.append(_Item("def", i, j + 1))
            i = j + 1
        elif t.kind == "ident" and t.text == "rule":
            j, depth, opened = i, 0, False
            while toks[j].kind != "eof":
                if toks[j].text == "{" and toks[j].kind == "punct":
                    depth += 1
                    opened = True
                elif toks[j].text == "}" and toks[j].kind == "punct":
                    depth -= 1
                    if depth <= 0:
                        break
                elif not opened and toks[j].text in ("def", "rule") and j > i:
                    break
                j += 1
            if toks[j].text != "}":
                diags.append(Diagnostic(Code.SYNTAX, "rule is not closed by '}'", span=toks[j].span))
                i = j if j > i else j + 1
                continue
            items.append(_Item("rule", i, j + 1))
            i = j + 1
        else:
            diags.append(Diagnostic(Code.SYNTAX, f"expected 'def' or 'rule', found '{t.text}'", span=t.span))
            while toks[i].kind != "eof" and toks[i].text not in ("def", "rule"):
                i += 1
    return items


def _parse_def(p: _Parser) -> Tuple[CustomOpDef, Token]:
    p.expect("def")
    name = p.ident("an operator name")
    p.env = _Env(None, {}, {})
    p.expect("(")
    params: List[ParamSpec] = []
    seen: Dict[str, Token] = {}
    while True:
        pname = p.ident("a parameter name")
        if pname.text in seen:
            p.fail(f"duplicate parameter name {pname.text}", pname, Code.DUPLICATE_NAME)
        seen[pname.text] = pname
        p.expect(":")
        if p.at("Bag"):
            item = p.bag()
            if p.at("->"):
                p.advance()
                params.append(ParamSpec(pname.text, "aggregate", arg_types=(item,), result=p.type_ref()))
            else:
                params.append(ParamSpec(pname.text, "plan", row_type=item))
        else:
            args, result = p.signature()
            if result == BOOL:
                params.append(ParamSpec(pname.text, "predicate", arg_types=args))
            else:
                params.append(ParamSpec(pname.text, "scalar", arg_types=args, result=result))
        if not p.at(","):
            break
        p.advance()
    p.expect(")")
    p.expect("->")
    out = p.bag()
    p.expect("=")
    p.kinds[name.text] = tuple(params)
    p.env = _Env(None, _def_funcs(params), {s.name: s for s in (q.as_symbol() for q in params if q.is_plan)})
    body = p.plan(_Scope())
    p.expect(";")
    return CustomOpDef(name.text, tuple(params), out, body), name


def _def_funcs(params) -> Dict[str, pt.FuncSymbol]:
    out = {}
    for q in params:
        if not q.is_plan:
            s = q.as_symbol()
            out[s.name] = s
    return out


class _RuleSpans:
    def __init__(self, name: Token):
        self.name = name
        self.sections: Dict[str, Token] = {}
        self.decls: Dict[str, Token] = {}

    def locate(self, path: Sequence[str]) -> Span:
        if path:
            if path[0] == "decls" and len(path) > 1 and path[-1] in self.decls:
                return self.decls[path[-1]].span
            if path[0] in self.sections:
                return self.sections[path[0]].span
        return self.name.span


def _parse_rule(p: _Parser) -> Tuple[pt.Rule, _RuleSpans]:
    p.expect("rule")
    name = p.ident("a rule name")
    spans = _RuleSpans(name)
    p.expect("{")
    types: List[pt.TypeSymbol] = []
    funcs: List[pt.FuncSymbol] = []
    aggs: List[pt.FuncSymbol] = []
    plans: List[pt.PlanSymbol] = []
    declared: Dict[str, Token] = {}
    p.env = _Env(set(), {}, {})

    def declare(tok: Token):
        if tok.text in declared:
            p.fail(f"duplicate declaration of {tok.text}", tok, Code.DUPLICATE_NAME)
        declared[tok.text] = tok
        spans.decls[tok.text] = tok

    def section(word, parse_one):
        if p.at(word):
            spans.sections["decls"] = spans.sections.get("decls", p.tok)
            p.advance()
            parse_one()
            while p.at(","):
                p.advance()
                parse_one()
            p.expect(";")

    def a_type():
        t = p.ident("a type name")
        declare(t)
        types.append(pt.TypeSymbol(t.text))
        p.env.types.add(t.text)

    def a_func():
        t = p.ident("a function name")
        declare(t)
        p.expect(":")
        params, result = p.signature()
        sym = pt.FuncSymbol.scalar(t.text, params, result)
        funcs.append(sym)
        p.env.funcs[t.text] = sym

    def an_agg():
        t = p.ident("an aggregate name")
        declare(t)
        p.expect(":")
        item = p.bag()
        p.expect("->")
        sym = pt.FuncSymbol.aggregate(t.text, item, p.type_ref())
        aggs.append(sym)
        p.env.funcs[t.text] = sym

    def a_plan():
        t = p.ident("a plan name")
        declare(t)
        p.expect(":")
        sym = pt.PlanSymbol(t.text, p.bag())
        plans.append(sym)
        p.env.plans[t.text] = sym

    section("types", a_type)
    section("funcs", a_func)
    section("aggs", an_agg)
    section("plans", a_plan)
    spans.sections["from"] = p.expect("from")
    source = p.plan(_Scope())
    p.expect(";")
    spans.sections["to"] = p.expect("to")
    target = p.plan(_Scope())
    p.expect(";")
    constraints: List[pt.Constraint] = []
    if p.at("where"):
        spans.sections["where"] = p.advance()
        while True:
            kind = p.ident("a constraint")
            if kind.text != "injective":
                p.fail(f"unknown constraint kind {kind.text}", kind, Code.BAD_CONSTRAINT)
            p.expect("(")
            subj = p.ident("a function name")
            sym = p.env.funcs.get(subj.text)
            if sym is None or sym.kind is not FuncKind.SCALAR:
                p.fail(f"constraint subject {subj.text} is not a declared scalar function", subj, Code.BAD_CONSTRAINT)
            p.expect(")")
            constraints.append(pt.Constraint(kind.text, subj.text))
            if not p.at(","):
                break
            p.advance()
        p.expect(";")
    p.expect("}")
    rule = pt.Rule(name.text, tuple(types), tuple(funcs), tuple(aggs), tuple(plans), source, target, tuple(constraints))
    return rule, spans


def parse_rule_file(source: Union[str, bytes]) -> Union[RuleFile, List[Diagnostic]]:
    """Parse a rule file and typecheck every rule in it."""
    from .typecheck import typecheck_rule

    if isinstance(source, (bytes, bytearray)):
        try:
            source = bytes(source).decode("utf-8")
        except UnicodeDecodeError as e:
            return [Diagnostic(Code.ENCODING, f"input is not valid UTF-8 (byte {e.start})", span=_byte_span(source, e.start))]
    try:
        toks = tokenize(source)
    except ParseError as e:
        return [e.diagnostic()]
    diags: List[Diagnostic] = []
    items = _split_items(toks, diags)
    kinds: Dict[str, Tuple[ParamSpec, ...]] = {}
    registry = EMPTY_REGISTRY
    defs: List[CustomOpDef] = []
    names: Dict[str, Token] = {}

    def sub_parser(item: _Item) -> _Parser:
        return _Parser(toks[item.start : item.end] + [toks[-1]], kinds)

    for item in items:
        if item.kind != "def":
            continue
        p = sub_parser(item)
        try:
            d, tok = _parse_def(p)
        except ParseError as e:
            diags.append(e.diagnostic())
            continue
        if d.name in names:
            diags.append(Diagnostic(Code.DUPLICATE_NAME, f"duplicate name {d.name}", span=tok.span))
            continue
        names[d.name] = tok
        out = register(d, registry)
        if isinstance(out, Diagnostic):
            diags.append(Diagnostic(out.code, out.message, span=tok.span, path=out.path))
            kinds.pop(d.name, None)
            continue
        registry = out
        defs.append(d)
    # a rule may use any definition that registered
    for k in list(kinds):
        if k not in registry:
            kinds.pop(k)

    rules: List[pt.Rule] = []
    for item in items:
        if item.kind != "rule":
            continue
        p = sub_parser(item)
        try:
            rule, spans = _parse_rule(p)
        except ParseError as e:
            diags.append(e.diagnostic())
            continue
        if rule.name in names:
            diags.append(Diagnostic(Code.DUPLICATE_NAME, f"duplicate name {rule.name}", span=spans.name.span))
            continue
        names[rule.name] = spans.name
        found = pt.validate_rule(rule, registry)
        if not found:
            typed = typecheck_rule(rule, registry)
            found = typed if isinstance(typed, list) else []
        if found:
            d = found[0]
            diags.append(Diagnostic(d.code, d.message, d.severity, d.span or spans.locate(d.path), d.path))
            continue
        rules.append(rule)
    if diags:
        return sorted(diags, key=lambda d: (d.span.line, d.span.col) if d.span else (0, 0))
    return RuleFile(tuple(defs), tuple(rules))


def _byte_span(data: bytes, offset: int) -> Span:
    line = data.count(b"\n", 0, offset) + 1
    col = offset - (data.rfind(b"\n", 0, offset) + 1) + 1
    return Span(line, col, line, col + 1)


def load_rule_file(path) -> RuleFile:
    """Read and parse ``path``; raises :class:`DiagnosticError` on failure."""
    from pathlib import Path

    from .diagnostics import DiagnosticError

    out = parse_rule_file(Path(path).read_bytes())
    if isinstance(out, list):
        raise DiagnosticError(out)
    return out


# ---------------------------------------------------------------------------
# Printer


def print_type(t: TypeRef) -> str:
    if isinstance(t, TName):
        return t.name
    if isinstance(t, TBool):
        return "Bool"
    if isinstance(t, TProduct):
        return "(" + ", ".join(print_type(i) for i in t.items) + ")"
    if isinstance(t, TBag):
        return f"Bag<{print_type(t.item)}>"
    raise TypeError(f"not a type: {t!r}")


def print_signature(params: Sequence[TypeRef], result: TypeRef) -> str:
    if len(params) == 1 and not isinstance(params[0], TProduct):
        head = print_type(params[0])
    else:
        head = "(" + ", ".join(print_type(t) for t in params) + ")"
    return f"{head} -> {print_type(result)}"


def print_expr(e) -> str:
    if isinstance(e, pt.Var):
        parts = pt.binder_parts(e.name)
        return "(" + ", ".join(parts) + ")" if parts else e.name
    if isinstance(e, pt.Const):
        return "null"
    if isinstance(e, pt.Proj):
        if isinstance(e.expr, pt.Var):
            parts = pt.binder_parts(e.expr.name)
            if parts:
                return parts[e.index]
        inner = print_expr(e.expr)
        return f"{inner}.{e.index}"
    if isinstance(e, pt.TupleExpr):
        return "(" + ", ".join(print_expr(i) for i in e.items) + ")"
    if isinstance(e, (pt.Apply, pt.PredApply, pt.AggApply)):
        return f"{e.fn}(" + ", ".join(print_expr(a) for a in e.args) + ")"
    raise TypeError(f"not an expression: {e!r}")


def print_pred(p, prec: int = 0) -> str:
    if isinstance(p, pt.Or):
        s = f"{print_pred(p.left, 1)} or {print_pred(p.right, 2)}"
        return f"({s})" if prec > 1 else s
    if isinstance(p, pt.And):
        s = f"{print_pred(p.left, 2)} and {print_pred(p.right, 3)}"
        return f"({s})" if prec > 2 else s
    if isinstance(p, pt.Top):
        return "True"
    if isinstance(p, pt.Bottom):
        return "False"
    if isinstance(p, pt.Not):
        return f"Not({print_pred(p.pred)})"
    if isinstance(p, pt.Exists):
        return f"Exists({print_plan(p.plan)})"
    if isinstance(p, pt.Eq):
        return f"{print_expr(p.left)} = {print_expr(p.right)}"
    if isinstance(p, pt.Neq):
        return f"{print_expr(p.left)} != {print_expr(p.right)}"
    if isinstance(p, pt.IsNull):
        return f"{print_expr(p.expr)} is null"
    if isinstance(p, pt.IsNotNull):
        return f"{print_expr(p.expr)} is not null"
    return print_expr(p)


def print_lambda(lam: pt.Lambda) -> str:
    binders = " ".join(
        "(" + ", ".join(pt.binder_parts(b)) + ")" if pt.binder_parts(b) else b for b in lam.binders
    )
    b = lam.body
    body = print_expr(b) if isinstance(b, (pt.Var, pt.Const, pt.Proj, pt.TupleExpr, pt.Apply, pt.AggApply)) else print_pred(b)
    return f"{binders} -> {body}"


def print_plan(p: pt.Plan) -> str:
    if isinstance(p, pt.Sym):
        return p.name
    if isinstance(p, pt.Empty):
        return f"Empty<{print_type(p.type)}>"
    if isinstance(p, pt.Custom):
        args = p.args
    else:
        args = pt.plan_lambdas(p) + pt.plan_children(p)
    parts = [print_lambda(a) if isinstance(a, pt.Lambda) else print_plan(a) for a in args]
    return f"{pt.op_name(p)}(" + ", ".join(parts) + ")"


def _print_param(q: ParamSpec) -> str:
    if q.kind == "plan":
        return f"{q.name}: Bag<{print_type(q.row_type)}>"
    if q.kind == "aggregate":
        return f"{q.name}: Bag<{print_type(q.arg_types[0])}> -> {print_type(q.result)}"
    result = BOOL if q.kind == "predicate" else q.result
    return f"{q.name}: {print_signature(q.arg_types, result)}"


def print_def(d: CustomOpDef) -> str:
    params = ", ".join(_print_param(q) for q in d.params)
    return f"def {d.name}({params}) -> Bag<{print_type(d.output_type)}> =\n  {print_plan(d.semantics)};\n"


def print_rule(r: pt.Rule) -> str:
    lines = [f"rule {r.name} {{"]
    if r.types:
        lines.append("  types " + ", ".join(t.name for t in r.types) + ";")
    if r.funcs:
        lines.append("  funcs " + ", ".join(f"{f.name}: {print_signature(f.params, f.result)}" for f in r.funcs) + ";")
    if r.aggs:
        lines.append(
            "  aggs "
            + ", ".join(f"{a.name}: Bag<{print_type(a.params[0].item)}> -> {print_type(a.result)}" for a in r.aggs)
            + ";"
        )
    if r.plans:
        lines.append("  plans " + ", ".join(f"{q.name}: Bag<{print_type(q.row_type)}>" for q in r.plans) + ";")
    lines.append(f"  from {print_plan(r.source)};")
    lines.append(f"  to {print_plan(r.target)};")
    if r.constraints:
        lines.append("  where " + ", ".join(f"{c.kind}({c.subject})" for c in r.constraints) + ";")
    lines.append("}")
    return "\n".join(lines) + "\n"


def print_rule_file(f: RuleFile) -> str:
    chunks = [HEADER + "\n"]
    chunks += [print_def(d) for d in f.defs]
    chunks += [print_rule(r) for r in f.rules]
    return "\n".join(chunks)
