"""Emit Optgen-style match/replace rules from typechecked rules.

Each rule becomes a ``[Name, Normalize]`` header followed by a match
S-expression with ``$var:*`` captures, ``=>`` and a replace S-expression.
Operator names and field layouts come from a mapping file (``opmap.toml``).

Only a fixed helper vocabulary is emitted:

``(OnlyRefsCols $pred $cols)``
    guard: ``$pred`` references only the grouping columns ``$cols``.
``(RemapPredicate $pred $cols $input)``
    rewrite ``$pred`` from the grouping output to the columns of ``$input``.
``(ColsFromGrouping $cols $aggs)``
    the output columns of a grouping with columns ``$cols`` and aggregates ``$aggs``.

Rules that would need anything else raise ``UnsupportedPatternForTarget``.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Tuple, Union

from . import __version__
from . import pattern as pt
from .extension import alpha_equal
from .typecheck import typecheck_plan

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

HELPERS = ("OnlyRefsCols", "RemapPredicate", "ColsFromGrouping")
WIDTH = 64


class UnmappedOperator(Exception):
    pass


class UnsupportedPatternForTarget(Exception):
    pass


class CodegenAuditError(Exception):
    pass


class OptgenSyntaxError(Exception):
    pass


def load_opmap(path=None) -> dict:
    if path is None:
        text = resources.files("rulekit").joinpath("opmap.toml").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    return tomllib.loads(text)["operators"]


# ---------------------------------------------------------------------------
# S-expression model


@dataclass
class Atom:
    text: str


@dataclass
class Ref:
    name: str


@dataclass
class Capture:
    name: str
    inner: Optional["Node"] = None
    guard: Optional["Node"] = None


@dataclass
class Node:
    head: str
    items: List[Union[Atom, Ref, Capture, "Node"]] = field(default_factory=list)


Item = Union[Atom, Ref, Capture, Node]


def flat(item: Item) -> str:
    if isinstance(item, Atom):
        return item.text
    if isinstance(item, Ref):
        return f"${item.name}"
    if isinstance(item, Capture):
        s = f"${item.name}:" + (flat(item.inner) if item.inner else "*")
        return s + (f" & {flat(item.guard)}" if item.guard else "")
    return "(" + " ".join([item.head] + [flat(i) for i in item.items]) + ")"


def _simple(item: Item) -> bool:
    return isinstance(item, (Atom, Ref)) or (isinstance(item, Capture) and not item.inner and not item.guard)


def pretty(item: Item, indent: int = 0) -> str:
    """Lay out ``item`` over several lines once it exceeds the line width."""
    text = flat(item)
    if indent + len(text) <= WIDTH or _simple(item):
        return text
    pad = " " * (indent + 4)
    if isinstance(item, Capture):
        if item.guard:
            head = pretty(Capture(item.name, item.inner), indent)
            return f"{head} &\n{pad}{pretty(item.guard, indent + 4)}"
        prefix = f"${item.name}:"
        return prefix + pretty(item.inner, indent + len(prefix))[0:]
    lines = ["(" + item.head]
    rest = list(item.items)
    while rest and _simple(rest[0]) and len(lines[0]) + 1 + len(flat(rest[0])) + indent <= WIDTH:
        lines[0] += " " + flat(rest.pop(0))
    current = None
    for it in rest:
        if _simple(it):
            if current is not None and len(current) + 1 + len(flat(it)) <= WIDTH:
                current += " " + flat(it)
            else:
                if current is not None:
                    lines.append(current)
                current = pad + flat(it)
        else:
            if current is not None:
                lines.append(current)
                current = None
            lines.append(pad + pretty(it, indent + 4))
    if current is not None:
        lines.append(current)
    return "\n".join(lines) + ")"


# ---------------------------------------------------------------------------
# Emission


def _op_args(node: pt.Plan) -> tuple:
    if isinstance(node, pt.Filter):
        return (node.pred, node.input)
    if isinstance(node, pt.Project):
        return (node.fn, node.input)
    if isinstance(node, pt.Join):
        return (node.pred, node.left, node.right)
    if isinstance(node, pt.Union_):
        return (node.left, node.right)
    if isinstance(node, pt.Distinct):
        return (node.input,)
    if isinstance(node, pt.Aggregate):
        return (node.key, node.agg, node.input)
    if isinstance(node, pt.Custom):
        return node.args
    return ()


def _parts_used(body, binder: str) -> Optional[set]:
    """Tuple parts of ``binder`` referenced by ``body``; None if used whole."""
    used: set = set()
    whole = False

    def walk(n):
        nonlocal whole
        if isinstance(n, pt.Proj) and isinstance(n.expr, pt.Var) and n.expr.name == binder:
            used.add(n.index)
            return
        if isinstance(n, pt.Var) and n.name == binder:
            whole = True
            return
        if isinstance(n, tuple):
            for x in n:
                walk(x)
        elif hasattr(n, "__dataclass_fields__"):
            for f in n.__dataclass_fields__:
                walk(getattr(n, f))

    walk(body)
    return None if whole else used


def _symbolic(lam: pt.Lambda) -> bool:
    """A lambda that is one uninterpreted application over its binders."""
    body = lam.body
    if not isinstance(body, (pt.Apply, pt.PredApply, pt.AggApply)):
        return False

    def leaf(e):
        if isinstance(e, pt.Var):
            return True
        return isinstance(e, pt.Proj) and isinstance(e.expr, pt.Var)

    return all(leaf(a) for a in body.args)


def _key_substitute(body, binder: str, key_body):
    """Replace the grouping-key part of ``binder`` by ``key_body``."""
    if isinstance(body, pt.Proj) and isinstance(body.expr, pt.Var) and body.expr.name == binder and body.index == 0:
        return key_body
    if isinstance(body, tuple):
        return tuple(_key_substitute(x, binder, key_body) for x in body)
    if hasattr(body, "__dataclass_fields__") and not isinstance(body, pt.Lambda):
        kwargs = {f: _key_substitute(getattr(body, f), binder, key_body) for f in body.__dataclass_fields__}
        return type(body)(**kwargs)
    return body


@dataclass
class _LamCap:
    lam: pt.Lambda
    name: str
    capture: Capture
    agg: Optional[pt.Aggregate] = None  # owning grouping when guarded


@dataclass
class _AggCap:
    node: pt.Aggregate
    key: str
    aggs: str
    input: Optional[str]


def dependency_constraints(rule: pt.Rule) -> List[Tuple[str, int]]:
    """Source lambdas whose tuple binder over a grouping leaves the aggregate value unused."""
    out = []
    for node in pt.iter_plan_nodes(rule.source):
        args = _op_args(node)
        plans = [a for a in args if not isinstance(a, pt.Lambda)]
        for lam in (a for a in args if isinstance(a, pt.Lambda)):
            for i, b in enumerate(lam.binders):
                if pt.binder_parts(b) is None or i >= len(plans) or not isinstance(plans[i], pt.Aggregate):
                    continue
                used = _parts_used(lam.body, b)
                if used is not None and 1 not in used:
                    out.append((b, i))
    return out


class _Emitter:
    def __init__(self, rule: pt.Rule, registry, opmap: dict):
        self.rule = rule
        self.registry = registry
        self.opmap = opmap
        self.decls = rule.decls()
        self.names: Dict[str, int] = {}
        self.plans: Dict[str, str] = {}
        self.lams: List[_LamCap] = []
        self.aggs: Dict[int, _AggCap] = {}
        self.opaque: Dict[Tuple[str, str], List[str]] = {}
        self.opaque_used: Dict[Tuple[str, str], int] = {}
        self.structs: List[Tuple[str, str, List[str]]] = []
        self.columns: List[Tuple[pt.TypeRef, str]] = []

    def fresh(self, base: str) -> str:
        n = self.names.get(base, 0) + 1
        self.names[base] = n
        return base if n == 1 else f"{base}{n}"

    def spec(self, node) -> dict:
        name = pt.op_name(node)
        if name not in self.opmap:
            raise UnmappedOperator(name)
        return self.opmap[name]

    # -- match side

    def match(self, node, hint: str) -> Item:
        if isinstance(node, pt.Sym):
            if node.name in self.plans:
                raise UnsupportedPatternForTarget(f"plan {node.name} is matched twice")
            name = self.fresh(hint)
            self.plans[node.name] = name
            return Capture(name)
        spec = self.spec(node)
        args = _op_args(node)
        items = [self.match_field(node, args, f, spec["target"]) for f in spec["fields"]]
        if isinstance(node, pt.Aggregate):
            self.aggs[id(node)] = _AggCap(
                node,
                key=self._lam_name(node.key),
                aggs=self._lam_name(node.agg),
                input=self.plans.get(node.input.name) if isinstance(node.input, pt.Sym) else None,
            )
        self.attach_guards(node, args)
        return Node(spec["target"], items)

    def _lam_name(self, lam) -> str:
        for c in self.lams:
            if c.lam is lam:
                return c.name
        raise CodegenAuditError("grouping lambda was not captured")

    def match_field(self, node, args, f: dict, target: str) -> Item:
        if "literal" in f:
            return Atom(f["literal"])
        if "struct" in f:
            subs = [self.match_field(node, args, s, f["struct"]) for s in f["fields"]]
            name = self.fresh(f["name"])
            self.structs.append((f["struct"], name, [s.name for s in subs if isinstance(s, Capture)]))
            return Capture(name, Node(f["struct"], subs))
        src = f["from"]
        if src == "opaque":
            name = self.fresh(f["name"])
            self.opaque.setdefault((target, f["name"]), []).append(name)
            return Capture(name)
        if src == "columns":
            name = self.fresh(f["name"])
            self.columns.append((node.type, name))
            return Capture(name)
        arg = args[int(src[3:])]
        if isinstance(arg, pt.Lambda):
            if not _symbolic(arg):
                raise UnsupportedPatternForTarget(f"{pt.op_name(node)} argument has no {f['name']} capture form")
            name = self.fresh(f["name"])
            cap = Capture(name)
            self.lams.append(_LamCap(arg, name, cap))
            return cap
        return self.match(arg, f["name"])

    def attach_guards(self, node, args):
        plans = [a for a in args if not isinstance(a, pt.Lambda)]
        for c in self.lams:
            if not any(c.lam is a for a in args):
                continue
            for i, b in enumerate(c.lam.binders):
                if pt.binder_parts(b) is None:
                    continue
                used = _parts_used(c.lam.body, b)
                if used is not None and len(used) == len(pt.binder_parts(b)):
                    continue
                if used is None:
                    continue
                child = plans[i] if i < len(plans) else None
                if not isinstance(child, pt.Aggregate) or 1 in used:
                    raise UnsupportedPatternForTarget("column-dependency restriction outside a grouping")
                agg = self.aggs[id(child)]
                c.capture.guard = Node("OnlyRefsCols", [Ref(c.name), Ref(agg.key)])
                c.agg = child

    # -- replace side

    def replace(self, node) -> Item:
        if isinstance(node, pt.Sym):
            return Ref(self.plans[node.name])
        spec = self.spec(node)
        args = _op_args(node)
        return Node(spec["target"], [self.replace_field(node, args, f, spec["target"]) for f in spec["fields"]])

    def replace_field(self, node, args, f: dict, target: str) -> Item:
        if "literal" in f:
            return Atom(f["literal"])
        if "struct" in f:
            subs = [self.replace_field(node, args, s, f["struct"]) for s in f["fields"]]
            refs = [s.name for s in subs if isinstance(s, Ref)]
            for struct, name, fields in self.structs:
                if struct == f["struct"] and len(refs) == len(subs) and refs == fields:
                    return Ref(name)
            return Node(f["struct"], subs)
        src = f["from"]
        if src == "opaque":
            key = (target, f["name"])
            names = self.opaque.get(key)
            if not names:
                raise UnsupportedPatternForTarget(f"{target} needs a {f['name']} value the match does not bind")
            k = self.opaque_used.get(key, 0)
            self.opaque_used[key] = k + 1
            return Ref(names[min(k, len(names) - 1)])
        if src == "columns":
            return self.columns_of(node.type)
        arg = args[int(src[3:])]
        if isinstance(arg, pt.Lambda):
            return self.lambda_item(arg)
        return self.replace(arg)

    def columns_of(self, t) -> Item:
        for ty, name in self.columns:
            if ty == t:
                return Ref(name)
        for agg in self.aggs.values():
            out, _ = typecheck_plan(agg.node, self.decls, self.registry)
            if out == t:
                return Node("ColsFromGrouping", [Ref(agg.key), Ref(agg.aggs)])
        raise UnsupportedPatternForTarget(f"no columns for Empty<{t}>")

    def lambda_item(self, lam: pt.Lambda) -> Item:
        for c in self.lams:
            if alpha_equal(c.lam, lam):
                return Ref(c.name)
        for c in self.lams:
            if c.agg is None:
                continue
            agg = self.aggs[id(c.agg)]
            (kb,) = c.agg.key.binders
            for i, b in enumerate(c.lam.binders):
                if pt.binder_parts(b) is None:
                    continue
                body = _key_substitute(c.lam.body, b, c.agg.key.body)
                binders = c.lam.binders[:i] + (kb,) + c.lam.binders[i + 1:]
                if _parts_used(body, b) == set() and alpha_equal(pt.Lambda(binders, body), lam):
                    if agg.input is None:
                        raise UnsupportedPatternForTarget("grouping input is not a captured plan")
                    return Node("RemapPredicate", [Ref(c.name), Ref(agg.key), Ref(agg.input)])
        raise UnsupportedPatternForTarget("replace-side lambda is neither a capture nor a predicate remap")


@dataclass
class OptgenRule:
    name: str
    tags: Tuple[str, ...]
    match: Node
    replace: Item
    guards: List[Node]
    helpers: Tuple[str, ...]
    provenance: str = ""

    @property
    def text(self) -> str:
        lines = []
        if self.provenance:
            lines.append(f"# {self.provenance}")
        lines.append(f"[{', '.join((self.name,) + self.tags)}]")
        lines.append(pretty(self.match))
        lines.append("=>")
        lines.append(pretty(self.replace))
        return "\n".join(lines) + "\n"


def _helpers_in(item: Item, out: set):
    if isinstance(item, Node):
        if item.head in HELPERS:
            out.add(item.head)
        for i in item.items:
            _helpers_in(i, out)
    elif isinstance(item, Capture):
        if item.inner:
            _helpers_in(item.inner, out)
        if item.guard:
            _helpers_in(item.guard, out)


def _guards_in(item: Item, out: list):
    if isinstance(item, Node):
        for i in item.items:
            _guards_in(i, out)
    elif isinstance(item, Capture):
        if item.guard:
            out.append(item.guard)
        if item.inner:
            _guards_in(item.inner, out)


def emit_optgen(typed_rule, registry=None, opmap: Optional[dict] = None, verdict: Optional[str] = None) -> OptgenRule:
    """Translate one rule; ``verdict`` is recorded in the provenance comment."""
    rule = getattr(typed_rule, "rule", typed_rule)
    if rule.constraints:
        raise UnsupportedPatternForTarget(f"constraint {rule.constraints[0].kind} has no Optgen guard")
    em = _Emitter(rule, registry, opmap if opmap is not None else load_opmap())
    if isinstance(rule.source, pt.Sym):
        raise UnsupportedPatternForTarget("match side is a bare plan")
    match = em.match(rule.source, "input")
    if not isinstance(match, Node):
        raise UnsupportedPatternForTarget("match side is a bare plan")
    replace = em.replace(rule.target)
    guards: List[Node] = []
    _guards_in(match, guards)
    expected = dependency_constraints(rule)
    if len(guards) != len(expected):
        raise CodegenAuditError(f"{rule.name}: {len(guards)} guards emitted for {len(expected)} dependency constraints")
    helpers: set = set()
    _helpers_in(match, helpers)
    _helpers_in(replace, helpers)
    prov = f"Generated by rulekit {__version__} from rule {rule.name}"
    if verdict:
        prov += f"; verification: {verdict}"
    out = OptgenRule(rule.name, ("Normalize",), match, replace, guards, tuple(sorted(helpers)), prov)
    check_bindings(out.text)
    return out


# ---------------------------------------------------------------------------
# Reader


_TOKEN = re.compile(r"\s+|#[^\n]*|(=>|[\[\](),&]|\$[A-Za-z_]\w*(?::\*|:)?|[A-Za-z_]\w*)")


def optgen_tokens(text: str) -> List[str]:
    """Significant tokens of an Optgen text (comments and whitespace removed)."""
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise OptgenSyntaxError(f"unexpected character {text[pos]!r} at offset {pos}")
        if m.group(1):
            out.append(m.group(1))
        pos = m.end()
    return out


class _Reader:
    def __init__(self, toks):
        self.toks = toks
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, want=None):
        t = self.peek()
        if t is None or (want is not None and t != want):
            raise OptgenSyntaxError(f"expected {want or 'a token'}, found {t or 'end of input'}")
        self.i += 1
        return t

    def item(self) -> Item:
        t = self.peek()
        if t == "(":
            return self.node()
        if t == "[":
            self.take("[")
            self.take("]")
            return Atom("[]")
        t = self.take()
        if t.startswith("$"):
            if t.endswith(":*"):
                cap = Capture(t[1:-2])
            elif t.endswith(":"):
                cap = Capture(t[1:-1], self.node())
            else:
                return Ref(t[1:])
            if self.peek() == "&":
                self.take("&")
                cap.guard = self.node()
            return cap
        if t in ("(", ")", "&", "=>", ","):
            raise OptgenSyntaxError(f"unexpected {t}")
        return Atom(t)

    def node(self) -> Node:
        self.take("(")
        head = self.take()
        if not re.fullmatch(r"[A-Za-z_]\w*", head):
            raise OptgenSyntaxError(f"bad operator name {head}")
        items = []
        while self.peek() != ")":
            if self.peek() is None:
                raise OptgenSyntaxError("unbalanced parentheses")
            items.append(self.item())
        self.take(")")
        return Node(head, items)


def read_optgen(text: str) -> OptgenRule:
    r = _Reader(optgen_tokens(text))
    r.take("[")
    names = [r.take()]
    while r.peek() == ",":
        r.take(",")
        names.append(r.take())
    r.take("]")
    match = r.node()
    r.take("=>")
    replace = r.item()
    if r.peek() is not None:
        raise OptgenSyntaxError(f"trailing input at {r.peek()}")
    guards: List[Node] = []
    _guards_in(match, guards)
    helpers: set = set()
    _helpers_in(match, helpers)
    _helpers_in(replace, helpers)
    return OptgenRule(names[0], tuple(names[1:]), match, replace, guards, tuple(sorted(helpers)))


def check_bindings(text: str) -> OptgenRule:
    """Parse ``text`` and check that every ``$var`` is captured before it is used."""
    rule = read_optgen(text)
    bound: set = set()

    def walk(item: Item, matching: bool):
        if isinstance(item, Capture):
            if not matching:
                raise OptgenSyntaxError(f"capture ${item.name} in replace")
            if item.name in bound:
                raise OptgenSyntaxError(f"${item.name} captured twice")
            if item.inner:
                walk(item.inner, matching)
            bound.add(item.name)
            if item.guard:
                walk(item.guard, matching)
        elif isinstance(item, Ref):
            if item.name not in bound:
                raise OptgenSyntaxError(f"${item.name} used before it is bound")
        elif isinstance(item, Node):
            if item.head in HELPERS or item.head[0].isupper():
                for i in item.items:
                    walk(i, matching)

    walk(rule.match, True)
    walk(rule.replace, False)
    return rule
