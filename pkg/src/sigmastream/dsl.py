"""Textual model notation.

Grammar (EBNF; newlines separate statements and are ignored inside
parentheses and after an operator)::

    document   = { statement ( NEWLINE | ";" ) } ;
    statement  = directive | binding | formula | chain ;
    directive  = "set" IDENT "=" literal ;
    binding    = "bind" STRING "=" STRING ;
    formula    = IDENT ":=" expr ;
    chain      = element { op element } ;
    op         = "->" | "|>" | "~>" [ "(" INT ")" ] ;
    element    = "source" STRING [ alias ]
               | "sink" STRING [ alias ]
               | "@" IDENT
               | "split" [ args ] [ alias ] "{" branches "}" "join" [ args ] [ alias ]
               | "feedback" args [ alias ] "{" chain "}"
               | "template" STRING [ args ] [ alias ] "{" chain "}"
               | IDENT [ args ] [ alias ] ;
    branches   = chain { ( ";" | NEWLINE ) chain } ;
    args       = "(" [ IDENT "=" literal { "," IDENT "=" literal } ] ")" ;
    alias      = "as" IDENT ;
    literal    = [ "-" ] NUMBER | STRING | "true" | "false" | "$" IDENT ;
    expr       = term { ( "+" | "-" ) term } ;
    term       = unary { ( "*" | "/" ) unary } ;
    unary      = "-" unary | primary ;
    primary    = NUMBER | IDENT | IDENT "(" [ expr { "," expr } ] ")" | "(" expr ")" ;

``->`` and ``|>`` are synchronous edges, ``~>`` asynchronous (queue
capacity in parentheses, default 1024). Processors without ``as`` get the
behavior name as id, suffixed ``_2``, ``_3``... on repeats.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterator, NamedTuple, Sequence

from . import behaviors
from .graph import (
    DEFAULT_QUEUE_CAPACITY,
    SYNC,
    Edge,
    GraphError,
    Kind,
    ProcessorSpec,
    StreamGraph,
    SubgraphTemplate,
    SynchronicityMode,
    canonical_json,
    validate,
)
from .reactives import FUNCTIONS, BinOp, Call, Const, Expr, Neg, ReactiveError, ReactiveGraph, Ref

KEYWORDS = {"source", "sink", "split", "join", "feedback", "template", "set", "bind", "as", "true", "false"}
DIRECTIVES = {"seed", "period", "scale", "t0", "horizon", "pool", "mode"}
ELEMENT_START = frozenset({"IDENT", "source", "sink", "split", "feedback", "template", "@"})
OPS = ("->", "|>", "~>")
COMPARISONS = ("gt", "ge", "lt", "le", "eq", "ne")


class DslError(ValueError):
    def __init__(self, message: str, line: int, col: int, expected: Sequence[str] = ()):
        self.message = message
        self.line = line
        self.col = col
        self.expected = tuple(sorted(set(expected)))
        text = f"{line}:{col}: {message}"
        if self.expected:
            text += f" (expected one of: {', '.join(self.expected)})"
        super().__init__(text)


# -- lexer ---------------------------------------------------------------------


class Token(NamedTuple):
    kind: str  # IDENT, STRING, NUMBER, PARAM, NEWLINE, EOF, or the literal symbol/keyword
    text: str
    value: Any
    line: int
    col: int


_TOKEN = re.compile(r"""
    [ \t\r]*(?:\#[^\n]*)?
    (?:
    (?P<newline>\n)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<param>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<string>")
  | (?P<op>->|\|>|~>|:=|[=(){},;@+\-*/])
  | (?P<end>\Z)
    )
""", re.VERBOSE)

_SKIP = re.compile(r"[ \t\r]*(?:\#[^\n]*)?")
_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t"}


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start, depth = 0, 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            pos = _SKIP.match(text, pos).end()
            raise DslError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1, ["token"])
        kind = m.lastgroup
        pos = m.start(kind)
        col = pos - line_start + 1
        if kind == "end":
            break
        if kind == "string":
            value, end, lines, last_nl = _read_string(text, pos, line, col)
            tokens.append(Token("STRING", text[pos:end], value, line, col))
            if lines:
                line += lines
                line_start = last_nl + 1
            pos = end
            continue
        s = m.group(kind)
        pos = m.end()
        if kind == "newline":
            if depth == 0:
                tokens.append(Token("NEWLINE", "\n", None, line, col))
            line += 1
            line_start = pos
        elif kind == "number":
            value = float(s) if any(c in s for c in ".eE") else int(s)
            tokens.append(Token("NUMBER", s, value, line, col))
        elif kind == "param":
            tokens.append(Token("PARAM", s, s, line, col))
        elif kind == "ident":
            tokens.append(Token(s if s in KEYWORDS else "IDENT", s, s, line, col))
        else:
            if s == "(":
                depth += 1
            elif s == ")":
                depth = max(0, depth - 1)
            tokens.append(Token(s, s, s, line, col))
    tokens.append(Token("EOF", "", None, line, pos - line_start + 1))
    return tokens


def _read_string(text: str, start: int, line: int, col: int) -> tuple[str, int, int, int]:
    out = []
    i = start + 1
    while i < len(text):
        ch = text[i]
        if ch == '"':
            return "".join(out), i + 1, 0, 0
        if ch == "\n":
            break
        if ch == "\\":
            nxt = text[i + 1:i + 2]
            if nxt not in _ESCAPES:
                raise DslError(f"bad escape \\{nxt}", line, col + (i - start), ["escape"])
            out.append(_ESCAPES[nxt])
            i += 2
            continue
        out.append(ch)
        i += 1
    raise DslError("unterminated string", line, col, ['"'])


def quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t") + '"'


# -- syntax tree ---------------------------------------------------------------------


@dataclass
class Op:
    symbol: str  # "->", "|>" or "~>"
    capacity: int | None = None
    line: int = 0
    col: int = 0

    @property
    def mode(self) -> SynchronicityMode:
        if self.symbol == "~>":
            return SynchronicityMode.async_(self.capacity or DEFAULT_QUEUE_CAPACITY)
        return SYNC


@dataclass
class Element:
    line: int
    col: int


@dataclass
class ProcNode(Element):
    behavior: str
    args: list[tuple[str, Any]] = field(default_factory=list)
    alias: str | None = None
    id: str = ""


@dataclass
class EndpointNode(Element):
    role: str  # "source" or "sink"
    endpoint: str = ""
    alias: str | None = None
    id: str = ""


@dataclass
class RefNode(Element):
    target: str = ""


@dataclass
class Chain:
    elements: list[Element]
    ops: list[Op]


@dataclass
class SplitNode(Element):
    args: list[tuple[str, Any]] = field(default_factory=list)
    alias: str | None = None
    branches: list[Chain] = field(default_factory=list)
    join_args: list[tuple[str, Any]] = field(default_factory=list)
    join_alias: str | None = None
    id: str = ""
    join_id: str = ""


@dataclass
class FeedbackNode(Element):
    args: list[tuple[str, Any]] = field(default_factory=list)
    alias: str | None = None
    body: Chain | None = None
    id: str = ""


@dataclass
class TemplateNode(Element):
    key: str = ""
    args: list[tuple[str, Any]] = field(default_factory=list)
    alias: str | None = None
    body: Chain | None = None
    id: str = ""


@dataclass
class Directive:
    name: str
    value: Any
    line: int = 0
    col: int = 0


@dataclass
class Binding:
    endpoint: str
    path: str
    line: int = 0
    col: int = 0


@dataclass
class Formula:
    name: str
    expr: Expr
    line: int = 0
    col: int = 0


Statement = Directive | Binding | Formula | Chain


# -- parser ----------------------------------------------------------------------


class Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def advance(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def error(self, expected: Sequence[str], what: str | None = None) -> DslError:
        t = self.tok
        found = "end of input" if t.kind == "EOF" else ("newline" if t.kind == "NEWLINE" else repr(t.text))
        return DslError(what or f"unexpected {found}", t.line, t.col, expected)

    def expect(self, kind: str) -> Token:
        if self.tok.kind != kind:
            raise self.error([kind])
        return self.advance()

    def skip_newlines(self) -> None:
        while self.tok.kind == "NEWLINE":
            self.advance()

    # document

    def document(self) -> list[Statement]:
        stmts: list[Statement] = []
        while True:
            while self.tok.kind in ("NEWLINE", ";"):
                self.advance()
            if self.tok.kind == "EOF":
                return stmts
            stmts.append(self.statement())
            if self.tok.kind not in ("NEWLINE", ";", "EOF"):
                raise self.error(["NEWLINE", ";", "EOF", *OPS])

    def statement(self) -> Statement:
        t = self.tok
        if t.kind == "set":
            self.advance()
            name = self.expect("IDENT")
            if name.text not in DIRECTIVES:
                raise DslError(f"unknown directive {name.text!r}", name.line, name.col, sorted(DIRECTIVES))
            self.expect("=")
            return Directive(name.text, self.literal(), t.line, t.col)
        if t.kind == "bind":
            self.advance()
            endpoint = self.expect("STRING").value
            self.expect("=")
            return Binding(endpoint, self.expect("STRING").value, t.line, t.col)
        if t.kind == "IDENT" and self.peek().kind == ":=":
            self.advance()
            self.advance()
            return Formula(t.text, self.expr(), t.line, t.col)
        if t.kind in ELEMENT_START:
            return self.chain()
        raise self.error(sorted(ELEMENT_START | {"set", "bind"}))

    def chain(self) -> Chain:
        elements = [self.element()]
        ops: list[Op] = []
        while self.tok.kind in OPS:
            op = self.advance()
            capacity = None
            if op.kind == "~>" and self.tok.kind == "(":
                self.advance()
                cap = self.expect("NUMBER")
                if not isinstance(cap.value, int) or cap.value < 1:
                    raise DslError("queue capacity must be a positive integer", cap.line, cap.col, ["INT"])
                capacity = cap.value
                self.expect(")")
            ops.append(Op(op.kind, capacity, op.line, op.col))
            self.skip_newlines()
            elements.append(self.element())
        return Chain(elements, ops)

    def alias(self) -> str | None:
        if self.tok.kind == "as":
            self.advance()
            return self.expect("IDENT").text
        return None

    def element(self) -> Element:
        t = self.tok
        if t.kind in ("source", "sink"):
            self.advance()
            name = self.expect("STRING").value
            return EndpointNode(t.line, t.col, t.kind, name, self.alias())
        if t.kind == "@":
            self.advance()
            return RefNode(t.line, t.col, self.expect("IDENT").text)
        if t.kind == "split":
            self.advance()
            args = self.args() if self.tok.kind == "(" else []
            alias = self.alias()
            self.expect("{")
            branches = self.branches()
            self.expect("}")
            self.expect("join")
            join_args = self.args() if self.tok.kind == "(" else []
            return SplitNode(t.line, t.col, args, alias, branches, join_args, self.alias())
        if t.kind == "feedback":
            self.advance()
            args = self.args()
            alias = self.alias()
            body = self.block()
            return FeedbackNode(t.line, t.col, args, alias, body)
        if t.kind == "template":
            self.advance()
            key = self.expect("STRING").value
            args = self.args() if self.tok.kind == "(" else []
            alias = self.alias()
            body = self.block()
            return TemplateNode(t.line, t.col, key, args, alias, body)
        if t.kind == "IDENT":
            self.advance()
            args = self.args() if self.tok.kind == "(" else []
            return ProcNode(t.line, t.col, t.text, args, self.alias())
        raise self.error(sorted(ELEMENT_START))

    def block(self) -> Chain:
        self.expect("{")
        self.skip_newlines()
        body = self.chain()
        self.skip_newlines()
        self.expect("}")
        return body

    def branches(self) -> list[Chain]:
        out = []
        while True:
            while self.tok.kind in ("NEWLINE", ";"):
                self.advance()
            if self.tok.kind == "}" and out:
                return out
            out.append(self.chain())
            if self.tok.kind not in ("NEWLINE", ";", "}"):
                raise self.error(["NEWLINE", ";", "}", *OPS])

    def args(self) -> list[tuple[str, Any]]:
        self.expect("(")
        out: list[tuple[str, Any]] = []
        seen = set()
        if self.tok.kind == ")":
            self.advance()
            return out
        while True:
            name = self.tok
            if name.kind != "IDENT":
                raise self.error(["IDENT"])
            self.advance()
            if name.text in seen:
                raise DslError(f"duplicate argument {name.text!r}", name.line, name.col)
            seen.add(name.text)
            self.expect("=")
            out.append((name.text, self.literal()))
            if self.tok.kind == ")":
                self.advance()
                return out
            if self.tok.kind != ",":
                raise self.error([",", ")"])
            self.advance()

    def literal(self):
        t = self.tok
        if t.kind == "-" and self.peek().kind == "NUMBER":
            self.advance()
            return -self.advance().value
        if t.kind in ("NUMBER", "STRING", "PARAM"):
            return self.advance().value
        if t.kind in ("true", "false"):
            self.advance()
            return t.kind == "true"
        raise self.error(["NUMBER", "STRING", "PARAM", "true", "false", "-"])

    # expressions: precedence climbing

    PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}

    def expr(self, min_prec: int = 1) -> Expr:
        left = self.unary()
        while self.tok.kind in self.PRECEDENCE and self.PRECEDENCE[self.tok.kind] >= min_prec:
            op = self.advance().kind
            right = self.expr(self.PRECEDENCE[op] + 1)
            left = BinOp(op, left, right)
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "-":
            self.advance()
            if self.tok.kind == "NUMBER":
                return Const(-self.advance().value)
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "NUMBER":
            self.advance()
            return Const(t.value)
        if t.kind == "IDENT":
            self.advance()
            if self.tok.kind != "(":
                return Ref(t.text)
            self.advance()
            args: list[Expr] = []
            if self.tok.kind != ")":
                args.append(self.expr())
                while self.tok.kind == ",":
                    self.advance()
                    args.append(self.expr())
            self.expect(")")
            fn = FUNCTIONS.get(t.text)
            if fn is None:
                raise DslError(f"unknown function {t.text!r}", t.line, t.col, sorted(FUNCTIONS))
            if len(args) != fn.arity:
                raise DslError(f"{t.text} takes {fn.arity} arguments, got {len(args)}", t.line, t.col)
            return Call(t.text, tuple(args))
        if t.kind == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        raise self.error(["NUMBER", "IDENT", "(", "-"])


def parse_expression(text: str) -> Expr:
    p = Parser(text)
    p.skip_newlines()
    e = p.expr()
    p.skip_newlines()
    if p.tok.kind != "EOF":
        raise p.error(["EOF", "+", "-", "*", "/"])
    return e


# -- graph construction ------------------------------------------------------------------


@dataclass
class ModelDocument:
    text: str
    statements: list[Statement]
    graph: StreamGraph
    formulas: list[tuple[str, Expr]]
    directives: dict[str, Any]
    bindings: dict[str, str]

    def reactive_graph(self) -> ReactiveGraph:
        rg = ReactiveGraph()
        for name, expr in self.formulas:
            rg.define(name, expr)
        return rg

    def canonical(self) -> str:
        """Canonical serialization of everything the document denotes."""
        return canonical_json({
            "graph": self.graph.to_dict(),
            "formulas": [[n, expr_to_dict(e)] for n, e in self.formulas],
            "directives": self.directives,
            "bindings": self.bindings,
        })


def expr_to_dict(e: Expr) -> Any:
    if isinstance(e, Const):
        return {"const": e.value}
    if isinstance(e, Ref):
        return {"ref": e.name}
    if isinstance(e, BinOp):
        return {"op": e.op, "args": [expr_to_dict(e.left), expr_to_dict(e.right)]}
    if isinstance(e, Neg):
        return {"op": "neg", "args": [expr_to_dict(e.operand)]}
    if isinstance(e, Call):
        return {"call": e.function, "args": [expr_to_dict(a) for a in e.args]}
    raise TypeError(e)


class _Ids:
    """Id allocation shared by the parser's builder and the formatter."""

    def __init__(self):
        self.taken: set[str] = set()

    def auto(self, base: str) -> str:
        if base not in self.taken:
            return base
        n = 2
        while f"{base}_{n}" in self.taken:
            n += 1
        return f"{base}_{n}"

    def claim(self, ident: str, el: Element) -> str:
        if ident in self.taken:
            raise DslError(f"duplicate node id {ident!r}", el.line, el.col)
        self.taken.add(ident)
        return ident

    def assign(self, base: str, alias: str | None, el: Element) -> str:
        return self.claim(alias if alias else self.auto(base), el)


def _split_args(args: list[tuple[str, Any]], el: Element, consumed: Sequence[str]) -> tuple[dict, dict]:
    params, extra = {}, {}
    for k, v in args:
        (extra if k in consumed else params)[k] = v
    cap = extra.get("capacity")
    if cap is not None and (not isinstance(cap, int) or isinstance(cap, bool) or cap < 1):
        raise DslError("capacity must be a positive integer", el.line, el.col)
    return params, extra


class _Builder:
    def __init__(self, ids: _Ids):
        self.ids = ids
        self.nodes: list[ProcessorSpec] = []
        self.edges: list[Edge] = []
        self.sources: list[str] = []
        self.sinks: list[str] = []
        self.where: dict[str, Element] = {}
        self.refs: list[RefNode] = []

    def add(self, spec: ProcessorSpec, el: Element) -> None:
        self.nodes.append(spec)
        self.where[spec.id] = el

    def chain(self, chain: Chain, top: bool, in_template: bool = False) -> tuple[list[str], list[str]]:
        first_entry: list[str] = []
        exits: list[str] = []
        last = len(chain.elements) - 1
        for i, el in enumerate(chain.elements):
            if isinstance(el, EndpointNode) and el.role == "source" and (i != 0 or not top):
                raise DslError("a source must start a top-level chain", el.line, el.col)
            if isinstance(el, EndpointNode) and el.role == "sink" and i != last:
                raise DslError("a sink must end its chain", el.line, el.col)
            if isinstance(el, TemplateNode) and i != last:
                raise DslError("a template must end its chain", el.line, el.col)
            if isinstance(el, TemplateNode) and in_template:
                raise DslError("templates cannot nest", el.line, el.col)
            entry, out = self.element(el, in_template)
            if i == 0:
                first_entry = entry
            else:
                mode = chain.ops[i - 1].mode
                self.edges.extend(Edge(a, b, mode) for a in exits for b in entry)
            exits = out
        return first_entry, exits

    def element(self, el: Element, in_template: bool) -> tuple[list[str], list[str]]:
        if isinstance(el, RefNode):
            if in_template:
                raise DslError("references cannot appear inside a template", el.line, el.col)
            self.refs.append(el)
            return [el.target], [el.target]
        if isinstance(el, EndpointNode):
            el.id = self.ids.assign(el.role, el.alias, el)
            self.add(ProcessorSpec(el.id, Kind.HANDLER, el.role, {"endpoint": el.endpoint}), el)
            (self.sources if el.role == "source" else self.sinks).append(el.id)
            return [el.id], [el.id]
        if isinstance(el, ProcNode):
            if el.behavior not in behaviors.CATALOG or el.behavior in ("source", "sink"):
                raise DslError(f"unknown behavior {el.behavior!r}", el.line, el.col,
                               sorted(set(behaviors.CATALOG) - {"source", "sink", "split", "join", "fb_split", "fb_join"}))
            el.id = self.ids.assign(el.behavior, el.alias, el)
            kind = behaviors.lookup(el.behavior).kind
            self.add(ProcessorSpec(el.id, kind, el.behavior, dict(el.args)), el)
            return [el.id], [el.id]
        if isinstance(el, SplitNode):
            params, extra = _split_args(el.args, el, ("capacity",))
            mode = SynchronicityMode.async_(extra.get("capacity", DEFAULT_QUEUE_CAPACITY))
            el.id = self.ids.assign("split", el.alias, el)
            self.add(ProcessorSpec(el.id, Kind.CONNECTOR, "split", params), el)
            pending = []
            for branch in el.branches:
                entry, exits = self.chain(branch, top=False, in_template=in_template)
                self.edges.extend(Edge(el.id, b, mode) for b in entry)
                pending.append(exits)
            el.join_id = self.ids.assign("join", el.join_alias, el)
            self.add(ProcessorSpec(el.join_id, Kind.CONNECTOR, "join", dict(el.join_args)), el)
            for exits in pending:
                self.edges.extend(Edge(a, el.join_id, mode) for a in exits)
            return [el.id], [el.join_id]
        if isinstance(el, FeedbackNode):
            return self.feedback(el, in_template)
        if isinstance(el, TemplateNode):
            return self.template(el)
        raise TypeError(el)

    def feedback(self, el: FeedbackNode, in_template: bool) -> tuple[list[str], list[str]]:
        params, extra = _split_args(el.args, el, ("capacity", "fuel", "field", "always", *COMPARISONS))
        if params:
            raise DslError(f"unknown feedback argument {next(iter(params))!r}", el.line, el.col,
                           ["capacity", "fuel", "field", "always", *COMPARISONS])
        fuel = extra.get("fuel")
        if not isinstance(fuel, int) or isinstance(fuel, bool) or fuel < 1:
            raise DslError("feedback needs fuel >= 1", el.line, el.col)
        comparisons = [k for k in COMPARISONS if k in extra]
        if "always" in extra:
            if comparisons or "field" in extra:
                raise DslError("use either always or a comparison", el.line, el.col)
            predicate = {"always": extra["always"]}
        else:
            if len(comparisons) != 1:
                raise DslError("feedback needs exactly one comparison", el.line, el.col, list(COMPARISONS))
            op = comparisons[0]
            predicate = {"field": extra.get("field", "value"), "op": op, "value": extra[op]}
        mode = SynchronicityMode.async_(extra.get("capacity", DEFAULT_QUEUE_CAPACITY))
        el.id = prefix = self.ids.assign("feedback", el.alias, el)
        ids = {part: self.ids.claim(f"{prefix}.{part}", el) for part in ("split", "join", "out", "exhausted")}
        self.add(ProcessorSpec(ids["split"], Kind.CONNECTOR, "fb_split"), el)
        entry, exits = self.chain(el.body, top=False, in_template=in_template)
        self.edges.extend(Edge(ids["split"], b) for b in entry)
        self.edges.extend(Edge(a, ids["join"]) for a in exits)
        params = {"loop_to": ids["split"], "overflow_to": ids["exhausted"], "fuel": fuel, **predicate}
        self.add(ProcessorSpec(ids["join"], Kind.CONNECTOR, "fb_join", params), el)
        self.add(ProcessorSpec(ids["out"], Kind.HANDLER, "identity"), el)
        self.add(ProcessorSpec(ids["exhausted"], Kind.HANDLER, "sink", {"endpoint": ids["exhausted"]}), el)
        self.edges += [
            Edge(ids["join"], ids["split"], mode),
            Edge(ids["join"], ids["out"]),
            Edge(ids["join"], ids["exhausted"]),
        ]
        self.sinks.append(ids["exhausted"])
        return [ids["split"]], [ids["out"]]

    def template(self, el: TemplateNode) -> tuple[list[str], list[str]]:
        el.id = self.ids.assign("template", el.alias, el)
        inner = _Builder(self.ids)
        entry, _ = inner.chain(el.body, top=False, in_template=True)
        if len(entry) != 1:
            raise DslError("a template body needs a single entry node", el.line, el.col)
        if not inner.sinks:
            raise DslError("a template body must end in a sink", el.line, el.col)
        self.where.update(inner.where)
        template = SubgraphTemplate(tuple(inner.nodes), tuple(inner.edges), entry[0], (el.key,))
        params = {"key": el.key, "param": el.key, "predicate": "first_arrival", **dict(el.args)}
        self.add(ProcessorSpec(el.id, Kind.MODIFIER, "modify", params, template), el)
        return [el.id], []


def parse(text: str) -> ModelDocument:
    """Parse, build and check a model document; raises DslError with a position."""
    statements = Parser(text).document()
    builder = _Builder(_Ids())
    formulas: list[tuple[str, Expr]] = []
    directives: dict[str, Any] = {}
    bindings: dict[str, str] = {}
    rg = ReactiveGraph()
    for st in statements:
        if isinstance(st, Chain):
            builder.chain(st, top=True)
        elif isinstance(st, Formula):
            try:
                rg.define(st.name, st.expr)
            except ReactiveError as exc:
                raise DslError(str(exc), st.line, st.col) from None
            formulas.append((st.name, st.expr))
        elif isinstance(st, Directive):
            if st.name in directives:
                raise DslError(f"directive {st.name!r} set twice", st.line, st.col)
            directives[st.name] = st.value
        elif isinstance(st, Binding):
            if st.endpoint in bindings:
                raise DslError(f"endpoint {st.endpoint!r} bound twice", st.line, st.col)
            bindings[st.endpoint] = st.path
    known = {n.id for n in builder.nodes}
    for ref in builder.refs:
        if ref.target not in known:
            raise DslError(f"unknown node {ref.target!r}", ref.line, ref.col, sorted(known))
    graph = StreamGraph(tuple(builder.nodes), tuple(builder.edges), tuple(builder.sources), tuple(builder.sinks))
    if graph.nodes:
        problems = validate(graph)
        if problems:
            line, col = _locate(problems[0], builder.where)
            raise DslError(problems[0], line, col)
    return ModelDocument(text, statements, graph, formulas, directives, bindings)


def _locate(problem: str, where: dict[str, Element]) -> tuple[int, int]:
    for name in re.findall(r"'([^']+)'|(\S+) ->", problem):
        for candidate in name:
            if candidate in where:
                el = where[candidate]
                return el.line, el.col
    for candidate in re.split(r"[\s:>-]+", problem):
        if candidate in where:
            el = where[candidate]
            return el.line, el.col
    return 1, 1


def parse_file(path) -> ModelDocument:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


# -- formatter -------------------------------------------------------------------


def format_literal(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        if re.fullmatch(r"\$[A-Za-z_][A-Za-z0-9_]*", v):
            return v
        return quote(v)
    raise DslError(f"cannot format literal {v!r}", 0, 0)


def format_args(args: Sequence[tuple[str, Any]]) -> str:
    if not args:
        return ""
    return "(" + ", ".join(f"{k}={format_literal(v)}" for k, v in args) + ")"


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def format_expr(e: Expr) -> str:
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Ref):
        return e.name
    if isinstance(e, Neg):
        inner = format_expr(e.operand)
        if isinstance(e.operand, (BinOp, Neg)) or isinstance(e.operand, Const):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Call):
        return f"{e.function}({', '.join(format_expr(a) for a in e.args)})"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        left, right = format_expr(e.left), format_expr(e.right)
        if isinstance(e.left, BinOp) and _PREC[e.left.op] < p:
            left = f"({left})"
        if isinstance(e.right, BinOp) and _PREC[e.right.op] <= p:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    raise TypeError(e)


class _Formatter:
    def __init__(self):
        self.ids = _Ids()

    def alias(self, base: str, ident: str, el: Element) -> str:
        auto = self.ids.auto(base)
        self.ids.claim(ident, el)
        return "" if ident == auto else f" as {ident}"

    def chain(self, chain: Chain, indent: int, top: bool) -> str:
        parts = []
        for i, el in enumerate(chain.elements):
            if i:
                op = chain.ops[i - 1]
                symbol = op.symbol
                if symbol == "->" and not (isinstance(chain.elements[i - 1], EndpointNode)
                                           and chain.elements[i - 1].role == "source"):
                    symbol = "|>"
                elif symbol == "|>" and isinstance(chain.elements[i - 1], EndpointNode) \
                        and chain.elements[i - 1].role == "source":
                    symbol = "->"
                if symbol == "~>" and op.capacity not in (None, DEFAULT_QUEUE_CAPACITY):
                    symbol = f"~>({op.capacity})"
                parts.append(f" {symbol} ")
            parts.append(self.element(el, indent))
        return "".join(parts)

    def element(self, el: Element, indent: int) -> str:
        pad = "  " * (indent + 1)
        end = "  " * indent
        if isinstance(el, RefNode):
            return f"@{el.target}"
        if isinstance(el, EndpointNode):
            return f"{el.role} {quote(el.endpoint)}{self.alias(el.role, el.id, el)}"
        if isinstance(el, ProcNode):
            return f"{el.behavior}{format_args(el.args)}{self.alias(el.behavior, el.id, el)}"
        if isinstance(el, SplitNode):
            head = f"split{format_args(el.args)}{self.alias('split', el.id, el)}"
            branches = [pad + self.chain(b, indent + 1, False) + "\n" for b in el.branches]
            tail = f"join{format_args(el.join_args)}{self.alias('join', el.join_id, el)}"
            return head + " {\n" + "".join(branches) + end + "} " + tail
        if isinstance(el, FeedbackNode):
            head = f"feedback{format_args(el.args)}{self.alias('feedback', el.id, el)}"
            for part in ("split", "join", "out", "exhausted"):
                self.ids.claim(f"{el.id}.{part}", el)
            return head + " {\n" + pad + self.chain(el.body, indent + 1, False) + "\n" + end + "}"
        if isinstance(el, TemplateNode):
            head = f"template {quote(el.key)}{format_args(el.args)}{self.alias('template', el.id, el)}"
            return head + " {\n" + pad + self.chain(el.body, indent + 1, False) + "\n" + end + "}"
        raise TypeError(el)

    def statement(self, st: Statement) -> str:
        if isinstance(st, Directive):
            return f"set {st.name} = {format_literal(st.value)}"
        if isinstance(st, Binding):
            return f"bind {quote(st.endpoint)} = {quote(st.path)}"
        if isinstance(st, Formula):
            return f"{st.name} := {format_expr(st.expr)}"
        return self.chain(st, 0, True)


def format(doc: ModelDocument | str) -> str:  # noqa: A001 - mirrors parse
    """Canonical text: one statement per line, single spaces, blocks indented by two."""
    if isinstance(doc, str):
        doc = parse(doc)
    f = _Formatter()
    return "".join(f.statement(st) + "\n" for st in doc.statements)


def iter_errors(texts: Sequence[str]) -> Iterator[tuple[str, DslError | None]]:
    for t in texts:
        try:
            parse(t)
            yield t, None
        except DslError as exc:
            yield t, exc


def document_graph(text: str) -> StreamGraph:
    return parse(text).graph


def check(text: str) -> list[str]:
    """Problems as ``line:col: message`` strings; empty when the text is a valid model."""
    try:
        parse(text)
    except DslError as exc:
        return [str(exc)]
    except GraphError as exc:
        return [f"1:1: {exc}"]
    return []
