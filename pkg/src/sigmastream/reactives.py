"""Spreadsheet-like time-varying values.

Formulas are declared over behaviors; every operator and catalog function is
lifted implicitly. Setting a source pushes the change through its dependents
in topological order, recomputing each exactly once.
"""
from __future__ import annotations

import math
import operator
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping


class ReactiveError(ValueError):
    pass


class _Unset:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNSET"

    def __bool__(self):
        return False


UNSET = _Unset()


# -- expressions ----------------------------------------------------------------


class Expr:
    """Formula node. Python operators build lifted expressions."""

    def _bin(self, op, other, flip=False):
        other = as_expr(other)
        return BinOp(op, other, self) if flip else BinOp(op, self, other)

    def __add__(self, o): return self._bin("+", o)
    def __radd__(self, o): return self._bin("+", o, True)
    def __sub__(self, o): return self._bin("-", o)
    def __rsub__(self, o): return self._bin("-", o, True)
    def __mul__(self, o): return self._bin("*", o)
    def __rmul__(self, o): return self._bin("*", o, True)
    def __truediv__(self, o): return self._bin("/", o)
    def __rtruediv__(self, o): return self._bin("/", o, True)
    def __neg__(self): return Neg(self)

    def refs(self) -> list[str]:
        return []


@dataclass(frozen=True, eq=True)
class Const(Expr):
    value: Any


@dataclass(frozen=True, eq=True)
class Ref(Expr):
    name: str

    def refs(self):
        return [self.name]


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def refs(self):
        return self.left.refs() + self.right.refs()


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    operand: Expr

    def refs(self):
        return self.operand.refs()


@dataclass(frozen=True, eq=True)
class Call(Expr):
    function: str
    args: tuple[Expr, ...]

    def refs(self):
        return [r for a in self.args for r in a.refs()]


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    return Const(value)


OPERATORS: dict[str, Callable] = {
    "+": operator.add,
    "-": operator.sub,
    "*": operator.mul,
    "/": operator.truediv,
}


@dataclass(frozen=True)
class LiftedFunction:
    """``f'`` over behaviors; resolving at a step applies ``f`` to sampled values."""

    name: str
    fn: Callable
    arity: int

    def __call__(self, *args):
        if len(args) != self.arity:
            raise ReactiveError(f"{self.name} takes {self.arity} arguments, got {len(args)}")
        return Call(self.name, tuple(as_expr(a) for a in args))

    def resolve(self, *values):
        return self.fn(*values)


def ewma_update(previous, value, alpha):
    return alpha * value + (1 - alpha) * previous


FUNCTIONS: dict[str, LiftedFunction] = {}


def lift(fn: Callable, name: str | None = None, arity: int | None = None) -> LiftedFunction:
    """Register ``fn`` in the function catalog and return its lifted form."""
    name = name or fn.__name__
    if arity is None:
        arity = fn.__code__.co_argcount
    lifted = LiftedFunction(name, fn, arity)
    FUNCTIONS[name] = lifted
    return lifted


for _name, _fn, _arity in [
    ("identity", lambda x: x, 1),
    ("add", operator.add, 2),
    ("sub", operator.sub, 2),
    ("mul", operator.mul, 2),
    ("div", operator.truediv, 2),
    ("neg", operator.neg, 1),
    ("abs", abs, 1),
    ("min", min, 2),
    ("max", max, 2),
    ("sqrt", math.sqrt, 1),
    ("midprice", lambda bid, ask: (bid + ask) / 2, 2),
    ("spread", lambda bid, ask: ask - bid, 2),
    ("ewma_update", ewma_update, 3),
]:
    lift(_fn, _name, _arity)


def evaluate(expr: Expr, values: Mapping[str, Any]):
    """Evaluate with sampled values; any Unset input yields UNSET."""
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Ref):
        return values.get(expr.name, UNSET)
    if isinstance(expr, Neg):
        v = evaluate(expr.operand, values)
        return UNSET if v is UNSET else -v
    if isinstance(expr, BinOp):
        a = evaluate(expr.left, values)
        b = evaluate(expr.right, values)
        if a is UNSET or b is UNSET:
            return UNSET
        return OPERATORS[expr.op](a, b)
    if isinstance(expr, Call):
        fn = FUNCTIONS.get(expr.function)
        if fn is None:
            raise ReactiveError(f"unknown function {expr.function!r}")
        args = [evaluate(a, values) for a in expr.args]
        if any(a is UNSET for a in args):
            return UNSET
        return fn.resolve(*args)
    raise ReactiveError(f"not an expression: {expr!r}")


def check_functions(expr: Expr) -> None:
    if isinstance(expr, Call):
        fn = FUNCTIONS.get(expr.function)
        if fn is None:
            raise ReactiveError(f"unknown function {expr.function!r}")
        if len(expr.args) != fn.arity:
            raise ReactiveError(f"{expr.function} takes {fn.arity} arguments, got {len(expr.args)}")
        for a in expr.args:
            check_functions(a)
    elif isinstance(expr, BinOp):
        check_functions(expr.left)
        check_functions(expr.right)
    elif isinstance(expr, Neg):
        check_functions(expr.operand)


# -- behaviors -----------------------------------------------------------------


@dataclass(eq=False)
class Behavior(Expr):
    id: str
    value: Any = UNSET
    last_update: int = -1
    dependents: list[str] = field(default_factory=list)
    formula: Expr | None = None

    def refs(self):
        return [self.id]

    @property
    def is_source(self) -> bool:
        return self.formula is None

    def __repr__(self):
        return f"Behavior({self.id}={self.value!r})"


def _ref_of(x) -> Expr:
    if isinstance(x, Behavior):
        return Ref(x.id)
    return x


def _normalize(expr: Expr) -> Expr:
    """Replace embedded Behavior objects by name references."""
    if isinstance(expr, Behavior):
        return Ref(expr.id)
    if isinstance(expr, BinOp):
        return BinOp(expr.op, _normalize(expr.left), _normalize(expr.right))
    if isinstance(expr, Neg):
        return Neg(_normalize(expr.operand))
    if isinstance(expr, Call):
        return Call(expr.function, tuple(_normalize(a) for a in expr.args))
    return expr


class ReactiveGraph:
    """Dependency graph of behaviors with push-based, glitch-free propagation."""

    def __init__(self):
        self.behaviors: dict[str, Behavior] = {}
        self.step = 0
        self.recomputes: Counter[str] = Counter()
        self.errors: dict[str, Exception] = {}
        self._order: list[str] | None = None
        self._observers: dict[str, list[Callable[[str, Any], None]]] = {}
        self.lock = threading.RLock()

    def __contains__(self, name: str) -> bool:
        return name in self.behaviors

    def __getitem__(self, name: str) -> Behavior:
        return self.behaviors[name]

    def source(self, name: str, value: Any = UNSET) -> Behavior:
        with self.lock:
            b = self.behaviors.get(name)
            if b is None:
                b = self.behaviors[name] = Behavior(name)
                self._order = None
            elif not b.is_source:
                raise ReactiveError(f"{name!r} is defined by a formula")
        if value is not UNSET:
            self.set(name, value)
        return b

    def define(self, name: str, formula: Expr | str) -> Behavior:
        """Declare ``name := formula``; unknown referenced names become sources."""
        if isinstance(formula, str):
            from .dsl import parse_expression
            formula = parse_expression(formula)
        formula = _normalize(as_expr(formula))
        check_functions(formula)
        with self.lock:
            existing = self.behaviors.get(name)
            if existing is not None and not existing.is_source:
                raise ReactiveError(f"{name!r} already has a formula")
            refs = list(dict.fromkeys(formula.refs()))
            if name in refs or any(name in self._upstream(r) for r in refs if r in self.behaviors):
                raise ReactiveError(f"cycle: {name!r} would depend on itself")
            for r in refs:
                if r not in self.behaviors:
                    self.behaviors[r] = Behavior(r)
            b = existing or Behavior(name)
            b.formula = formula
            self.behaviors[name] = b
            for r in refs:
                deps = self.behaviors[r].dependents
                if name not in deps:
                    deps.append(name)
            self._order = None
            self._recompute(name)
            return b

    def _upstream(self, name: str) -> set[str]:
        seen: set[str] = set()
        stack = [name]
        while stack:
            n = stack.pop()
            b = self.behaviors.get(n)
            if b is None or b.formula is None:
                continue
            for r in b.formula.refs():
                if r not in seen:
                    seen.add(r)
                    stack.append(r)
        return seen

    def topological_order(self) -> list[str]:
        if self._order is None:
            indeg = {n: 0 for n in self.behaviors}
            for b in self.behaviors.values():
                for d in b.dependents:
                    indeg[d] += 1
            ready = [n for n, d in indeg.items() if d == 0]
            order = []
            while ready:
                n = ready.pop(0)
                order.append(n)
                for d in self.behaviors[n].dependents:
                    indeg[d] -= 1
                    if indeg[d] == 0:
                        ready.append(d)
            self._order = order
        return self._order

    def _values(self) -> dict[str, Any]:
        return {n: b.value for n, b in self.behaviors.items()}

    def _recompute(self, name: str) -> bool:
        b = self.behaviors[name]
        values = {r: self.behaviors[r].value for r in b.formula.refs()}
        if any(v is UNSET for v in values.values()):
            b.value = UNSET
            return False
        try:
            b.value = evaluate(b.formula, values)
            self.errors.pop(name, None)
        except Exception as exc:  # formula failure leaves the cell Unset
            b.value = UNSET
            self.errors[name] = exc
            return False
        b.last_update = self.step
        self.recomputes[name] += 1
        return True

    def set(self, target: Behavior | str, value: Any) -> list[str]:
        """Set a source and propagate; returns the recomputed behaviors in order."""
        name = target.id if isinstance(target, Behavior) else target
        with self.lock:
            b = self.behaviors.get(name)
            if b is None:
                b = self.source(name)
            if not b.is_source:
                raise ReactiveError(f"cannot set formula-defined behavior {name!r}")
            self.step += 1
            b.value = value
            b.last_update = self.step
            receipt = [name]
            dirty = self._downstream(name)
            for n in self.topological_order():
                if n in dirty and self._recompute(n):
                    receipt.append(n)
            notify = [(n, self.behaviors[n].value) for n in receipt]
        for n, v in notify:
            for cb in self._observers.get(n, ()):
                cb(n, v)
        return receipt

    def _downstream(self, name: str) -> set[str]:
        seen: set[str] = set()
        stack = list(self.behaviors[name].dependents)
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self.behaviors[n].dependents)
        return seen

    def sample(self, target: Behavior | str) -> Any:
        name = target.id if isinstance(target, Behavior) else target
        b = self.behaviors.get(name)
        if b is None:
            raise ReactiveError(f"unknown behavior {name!r}")
        if b.value is UNSET:
            raise ReactiveError(f"behavior {name!r} is unset")
        return b.value

    def observe(self, name: str, callback: Callable[[str, Any], None]) -> None:
        self._observers.setdefault(name, []).append(callback)

    def values(self) -> dict[str, Any]:
        """Immutable snapshot of current values."""
        with self.lock:
            return dict(self._values())

    def recompute_all(self) -> dict[str, Any]:
        """Reference values computed from sources alone, ignoring cached results."""
        values = {n: b.value for n, b in self.behaviors.items() if b.is_source}
        for n in self.topological_order():
            b = self.behaviors[n]
            if b.formula is not None:
                try:
                    values[n] = evaluate(b.formula, values)
                except Exception:
                    values[n] = UNSET
        return values

    def formulas(self) -> dict[str, Expr]:
        return {n: b.formula for n, b in self.behaviors.items() if b.formula is not None}
