"""Random model documents for round-trip fuzzing."""
from __future__ import annotations

import random

BEHAVIORS = [
    ("add", lambda r: f"amount={r.randint(-9, 9)}"),
    ("mul", lambda r: f"factor={r.choice(['2', '0.5', '-3'])}"),
    ("identity", lambda r: ""),
    ("neg", lambda r: ""),
    ("filter", lambda r: f'field="value", op="{r.choice(["gt", "lt", "eq"])}", value={r.randint(-5, 5)}'),
    ("ewma", lambda r: f'field="value", alpha={r.choice(["0.25", "0.5", "1"])}'),
    ("sma", lambda r: f'field="value", window={r.randint(1, 6)}'),
    ("delay", lambda r: f"ticks={r.randint(0, 3)}"),
]
FUNCS = [("abs", 1), ("sqrt", 1), ("max", 2), ("min", 2), ("spread", 2), ("midprice", 2)]


def ws(r: random.Random) -> str:
    return r.choice(["", " ", "  ", "\t"])


def processor(r: random.Random, aliases: set) -> str:
    name, args = r.choice(BEHAVIORS)
    a = args(r)
    text = name + (f"({a})" if a or r.random() < 0.3 else "")
    if r.random() < 0.2:
        alias = f"n{len(aliases)}"
        aliases.add(alias)
        text += f" as {alias}"
    return text


def op(r: random.Random) -> str:
    return r.choice(["|>", "|>", "~>", f"~>({r.randint(1, 64)})"])


def body(r: random.Random, aliases: set, depth: int) -> str:
    parts = [element(r, aliases, depth)]
    for _ in range(r.randint(0, 2)):
        parts += [op(r), element(r, aliases, depth)]
    return f"{ws(r)} ".join(parts)


def element(r: random.Random, aliases: set, depth: int) -> str:
    roll = r.random()
    if depth < 2 and roll < 0.12:
        branches = [body(r, aliases, depth + 1) for _ in range(r.randint(1, 3))]
        sep = r.choice([" ; ", "\n"])
        return f"split(policy=\"{r.choice(['broadcast', 'round_robin'])}\") {{ {sep.join(branches)} }} join"
    if depth < 2 and roll < 0.2:
        return f"feedback(fuel={r.randint(1, 4)}, lt={r.randint(0, 9)}) {{ {body(r, aliases, depth + 1)} }}"
    return processor(r, aliases)


def expr(r: random.Random, depth: int = 0) -> str:
    roll = r.random()
    if depth > 2 or roll < 0.3:
        return r.choice(["a", "b", "c", "bid", "ask", str(r.randint(0, 99)), "1.5", "2e3"])
    if roll < 0.45:
        return f"-{expr(r, depth + 1)}"
    if roll < 0.6:
        return f"({expr(r, depth + 1)})"
    if roll < 0.75:
        name, arity = r.choice(FUNCS)
        return f"{name}({', '.join(expr(r, depth + 1) for _ in range(arity))})"
    return f"{expr(r, depth + 1)}{ws(r)}{r.choice('+-*/')}{ws(r)}{expr(r, depth + 1)}"


def document(seed: int) -> str:
    r = random.Random(seed)
    lines, aliases = [], set()
    if r.random() < 0.4:
        lines.append(f"set seed = {r.randint(0, 1000)}")
    for i in range(r.randint(1, 3)):
        lines.append(f'source "in{i}"{ws(r)} ->{ws(r)} {body(r, aliases, 0)} {op(r)} sink "out{i}"')
    for i in range(r.randint(0, 2)):
        lines.append(f"f{i} := {expr(r)}")
    if r.random() < 0.3:
        lines.append(f'bind "in0" = "data{r.randint(0, 9)}.csv"')
    return "\n".join(lines) + "\n"
