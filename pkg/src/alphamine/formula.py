"""Expression-tree representation of formulaic alphas and its genetic operators.

A formula is a tree whose leaves are base factors (``close``, ``vwap``, ...)
and whose internal nodes apply an operator from a fixed registry. Text form is
prefix notation, e.g. ``div(sub(close,open),sub(high,low))`` or
``ts_corr(close,volume,10)``. Windows are operator parameters written as the
trailing integer argument; they never count as tree nodes.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Sequence, Union

BASE_FACTORS: tuple[str, ...] = ("open", "high", "low", "close", "volume", "vwap")
WINDOWS: tuple[int, ...] = (3, 5, 10, 20, 30, 60)
MAX_DEPTH = 3

ELEMENTWISE_UNARY = "elementwise-unary"
ELEMENTWISE_BINARY = "elementwise-binary"
TS_UNARY = "time-series-unary"
TS_BINARY = "time-series-binary"
CROSS_SECTIONAL = "cross-sectional"
TS_KINDS = (TS_UNARY, TS_BINARY)


@dataclass(frozen=True)
class Operator:
    name: str
    arity: int
    kind: str
    window: int | None = None

    def __post_init__(self) -> None:
        if self.kind in TS_KINDS:
            if self.window is not None and self.window < 2:
                raise ValueError(f"{self.name}: window must be >= 2, got {self.window}")
        elif self.window is not None:
            raise ValueError(f"{self.name} takes no window")

    @property
    def is_time_series(self) -> bool:
        return self.kind in TS_KINDS

    def with_window(self, window: int | None) -> "Operator":
        return Operator(self.name, self.arity, self.kind, window)


def _ops(kind: str, arity: int, *names: str) -> dict[str, Operator]:
    return {n: Operator(n, arity, kind) for n in names}


# Templates carry window=None; concrete tree nodes carry the window.
REGISTRY: dict[str, Operator] = {
    **_ops(ELEMENTWISE_BINARY, 2, "add", "sub", "mul", "div"),
    **_ops(ELEMENTWISE_UNARY, 1, "neg", "abs_", "sign", "log_"),
    **_ops(TS_UNARY, 1, "ts_mean", "ts_std", "ts_min", "ts_max", "ts_rank", "delay", "delta"),
    **_ops(TS_BINARY, 2, "ts_corr"),
    **_ops(CROSS_SECTIONAL, 1, "cs_rank"),
}

# Binary operators that are constant when both arguments are the same subtree.
_SELF_CONSTANT = frozenset({"sub", "div", "ts_corr"})


@dataclass(frozen=True)
class Factor:
    name: str

    @property
    def depth(self) -> int:
        return 0

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Apply:
    op: Operator
    args: tuple["Formula", ...]
    depth: int = field(init=False, compare=False, repr=False)
    _text: str = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.args) != self.op.arity:
            raise ValueError(f"{self.op.name} expects {self.op.arity} args, got {len(self.args)}")
        if self.op.is_time_series and self.op.window is None:
            raise ValueError(f"{self.op.name} needs a window")
        object.__setattr__(self, "depth", 1 + max(a.depth for a in self.args))
        parts = [to_text(a) for a in self.args]
        if self.op.window is not None:
            parts.append(str(self.op.window))
        object.__setattr__(self, "_text", f"{self.op.name}({','.join(parts)})")

    def __hash__(self) -> int:
        return hash(self._text)

    def __str__(self) -> str:
        return self._text


Formula = Union[Factor, Apply]


def make(name: str, *args: Formula | str, window: int | None = None) -> Apply:
    """Build a node from an operator name; string args become factors."""
    op = REGISTRY[name].with_window(window)
    return Apply(op, tuple(Factor(a) if isinstance(a, str) else a for a in args))


def depth(f: Formula) -> int:
    return f.depth


def to_text(f: Formula) -> str:
    return f.name if isinstance(f, Factor) else f._text


def root_genes(f: Formula) -> tuple[Formula, ...]:
    """Immediate children of the root; empty for a bare factor."""
    return f.args if isinstance(f, Apply) else ()


def iter_nodes(f: Formula):
    yield f
    if isinstance(f, Apply):
        for a in f.args:
            yield from iter_nodes(a)


def is_self_constant(f: Formula) -> bool:
    """True when the root combines two identical subtrees into a constant."""
    return isinstance(f, Apply) and f.op.name in _SELF_CONSTANT and f.args[0] == f.args[1]


# ---------------------------------------------------------------------------
# Parsing


class FormulaError(ValueError):
    """Invalid formula text; ``span`` is the offending (start, end) offset range."""

    def __init__(self, message: str, text: str, span: tuple[int, int]):
        self.text = text
        self.span = span
        start, end = span
        super().__init__(f"{message} at {start}:{end} in {text!r}")


class _Parser:
    def __init__(self, text: str, factors: Sequence[str]):
        self.text = text
        self.pos = 0
        self.factors = set(factors)

    def error(self, msg: str, start: int, end: int | None = None) -> FormulaError:
        end = end if end is not None else max(start + 1, self.pos)
        n = len(self.text)
        return FormulaError(msg, self.text, (min(start, n), min(end, n)))

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def word(self) -> tuple[str, int]:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (self.text[self.pos].isalnum() or self.text[self.pos] in "_-+."):
            self.pos += 1
        if start == self.pos:
            raise self.error("expected a name", start)
        return self.text[start:self.pos], start

    def expect(self, ch: str) -> None:
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            found = self.text[self.pos] if self.pos < len(self.text) else "end of input"
            raise self.error(f"expected {ch!r}, found {found!r}", self.pos)
        self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def node(self) -> Formula:
        name, start = self.word()
        key = name.lower()
        if self.peek() != "(":
            if key in self.factors:
                return Factor(key)
            raise self.error(f"unknown factor {name!r}", start, start + len(name))
        if key not in REGISTRY:
            raise self.error(f"unknown operator {name!r}", start, start + len(name))
        op = REGISTRY[key]
        self.expect("(")
        args: list[Formula] = []
        window = None
        while True:
            if op.is_time_series and len(args) == op.arity:
                tok, wstart = self.word()
                if not tok.isdigit():
                    raise self.error(f"malformed window {tok!r}", wstart, wstart + len(tok))
                window = int(tok)
                if window < 2:
                    raise self.error(f"window must be >= 2, got {window}", wstart, wstart + len(tok))
            else:
                args.append(self.node())
            if self.peek() == ",":
                self.pos += 1
                if len(args) >= op.arity and (window is not None or not op.is_time_series):
                    extra = "" if op.is_time_series else " and no window"
                    raise self.error(f"{key} takes {op.arity} argument(s){extra}", start, self.pos)
                continue
            break
        self.expect(")")
        if len(args) == op.arity and op.is_time_series and window is None:
            raise self.error(f"{key} needs a trailing window argument", start, self.pos)
        if len(args) != op.arity or (op.is_time_series and window is None):
            want = op.arity + (1 if op.is_time_series else 0)
            raise self.error(f"{key} expects {want} argument(s)", start, self.pos)
        return Apply(op.with_window(window), tuple(args))


def parse(text: str, max_depth: int = MAX_DEPTH, factors: Sequence[str] = BASE_FACTORS) -> Formula:
    """Parse prefix-notation text into a formula tree.

    Raises:
        FormulaError: unknown symbol, arity mismatch, malformed window, trailing
            input or a tree deeper than ``max_depth``. The error carries a span.
    """
    p = _Parser(text, factors)
    f = p.node()
    p.skip_ws()
    if p.pos != len(text):
        raise p.error("unexpected trailing input", p.pos, len(text))
    if f.depth > max_depth:
        raise FormulaError(f"depth {f.depth} exceeds limit {max_depth}", text, (0, len(text)))
    return f


# ---------------------------------------------------------------------------
# Genetic operators


def _nodes_at(f: Formula, level: int, path: tuple[int, ...] = ()) -> list[tuple[int, ...]]:
    if level == 0:
        return [path]
    if isinstance(f, Factor):
        return []
    out = []
    for i, a in enumerate(f.args):
        out.extend(_nodes_at(a, level - 1, path + (i,)))
    return out


def subtree(f: Formula, path: Sequence[int]) -> Formula:
    for i in path:
        f = f.args[i]  # type: ignore[union-attr]
    return f


def replace_at(f: Formula, path: Sequence[int], new: Formula) -> Formula:
    if not path:
        return new
    assert isinstance(f, Apply)
    i = path[0]
    args = list(f.args)
    args[i] = replace_at(args[i], path[1:], new)
    return Apply(f.op, tuple(args))


def crossover(p1: Formula, p2: Formula, rng: random.Random) -> tuple[Formula, Formula]:
    """Swap one subtree between the parents at a common distance from the root.

    The level is drawn uniformly from ``1..min(depth(p1), depth(p2))``; one node at
    that level is drawn uniformly in each parent. A parent of depth 0 leaves no
    common level, in which case the parents come back unchanged (same objects).
    """
    top = min(p1.depth, p2.depth)
    if top < 1:
        return p1, p2
    level = rng.randint(1, top)
    a = rng.choice(_nodes_at(p1, level))
    b = rng.choice(_nodes_at(p2, level))
    s1, s2 = subtree(p1, a), subtree(p2, b)
    return replace_at(p1, a, s2), replace_at(p2, b, s1)


def _paths(f: Formula, path: tuple[int, ...] = ()):
    yield path, f
    if isinstance(f, Apply):
        for i, a in enumerate(f.args):
            yield from _paths(a, path + (i,))


def mutate(
    f: Formula,
    gene_pool: Sequence[Formula],
    rng: random.Random,
    factors: Sequence[str] = BASE_FACTORS,
) -> Formula:
    """Apply one of: operator swap, leaf swap, or root-gene replacement.

    The three options are equally likely among those applicable; root-gene
    replacement draws from pool members strictly shallower than ``f``. The result
    is never deeper than ``f``.
    """
    nodes = list(_paths(f))
    internal = [(p, n) for p, n in nodes if isinstance(n, Apply)]
    leaves = [(p, n) for p, n in nodes if isinstance(n, Factor)]
    donors = [g for g in gene_pool if g.depth < f.depth]
    options = ["leaf"]
    if internal:
        options.append("op")
    if donors and f.depth >= 1:
        options.append("gene")
    choice = rng.choice(options)

    if choice == "op":
        path, node = rng.choice(internal)
        peers = [o for o in REGISTRY.values() if o.arity == node.op.arity and o.kind == node.op.kind]
        alts = [o for o in peers if o.name != node.op.name] or peers
        op = rng.choice(alts).with_window(node.op.window)
        return replace_at(f, path, Apply(op, node.args))
    if choice == "leaf":
        path, node = rng.choice(leaves)
        alts = [x for x in factors if x != node.name] or list(factors)
        return replace_at(f, path, Factor(rng.choice(alts)))
    i = rng.randrange(len(f.args))  # type: ignore[union-attr]
    return replace_at(f, (i,), rng.choice(donors))


def _draw_window(op: Operator, rng: random.Random, windows: Sequence[int]) -> Operator:
    return op.with_window(rng.choice(windows)) if op.is_time_series else op


def random_formula(
    target_depth: int,
    gene_pool: Sequence[Formula],
    rng: random.Random,
    factors: Sequence[str] = BASE_FACTORS,
    windows: Sequence[int] = WINDOWS,
    operators: Sequence[Operator] | None = None,
) -> Formula:
    """Draw a formula of exactly ``target_depth`` whose children come from the pool.

    One child slot (drawn uniformly) receives a pool member of depth
    ``target_depth - 1``; each other slot first draws a depth uniformly from
    ``0..target_depth - 1`` and then a member of that depth (bare factors serve
    depth 0).
    """
    if target_depth < 1:
        raise ValueError("target_depth must be >= 1")
    by_depth: dict[int, list[Formula]] = {0: [Factor(x) for x in factors]}
    for g in gene_pool:
        if g.depth >= 1:
            by_depth.setdefault(g.depth, []).append(g)
    missing = [d for d in range(target_depth) if not by_depth.get(d)]
    if missing:
        raise ValueError(
            f"gene pool has no formulas of depth {missing}; mine shallower depths before depth {target_depth}"
        )
    ops = list(operators) if operators is not None else list(REGISTRY.values())
    for _ in range(100):
        op = _draw_window(rng.choice(ops), rng, windows)
        lead = rng.randrange(op.arity)
        args = []
        for i in range(op.arity):
            d = target_depth - 1 if i == lead else rng.randrange(target_depth)
            args.append(rng.choice(by_depth[d]))
        f = Apply(op, tuple(args))
        if not is_self_constant(f):
            return f
    return f


def enumerate_depth1(
    factors: Sequence[str] = BASE_FACTORS,
    registry: Sequence[Operator] | None = None,
    windows: Sequence[int] = WINDOWS,
) -> list[Formula]:
    """All depth-1 formulas over the factors, minus the constant-by-construction ones."""
    ops = list(registry) if registry is not None else list(REGISTRY.values())
    seen: dict[str, Formula] = {}
    for op in ops:
        wins: Sequence[int | None] = windows if op.is_time_series else (None,)
        arg_sets = itertools.product(factors, repeat=op.arity)
        for args, w in itertools.product(list(arg_sets), wins):
            f = Apply(op.with_window(w), tuple(Factor(a) for a in args))
            if not is_self_constant(f):
                seen.setdefault(to_text(f), f)
    return list(seen.values())
