"""Payoff / driver expression mini-language.

Grammar (whitespace insignificant)::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := ["-"] atom
    atom   := number | "x" | "x1" | "x2" | "y" | "t"
            | func "(" expr ("," expr)* ")" | "(" expr ")"
    func   := max | min | exp | log | abs | pow | sin | cos

``pow`` takes an integer literal exponent. Expressions evaluate on floats,
numpy arrays, or mpmath numbers (for high-precision finite differences).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

VARIABLES = ("x", "x1", "x2", "y", "t")
FUNCTIONS = {
    "max": (2, None),
    "min": (2, None),
    "exp": (1, 1),
    "log": (1, 1),
    "abs": (1, 1),
    "pow": (2, 2),
    "sin": (1, 1),
    "cos": (1, 1),
}


class ParseError(ValueError):
    def __init__(self, text: str, pos: int, expected: set[str]):
        self.text = text
        self.pos = pos
        self.expected = frozenset(expected)
        shown = ", ".join(sorted(self.expected))
        super().__init__(f"parse error at position {pos} in {text!r}: expected one of {{{shown}}}")


class UnboundVariableError(KeyError):
    pass


class DomainError(ArithmeticError):
    pass


# -- tree nodes ---------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Node", ...]


Node = Union[Num, Var, Neg, BinOp, Call]


# -- tokenizer / parser -------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(text, start, {"number", "name", "operator"})
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, expected):
        raise ParseError(self.text, self.peek()[2], set(expected))

    def expect(self, value):
        kind, val, _ = self.peek()
        if kind != "op" or val != value:
            self.fail({repr(value)})
        self.take()

    def parse(self) -> Node:
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail({"'+'", "'-'", "'*'", "'/'", "end of input"})
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.atom())
        return self.atom()

    def atom(self) -> Node:
        kind, val, pos = self.peek()
        if kind == "num":
            self.take()
            return Num(float(val))
        if kind == "name":
            if val in VARIABLES:
                self.take()
                return Var(val)
            if val in FUNCTIONS:
                self.take()
                self.expect("(")
                args = [self.expr()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                lo, hi = FUNCTIONS[val]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    raise ParseError(self.text, pos, {f"{val} with {lo}..{hi or 'n'} arguments"})
                if val == "pow" and not _is_integer_literal(args[1]):
                    raise ParseError(self.text, pos, {"integer exponent"})
                return Call(val, tuple(args))
            self.fail(set(VARIABLES) | set(FUNCTIONS) | {"number", "'('"})
        if kind == "op" and val == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        self.fail(set(VARIABLES) | set(FUNCTIONS) | {"number", "'('"})


def _is_integer_literal(node: Node) -> bool:
    if isinstance(node, Neg):
        node = node.arg
    return isinstance(node, Num) and float(node.value).is_integer()


def _literal_value(node: Node) -> float:
    if isinstance(node, Neg):
        return -node.arg.value
    return node.value


# -- printing -----------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    if v < 0:
        return f"(-{_fmt_num(-v)})"
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _print(node: Node, ctx: int = 0) -> str:
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.name}(" + ",".join(_print(a) for a in node.args) + ")"
    if isinstance(node, Neg):
        inner = node.arg
        body = _print(inner)
        if not isinstance(inner, (Num, Var, Call)) or (isinstance(inner, Num) and inner.value < 0):
            body = f"({_print(inner)})"
        return "-" + body
    prec = _PREC[node.op]
    left = _print(node.left, prec)
    right = _print(node.right, prec + 1)
    s = f"{left}{node.op}{right}"
    if prec < ctx:
        s = f"({s})"
    return s


# -- evaluation ---------------------------------------------------------------

def _np_log(v):
    arr = np.asarray(v)
    if np.any(arr <= 0):
        raise DomainError("log of nonpositive argument")
    return np.log(v)


def _np_div(a, b):
    if np.any(np.asarray(b) == 0):
        raise DomainError("division by zero")
    return a / b


def _np_max(*args):
    out = args[0]
    for a in args[1:]:
        out = np.maximum(out, a)
    return out


def _np_min(*args):
    out = args[0]
    for a in args[1:]:
        out = np.minimum(out, a)
    return out


_NUMPY_FUNCS = {
    "max": _np_max,
    "min": _np_min,
    "exp": np.exp,
    "log": _np_log,
    "abs": np.abs,
    "sin": np.sin,
    "cos": np.cos,
}


def _mp_funcs():
    import mpmath

    def log(v):
        if v <= 0:
            raise DomainError("log of nonpositive argument")
        return mpmath.log(v)

    return {
        "max": lambda *a: max(a),
        "min": lambda *a: min(a),
        "exp": mpmath.exp,
        "log": log,
        "abs": abs,
        "sin": mpmath.sin,
        "cos": mpmath.cos,
    }


def _eval(node: Node, env: Mapping, funcs, num):
    if isinstance(node, Num):
        return num(node.value)
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundVariableError(f"variable {node.name!r} is not bound") from None
    if isinstance(node, Neg):
        return -_eval(node.arg, env, funcs, num)
    if isinstance(node, BinOp):
        a = _eval(node.left, env, funcs, num)
        b = _eval(node.right, env, funcs, num)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if funcs is _NUMPY_FUNCS:
            return _np_div(a, b)
        if b == 0:
            raise DomainError("division by zero")
        return a / b
    if node.name == "pow":
        base = _eval(node.args[0], env, funcs, num)
        n = int(_literal_value(node.args[1]))
        if n < 0:
            if funcs is _NUMPY_FUNCS:
                return _np_div(1.0, base**-n)
            if base == 0:
                raise DomainError("division by zero")
        return base**n
    args = [_eval(a, env, funcs, num) for a in node.args]
    return funcs[node.name](*args)


def _variables(node: Node, acc: set):
    if isinstance(node, Var):
        acc.add(node.name)
    elif isinstance(node, Neg):
        _variables(node.arg, acc)
    elif isinstance(node, BinOp):
        _variables(node.left, acc)
        _variables(node.right, acc)
    elif isinstance(node, Call):
        for a in node.args:
            _variables(a, acc)
    return acc


def _substitute(node: Node, mapping: Mapping[str, Node]) -> Node:
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Neg):
        return Neg(_substitute(node.arg, mapping))
    if isinstance(node, BinOp):
        return BinOp(node.op, _substitute(node.left, mapping), _substitute(node.right, mapping))
    if isinstance(node, Call):
        if node.name == "pow":
            return Call("pow", (_substitute(node.args[0], mapping), node.args[1]))
        return Call(node.name, tuple(_substitute(a, mapping) for a in node.args))
    return node


def _switches(node: Node, acc: list):
    if isinstance(node, Neg):
        _switches(node.arg, acc)
    elif isinstance(node, BinOp):
        _switches(node.left, acc)
        _switches(node.right, acc)
    elif isinstance(node, Call):
        for a in node.args:
            _switches(a, acc)
        if node.name in ("max", "min"):
            for i in range(len(node.args)):
                for j in range(i + 1, len(node.args)):
                    acc.append(BinOp("-", node.args[i], node.args[j]))
        elif node.name == "abs":
            acc.append(node.args[0])
    return acc


@dataclass(frozen=True)
class FieldExpr:
    """An evaluatable expression tree.

    Call with keyword variables: ``parse_field("max(x-100,0)")(x=105) == 5``.
    """

    root: Node

    def __str__(self) -> str:
        return _print(self.root)

    def __repr__(self) -> str:
        return f"FieldExpr({str(self)!r})"

    def __call__(self, **env):
        return eval_field(self, env)

    @property
    def variables(self) -> frozenset[str]:
        return frozenset(_variables(self.root, set()))

    def uses(self, name: str) -> bool:
        return name in self.variables

    @property
    def is_zero(self) -> bool:
        return isinstance(self.root, Num) and self.root.value == 0.0

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def substitute(self, **mapping: "FieldExpr | str | float") -> "FieldExpr":
        nodes = {k: _as_node(v) for k, v in mapping.items()}
        return FieldExpr(_substitute(self.root, nodes))

    def switches(self) -> list["FieldExpr"]:
        """Sub-expressions whose sign change marks a kink (max/min/abs)."""
        return [FieldExpr(n) for n in _switches(self.root, [])]

    def evaluate(self, env: Mapping, precision: str = "double"):
        return eval_field(self, env, precision=precision)

    def on_grid(self, env: Mapping, shape) -> np.ndarray:
        """Evaluate and broadcast to ``shape`` as a float array."""
        val = eval_field(self, env)
        return np.broadcast_to(np.asarray(val, dtype=float), shape).copy()


def _as_node(v) -> Node:
    if isinstance(v, FieldExpr):
        return v.root
    if isinstance(v, str):
        return parse_field(v).root
    return Num(float(v)) if v >= 0 else Neg(Num(-float(v)))


def parse_field(text: str) -> FieldExpr:
    """Parse ``text`` into a :class:`FieldExpr`; raises :class:`ParseError`."""
    if isinstance(text, FieldExpr):
        return text
    if isinstance(text, (int, float)):
        return FieldExpr(_as_node(float(text)))
    return FieldExpr(_Parser(text).parse())


def eval_field(f: FieldExpr, env: Mapping, y=None, precision: str = "double"):
    """Evaluate ``f`` with variables from ``env`` (and optionally ``y``).

    ``precision="mp"`` evaluates with mpmath at the current ``mpmath.mp.dps``.
    """
    if y is not None:
        env = {**env, "y": y}
    if precision == "mp":
        import mpmath

        return _eval(f.root, env, _mp_funcs(), mpmath.mpf)
    with np.errstate(over="ignore"):
        return _eval(f.root, env, _NUMPY_FUNCS, float)


def lipschitz_in_y(
    f: FieldExpr,
    K: float,
    x_samples: np.ndarray,
    y_range: tuple[float, float],
    n: int = 10_000,
    seed: int = 0,
    x_name: str = "x",
) -> float:
    """Largest sampled difference quotient of ``f`` in ``y``.

    Raises ``ValueError`` when it exceeds ``K`` (beyond rounding).
    """
    if not f.uses("y"):
        return 0.0
    rng = np.random.default_rng(seed)
    xs = rng.choice(np.asarray(x_samples, dtype=float).ravel(), size=n)
    y1 = rng.uniform(*y_range, size=n)
    y2 = rng.uniform(*y_range, size=n)
    keep = y1 != y2
    env = {x_name: xs[keep], "x": xs[keep], "t": 0.0}
    q = np.abs(eval_field(f, env, y=y1[keep]) - eval_field(f, env, y=y2[keep])) / np.abs(y1[keep] - y2[keep])
    worst = float(np.max(q)) if q.size else 0.0
    if worst > K * (1 + 1e-9) + 1e-12:
        raise ValueError(f"declared Lipschitz bound K={K} contradicted: sampled quotient {worst:.6g} for {f}")
    return worst


__all__ = [
    "FieldExpr",
    "ParseError",
    "DomainError",
    "UnboundVariableError",
    "parse_field",
    "eval_field",
    "lipschitz_in_y",
]
