"""Small expression language for model definitions.

Expressions are real-valued formulas over ``t``, subsystem state components
``x<i>[<k>]`` (subsystem ``i`` is 1-based, component ``k`` is 0-based) and
control components ``u[<k>]``.  Supported syntax::

    1.5e-3   t   x2[0]   u[1]
    a + b   a - b   a * b   a / b   a ^ b   -a
    sin cos exp log tanh sqrt abs (unary)   min max (binary)

``^`` is right-associative and binds tighter than unary minus, so
``-x1[0]^2`` is ``-(x1[0]^2)`` and ``2^-1`` is ``0.5``.

A parsed expression is compiled to a flat stack program that is evaluated
either here (vectorised with numpy) or by the compiled path kernel.
:func:`reference_eval` is a separate scalar tree walker used to cross-check
the two.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "UnknownVariableError",
    "EvaluationError",
    "Num",
    "Time",
    "State",
    "Control",
    "Neg",
    "BinOp",
    "Call",
    "Expr",
    "parse",
    "parse_bundle",
    "to_string",
    "variables",
    "substitute_controls",
    "node_count",
    "depth",
    "reference_eval",
    "Program",
    "compile_expr",
    "OPCODES",
]


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, msg: str, text: str, pos: int):
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        self.line, self.col, self.text = line, col, text
        super().__init__(f"{msg} at line {line}, column {col}")


class UnknownVariableError(ExprError):
    pass


class EvaluationError(ArithmeticError):
    """Raised when an expression yields a non-finite value at some point."""

    def __init__(self, msg: str, point=None):
        self.point = point
        super().__init__(msg if point is None else f"{msg} at {point}")


# ---------------------------------------------------------------- AST nodes

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Time:
    pass


@dataclass(frozen=True)
class State:
    sub: int  # 1-based subsystem index
    comp: int  # 0-based component


@dataclass(frozen=True)
class Control:
    comp: int


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Expr = Union[Num, Time, State, Control, Neg, BinOp, Call]

UNARY_FUNCS = ("sin", "cos", "exp", "log", "tanh", "sqrt", "abs")
BINARY_FUNCS = ("min", "max")

# ----------------------------------------------------------------- tokenizer

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),\[\]])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.tok
        raise ExprSyntaxError(msg, self.text, tok.pos)

    def accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str):
        if not self.accept(text):
            found = self.tok.text or "end of input"
            self.error(f"expected {text!r}, found {found!r}")

    def expect_int(self) -> int:
        tok = self.tok
        if tok.kind != "num" or not tok.text.isdigit():
            self.error("expected a non-negative integer index")
        self.i += 1
        return int(tok.text)

    # bundle := expr (',' expr)*  |  '(' expr (',' expr)+ ')'
    def bundle(self) -> tuple:
        items = [self.expr()]
        while self.accept(","):
            items.append(self.expr())
        if self.tok.kind != "end":
            self.error(f"unexpected {self.tok.text!r}")
        if len(items) == 1 and isinstance(items[0], _Tuple):
            return items[0].items
        for it in items:
            if isinstance(it, _Tuple):
                self.error("nested tuples are not allowed")
        return tuple(items)

    def expr(self):
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, self._scalar(node), self._scalar(self.term()))
        return node

    def term(self):
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, self._scalar(node), self._scalar(self.unary()))
        return node

    def unary(self):
        if self.accept("-"):
            return Neg(self._scalar(self.unary()))
        if self.accept("+"):
            return self._scalar(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.accept("^"):
            return BinOp("^", self._scalar(base), self._scalar(self.unary()))
        return base

    def _scalar(self, node):
        if isinstance(node, _Tuple):
            raise ExprSyntaxError("tuple used as a scalar", self.text, node.pos)
        return node

    def atom(self):
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            self.i += 1
            items = [self.expr()]
            while self.accept(","):
                items.append(self.expr())
            self.expect(")")
            if len(items) == 1:
                return items[0]
            return _Tuple(tuple(self._scalar(x) for x in items), tok.pos)
        if tok.kind == "name":
            self.i += 1
            name = tok.text
            if name == "t":
                return Time()
            if name in UNARY_FUNCS or name in BINARY_FUNCS:
                self.expect("(")
                args = [self._scalar(self.expr())]
                while self.accept(","):
                    args.append(self._scalar(self.expr()))
                self.expect(")")
                want = 1 if name in UNARY_FUNCS else 2
                if len(args) != want:
                    self.error(f"{name}() takes {want} argument(s), got {len(args)}", tok)
                return Call(name, tuple(args))
            if name == "u":
                self.expect("[")
                k = self.expect_int()
                self.expect("]")
                return Control(k)
            m = re.fullmatch(r"x(\d+)", name)
            if m:
                sub = int(m.group(1))
                if sub < 1:
                    self.error("subsystem indices start at 1", tok)
                self.expect("[")
                k = self.expect_int()
                self.expect("]")
                return State(sub, k)
            raise UnknownVariableError(
                f"unknown name {name!r} at line {self.text.count(chr(10), 0, tok.pos) + 1}, "
                f"column {tok.pos - (self.text.rfind(chr(10), 0, tok.pos) + 1) + 1}"
            )
        found = tok.text or "end of input"
        self.error(f"unexpected {found!r}")


@dataclass(frozen=True)
class _Tuple:
    items: tuple
    pos: int


def parse(text: str) -> Expr:
    """Parse a single scalar expression."""
    items = parse_bundle(text)
    if len(items) != 1:
        raise ExprSyntaxError(f"expected one expression, got {len(items)}", text, 0)
    return items[0]


def parse_bundle(text: str) -> tuple:
    """Parse ``"e1, e2"`` or ``"(e1, e2)"`` into a tuple of expressions."""
    return _Parser(text).bundle()


# ------------------------------------------------------------------ printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def to_string(e: Expr) -> str:
    """Print ``e`` so that :func:`parse` reads it back to an equivalent tree."""
    if isinstance(e, Num):
        r = repr(float(e.value))
        if r in ("inf", "-inf", "nan"):
            raise ExprError(f"cannot print non-finite literal {r}")
        return f"({r})" if r.startswith("-") else r
    if isinstance(e, Time):
        return "t"
    if isinstance(e, State):
        return f"x{e.sub}[{e.comp}]"
    if isinstance(e, Control):
        return f"u[{e.comp}]"
    if isinstance(e, Neg):
        return f"(-{to_string(e.arg)})"
    if isinstance(e, BinOp):
        return f"({to_string(e.left)} {e.op} {to_string(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_string(a) for a in e.args)})"
    raise TypeError(type(e))


def _walk(e: Expr) -> Iterator[Expr]:
    yield e
    if isinstance(e, Neg):
        yield from _walk(e.arg)
    elif isinstance(e, BinOp):
        yield from _walk(e.left)
        yield from _walk(e.right)
    elif isinstance(e, Call):
        for a in e.args:
            yield from _walk(a)


def variables(e: Expr) -> set:
    return {n for n in _walk(e) if isinstance(n, (Time, State, Control))}


def node_count(e: Expr) -> int:
    return sum(1 for _ in _walk(e))


def depth(e: Expr) -> int:
    if isinstance(e, Neg):
        return 1 + depth(e.arg)
    if isinstance(e, BinOp):
        return 1 + max(depth(e.left), depth(e.right))
    if isinstance(e, Call):
        return 1 + max(depth(a) for a in e.args)
    return 1


def substitute_controls(e: Expr, controls: Sequence[Expr] | None) -> Expr:
    """Replace every ``u[k]`` in ``e`` by ``controls[k]``."""
    if isinstance(e, Control):
        if controls is None or e.comp >= len(controls):
            raise UnknownVariableError(f"u[{e.comp}] has no matching control component")
        return controls[e.comp]
    if isinstance(e, Neg):
        return Neg(substitute_controls(e.arg, controls))
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute_controls(e.left, controls), substitute_controls(e.right, controls))
    if isinstance(e, Call):
        return Call(e.name, tuple(substitute_controls(a, controls) for a in e.args))
    return e


# ------------------------------------------------------- reference evaluator

def _ref_pow(a: float, b: float) -> float:
    try:
        r = math.pow(a, b)
    except (ValueError, ZeroDivisionError, OverflowError):
        return math.nan
    return r


def _guard(fn, v: float) -> float:
    try:
        return fn(v)
    except OverflowError:
        return math.inf


_REF_UNARY = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": lambda v: _guard(math.exp, v),
    "log": lambda v: math.log(v) if v > 0 else (-math.inf if v == 0 else math.nan),
    "tanh": math.tanh,
    "sqrt": lambda v: math.sqrt(v) if v >= 0 else math.nan,
    "abs": abs,
}


def reference_eval(e: Expr, t: float = 0.0, x: dict | None = None, u: Sequence[float] = ()) -> float:
    """Scalar tree-walking evaluator.

    ``x`` maps a 1-based subsystem index to a sequence of its components.
    Intentionally shares no code with :class:`Program`.
    """
    x = x or {}

    def ev(n):
        if isinstance(n, Num):
            return n.value
        if isinstance(n, Time):
            return t
        if isinstance(n, State):
            return float(x[n.sub][n.comp])
        if isinstance(n, Control):
            return float(u[n.comp])
        if isinstance(n, Neg):
            return -ev(n.arg)
        if isinstance(n, BinOp):
            a, b = ev(n.left), ev(n.right)
            if n.op == "+":
                r = a + b
            elif n.op == "-":
                r = a - b
            elif n.op == "*":
                r = a * b
            elif n.op == "/":
                r = a / b if b != 0 else (math.nan if a == 0 else math.copysign(math.inf, a) * math.copysign(1, b))
            else:
                r = _ref_pow(a, b)
        elif isinstance(n, Call):
            args = [ev(a) for a in n.args]
            if n.name == "min":
                r = math.nan if math.isnan(args[0]) or math.isnan(args[1]) else min(args)
            elif n.name == "max":
                r = math.nan if math.isnan(args[0]) or math.isnan(args[1]) else max(args)
            else:
                r = _REF_UNARY[n.name](args[0])
        else:
            raise TypeError(type(n))
        if not math.isfinite(r):
            raise EvaluationError(f"non-finite value in {to_string(n)}")
        return r

    return ev(e)


# ---------------------------------------------------------- stack programs

# Opcodes shared with the compiled kernel; keep in sync with _ckernels.pyx.
OPCODES = {
    "const": 0,
    "var": 1,
    "+": 2,
    "-": 3,
    "*": 4,
    "/": 5,
    "^": 6,
    "neg": 7,
    "sin": 8,
    "cos": 9,
    "exp": 10,
    "log": 11,
    "tanh": 12,
    "sqrt": 13,
    "abs": 14,
    "min": 15,
    "max": 16,
}

_NP_UNARY = {
    OPCODES["neg"]: np.negative,
    OPCODES["sin"]: np.sin,
    OPCODES["cos"]: np.cos,
    OPCODES["exp"]: np.exp,
    OPCODES["log"]: np.log,
    OPCODES["tanh"]: np.tanh,
    OPCODES["sqrt"]: np.sqrt,
    OPCODES["abs"]: np.abs,
}
_NP_BINARY = {
    OPCODES["+"]: np.add,
    OPCODES["-"]: np.subtract,
    OPCODES["*"]: np.multiply,
    OPCODES["/"]: np.divide,
    OPCODES["^"]: np.power,
    OPCODES["min"]: np.minimum,
    OPCODES["max"]: np.maximum,
}


@dataclass(frozen=True)
class Program:
    """Postfix program: ``code`` is a flat array of (opcode, argument) pairs.

    Variable slots are ``0 -> t`` and ``1 + (i-1)*d + k -> x<i>[k]``.
    """

    code: np.ndarray
    consts: np.ndarray
    max_stack: int

    def evaluate(self, slots) -> np.ndarray:
        """Evaluate on ``slots``, a sequence indexed by slot of broadcastable arrays."""
        stack = []
        code = self.code
        with np.errstate(all="ignore"):
            for j in range(0, len(code), 2):
                op, arg = code[j], code[j + 1]
                if op == 0:
                    stack.append(self.consts[arg])
                    continue
                if op == 1:
                    stack.append(slots[arg])
                    continue
                if op in _NP_UNARY:
                    r = _NP_UNARY[op](stack.pop())
                else:
                    b = stack.pop()
                    r = _NP_BINARY[op](stack.pop(), b)
                if not np.all(np.isfinite(r)):
                    raise EvaluationError(_describe_failure(r, slots))
                stack.append(r)
        out = stack.pop()
        if not np.all(np.isfinite(out)):
            raise EvaluationError(_describe_failure(out, slots))
        return out


def _describe_failure(r, slots) -> str:
    r = np.asarray(r)
    bad = np.argwhere(~np.isfinite(r))
    if bad.size == 0 or r.ndim == 0:
        return "non-finite value"
    idx = tuple(bad[0])
    pt = []
    for s in slots:
        s = np.asarray(s)
        try:
            pt.append(float(np.broadcast_to(s, r.shape)[idx]))
        except ValueError:
            pt.append(float(s.ravel()[0]))
    return f"non-finite value at slots {pt}"


def compile_expr(e: Expr, d: int) -> Program:
    """Compile ``e`` (which must be control-free) for state dimension ``d``."""
    code: list[int] = []
    consts: list[float] = []
    depth_now = 0
    max_depth = 0

    def push():
        nonlocal depth_now, max_depth
        depth_now += 1
        max_depth = max(max_depth, depth_now)

    def emit(n):
        nonlocal depth_now
        if isinstance(n, Num):
            code.extend((0, len(consts)))
            consts.append(float(n.value))
            push()
        elif isinstance(n, Time):
            code.extend((1, 0))
            push()
        elif isinstance(n, State):
            if n.comp >= d:
                raise UnknownVariableError(f"x{n.sub}[{n.comp}] exceeds state dimension {d}")
            code.extend((1, 1 + (n.sub - 1) * d + n.comp))
            push()
        elif isinstance(n, Control):
            raise UnknownVariableError("controls must be substituted before compiling")
        elif isinstance(n, Neg):
            emit(n.arg)
            code.extend((OPCODES["neg"], 0))
        elif isinstance(n, BinOp):
            emit(n.left)
            emit(n.right)
            code.extend((OPCODES[n.op], 0))
            depth_now -= 1
        elif isinstance(n, Call):
            for a in n.args:
                emit(a)
            code.extend((OPCODES[n.name], 0))
            depth_now -= len(n.args) - 1
        else:
            raise TypeError(type(n))

    emit(e)
    return Program(np.asarray(code, dtype=np.int32), np.asarray(consts, dtype=np.float64), max_depth)
