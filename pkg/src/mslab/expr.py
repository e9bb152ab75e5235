"""Scalar expression language for coefficient fields and test functionals.

Grammar (whitespace-insensitive)::

    expr   := term  (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # exponent must fold to an integer
    atom   := number | ident | ident '(' expr ')' | '(' expr ')'

Variables are ``t``, ``x1..xN``, ``y1..yN`` and (for test functionals)
``z1..zN``.  The function set is ``sin, cos, exp, tanh, abs, sign``;
``sign`` exists so that ``abs`` has a closed-form derivative (with the
subgradient-0 convention at the kink).  ``^`` is restricted to constant
integer exponents, which keeps symbolic differentiation total.

ASTs are immutable; evaluation is reentrant.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .errors import ExpressionError, EvaluationError

FUNCTIONS = ("sin", "cos", "exp", "tanh", "abs", "sign")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)

_VAR_RE = re.compile(r"^(t|[xyz](\d+))$")


@dataclass(frozen=True)
class Num:
    value: float
    pos: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Var:
    kind: str  # 't', 'x', 'y' or 'z'
    index: int  # 0-based; always 0 for 't'
    pos: int = field(default=-1, compare=False)

    @property
    def name(self) -> str:
        return "t" if self.kind == "t" else f"{self.kind}{self.index + 1}"


@dataclass(frozen=True)
class Neg:
    arg: "Expr"
    pos: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Expr"
    pos: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Bin:
    op: str  # one of '+-*/'
    left: "Expr"
    right: "Expr"
    pos: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int
    pos: int = field(default=-1, compare=False)


Expr = Num | Var | Neg | Call | Bin | Pow


def parse_variable(name: str, pos: int = -1) -> Var:
    """Map an identifier like ``x1``/``y2``/``t`` to a Var node."""
    m = _VAR_RE.match(name)
    if not m:
        raise ExpressionError(f"unknown identifier {name!r}", pos=pos, text=name)
    if name == "t":
        return Var("t", 0, pos)
    return Var(name[0], int(m.group(2)) - 1, pos)


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.toks: list[tuple[str, str, int]] = []
        i = 0
        while i < len(text):
            m = _TOKEN_RE.match(text, i)
            if not m or m.end() == i:
                # skip pure whitespace tail
                if text[i:].strip() == "":
                    break
                raise ExpressionError(
                    f"unexpected character {text[i:].strip()[0]!r}", pos=i, text=text
                )
            if m.group("num") is not None:
                self.toks.append(("num", m.group("num"), m.start("num")))
            elif m.group("ident") is not None:
                self.toks.append(("ident", m.group("ident"), m.start("ident")))
            else:
                self.toks.append(("op", m.group("op"), m.start("op")))
            i = m.end()
        self.k = 0

    def peek(self) -> tuple[str, str, int]:
        if self.k < len(self.toks):
            return self.toks[self.k]
        return ("end", "", len(self.text))

    def next(self) -> tuple[str, str, int]:
        tok = self.peek()
        self.k += 1
        return tok


def parse_expression(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    Raises ExpressionError with the source position on syntax errors and on
    identifiers outside the variable/function vocabulary.
    """
    if not text or not text.strip():
        raise ExpressionError("empty expression", pos=0, text=text)
    toks = _Tokens(text)
    node = _parse_sum(toks)
    kind, val, pos = toks.peek()
    if kind != "end":
        raise ExpressionError(f"unexpected trailing {val!r}", pos=pos, text=text)
    return node


def _parse_sum(toks: _Tokens) -> Expr:
    node = _parse_term(toks)
    while True:
        kind, val, pos = toks.peek()
        if kind == "op" and val in "+-":
            toks.next()
            rhs = _parse_term(toks)
            node = Bin(val, node, rhs, pos)
        else:
            return node


def _parse_term(toks: _Tokens) -> Expr:
    node = _parse_unary(toks)
    while True:
        kind, val, pos = toks.peek()
        if kind == "op" and val in "*/":
            toks.next()
            rhs = _parse_unary(toks)
            node = Bin(val, node, rhs, pos)
        else:
            return node


def _parse_unary(toks: _Tokens) -> Expr:
    kind, val, pos = toks.peek()
    if kind == "op" and val == "-":
        toks.next()
        arg = _parse_unary(toks)
        if isinstance(arg, Num):  # canonical form: fold negated literals
            return Num(-arg.value, pos)
        return Neg(arg, pos)
    return _parse_power(toks)


def _parse_power(toks: _Tokens) -> Expr:
    base = _parse_atom(toks)
    kind, val, pos = toks.peek()
    if kind == "op" and val == "^":
        toks.next()
        exp_tree = _parse_unary(toks)
        folded = _fold(exp_tree)
        if not isinstance(folded, Num) or folded.value != int(folded.value):
            raise ExpressionError(
                "exponent of '^' must be a constant integer", pos=pos, text=toks.text
            )
        return Pow(base, int(folded.value), pos)
    return base


def _parse_atom(toks: _Tokens) -> Expr:
    kind, val, pos = toks.next()
    if kind == "num":
        return Num(float(val), pos)
    if kind == "ident":
        nkind, nval, npos = toks.peek()
        if nkind == "op" and nval == "(":
            if val not in FUNCTIONS:
                raise ExpressionError(f"unknown function {val!r}", pos=pos, text=toks.text)
            toks.next()
            arg = _parse_sum(toks)
            ckind, cval, cpos = toks.next()
            if not (ckind == "op" and cval == ")"):
                raise ExpressionError("expected ')'", pos=cpos, text=toks.text)
            return Call(val, arg, pos)
        return parse_variable(val, pos)
    if kind == "op" and val == "(":
        node = _parse_sum(toks)
        ckind, cval, cpos = toks.next()
        if not (ckind == "op" and cval == ")"):
            raise ExpressionError("expected ')'", pos=cpos, text=toks.text)
        return node
    raise ExpressionError(f"unexpected {val!r}" if val else "unexpected end of input",
                          pos=pos, text=toks.text)


# ---------------------------------------------------------------------------
# printing

_PREC_ATOM = 100
_PREC_POW = 40
_PREC_NEG = 30
_PREC_MUL = 20
_PREC_ADD = 10


def _prec(node: Expr) -> int:
    if isinstance(node, (Var, Call)):
        return _PREC_ATOM
    if isinstance(node, Num):
        return _PREC_NEG if node.value < 0 else _PREC_ATOM
    if isinstance(node, Pow):
        return _PREC_POW
    if isinstance(node, Neg):
        return _PREC_NEG
    return _PREC_MUL if node.op in "*/" else _PREC_ADD


def to_source(node: Expr) -> str:
    """Render the tree so that ``parse_expression(to_source(e)) == e``."""
    if isinstance(node, Num):
        v = node.value
        return repr(int(v)) if v == int(v) and abs(v) < 1e16 else repr(v)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = to_source(node.arg)
        if _prec(node.arg) < _PREC_NEG:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Call):
        return f"{node.fn}({to_source(node.arg)})"
    if isinstance(node, Pow):
        base = to_source(node.base)
        if _prec(node.base) <= _PREC_POW:
            base = f"({base})"
        return f"{base}^({node.exponent})" if node.exponent < 0 else f"{base}^{node.exponent}"
    left = to_source(node.left)
    right = to_source(node.right)
    p = _prec(node)
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


# ---------------------------------------------------------------------------
# evaluation

def _sign(v: float) -> float:
    return 0.0 if v == 0.0 else math.copysign(1.0, v)


_CALL_IMPL = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "tanh": math.tanh,
    "abs": abs,
    "sign": _sign,
}


def evaluate(node: Expr, t: float = 0.0, x=(), y=(), z=()) -> float:
    """Reference interpreter: IEEE-754 doubles, tagged errors on bad points."""
    val = _eval(node, t, x, y, z)
    if not math.isfinite(val):
        raise EvaluationError("non-finite result", where=f"pos={node.pos}")
    return val


def _eval(node: Expr, t, x, y, z) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        if node.kind == "t":
            return float(t)
        seq = {"x": x, "y": y, "z": z}[node.kind]
        try:
            return float(seq[node.index])
        except IndexError:
            raise EvaluationError(
                f"variable {node.name} out of range for the supplied point",
                where=f"pos={node.pos}",
            ) from None
    if isinstance(node, Neg):
        return -_eval(node.arg, t, x, y, z)
    if isinstance(node, Call):
        try:
            return _CALL_IMPL[node.fn](_eval(node.arg, t, x, y, z))
        except (OverflowError, ValueError):
            raise EvaluationError(
                f"{node.fn} overflow", where=f"pos={node.pos}"
            ) from None
    if isinstance(node, Pow):
        base = _eval(node.base, t, x, y, z)
        if base == 0.0 and node.exponent < 0:
            raise EvaluationError("zero raised to a negative power",
                                  where=f"pos={node.pos}")
        try:
            return float(base ** node.exponent)
        except OverflowError:
            raise EvaluationError("power overflow", where=f"pos={node.pos}") from None
    lhs = _eval(node.left, t, x, y, z)
    rhs = _eval(node.right, t, x, y, z)
    if node.op == "+":
        return lhs + rhs
    if node.op == "-":
        return lhs - rhs
    if node.op == "*":
        return lhs * rhs
    if rhs == 0.0:
        raise EvaluationError("division by zero", where=f"pos={node.pos}")
    return lhs / rhs


def variables(node: Expr) -> set[tuple[str, int]]:
    """All (kind, index) pairs referenced by the tree."""
    out: set[tuple[str, int]] = set()
    _collect(node, out)
    return out


def _collect(node: Expr, out: set) -> None:
    if isinstance(node, Var):
        out.add((node.kind, node.index))
    elif isinstance(node, Neg):
        _collect(node.arg, out)
    elif isinstance(node, Call):
        _collect(node.arg, out)
    elif isinstance(node, Pow):
        _collect(node.base, out)
    elif isinstance(node, Bin):
        _collect(node.left, out)
        _collect(node.right, out)


# ---------------------------------------------------------------------------
# differentiation

def differentiate(node: Expr, var: str | Var) -> Expr:
    """Symbolic partial derivative with respect to ``var`` (e.g. ``"y1"``).

    ``abs`` differentiates to ``sign``, which takes the value 0 at the kink;
    ``sign`` itself differentiates to 0 (valid almost everywhere).
    """
    v = parse_variable(var) if isinstance(var, str) else var
    return _fold(_diff(node, v))


def _diff(node: Expr, v: Var) -> Expr:
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if (node.kind, node.index) == (v.kind, v.index) else 0.0)
    if isinstance(node, Neg):
        return Neg(_diff(node.arg, v))
    if isinstance(node, Call):
        du = _diff(node.arg, v)
        u = node.arg
        if node.fn == "sin":
            outer: Expr = Call("cos", u)
        elif node.fn == "cos":
            outer = Neg(Call("sin", u))
        elif node.fn == "exp":
            outer = Call("exp", u)
        elif node.fn == "tanh":
            outer = Bin("-", Num(1.0), Pow(Call("tanh", u), 2))
        elif node.fn == "abs":
            outer = Call("sign", u)
        else:  # sign: flat a.e.
            return Num(0.0)
        return Bin("*", outer, du)
    if isinstance(node, Pow):
        if node.exponent == 0:
            return Num(0.0)
        du = _diff(node.base, v)
        inner = Pow(node.base, node.exponent - 1) if node.exponent != 1 else Num(1.0)
        return Bin("*", Bin("*", Num(float(node.exponent)), inner), du)
    dl = _diff(node.left, v)
    dr = _diff(node.right, v)
    if node.op in "+-":
        return Bin(node.op, dl, dr)
    if node.op == "*":
        return Bin("+", Bin("*", dl, node.right), Bin("*", node.left, dr))
    num = Bin("-", Bin("*", dl, node.right), Bin("*", node.left, dr))
    return Bin("/", num, Pow(node.right, 2))


def _fold(node: Expr) -> Expr:
    """Conservative constant folding / identity cleanup (no reassociation)."""
    if isinstance(node, (Num, Var)):
        return node
    if isinstance(node, Neg):
        a = _fold(node.arg)
        if isinstance(a, Num):
            return Num(-a.value)
        if isinstance(a, Neg):
            return a.arg
        return Neg(a, node.pos)
    if isinstance(node, Call):
        a = _fold(node.arg)
        if isinstance(a, Num):
            return Num(float(_CALL_IMPL[node.fn](a.value)))
        return Call(node.fn, a, node.pos)
    if isinstance(node, Pow):
        b = _fold(node.base)
        if node.exponent == 0:
            return Num(1.0)
        if node.exponent == 1:
            return b
        if isinstance(b, Num) and not (b.value == 0.0 and node.exponent < 0):
            return Num(float(b.value ** node.exponent))
        return Pow(b, node.exponent, node.pos)
    lhs = _fold(node.left)
    rhs = _fold(node.right)
    ln = lhs.value if isinstance(lhs, Num) else None
    rn = rhs.value if isinstance(rhs, Num) else None
    if node.op == "+":
        if ln == 0.0:
            return rhs
        if rn == 0.0:
            return lhs
        if ln is not None and rn is not None:
            return Num(ln + rn)
    elif node.op == "-":
        if rn == 0.0:
            return lhs
        if ln == 0.0:
            return _fold(Neg(rhs))
        if ln is not None and rn is not None:
            return Num(ln - rn)
    elif node.op == "*":
        if ln == 0.0 or rn == 0.0:
            return Num(0.0)
        if ln == 1.0:
            return rhs
        if rn == 1.0:
            return lhs
        if ln is not None and rn is not None:
            return Num(ln * rn)
    else:  # '/'
        if ln == 0.0:
            return Num(0.0)
        if rn == 1.0:
            return lhs
        if ln is not None and rn is not None and rn != 0.0:
            return Num(ln / rn)
    return Bin(node.op, lhs, rhs, node.pos)


def simplify(node: Expr) -> Expr:
    """Public alias for the folding pass used after differentiation."""
    return _fold(node)


# ---------------------------------------------------------------------------
# code generation (shared by the numpy and numba backends)

def to_python(node: Expr, array: bool = False) -> str:
    """Emit a python expression over locals ``t, x0.., y0.., z0..``.

    The same source works elementwise for scalars (math namespace) and for
    numpy arrays (ufunc namespace); only the namespace differs.
    """
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return "t" if node.kind == "t" else f"{node.kind}{node.index}"
    if isinstance(node, Neg):
        return f"(-{to_python(node.arg, array)})"
    if isinstance(node, Call):
        fn = "_abs" if node.fn == "abs" else node.fn
        return f"{fn}({to_python(node.arg, array)})"
    if isinstance(node, Pow):
        return f"(({to_python(node.base, array)})**({node.exponent}))"
    return f"({to_python(node.left, array)} {node.op} {to_python(node.right, array)})"
