"""Coefficient fields: validated expression matrices plus compiled evaluators.

A field is a (rows x cols) matrix of expression trees with a declared
argument signature (which of t/x/y it may reference).  Each field compiles
to two evaluators sharing the same generated source text:

* a vectorized one operating on (n, d) sample blocks with numpy ufuncs,
* a scalar one suitable for ``numba.njit`` inside the stepping kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ValidationError
from .expr import Expr, parse_expression, to_python, variables

_KIND_NAMES = {"t": "t", "x": "x (fast)", "y": "y (slow)", "z": "z"}


def _scalar_sign(v):
    return 0.0 if v == 0.0 else math.copysign(1.0, v)


_SCALAR_NS = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "tanh": math.tanh,
    "_abs": abs,
    "sign": _scalar_sign,
}

_VECTOR_NS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "_abs": np.abs,
    "sign": np.sign,
}

# compiled-callable caches keyed by generated source
_VECTOR_CACHE: dict[str, object] = {}
_SCALAR_CACHE: dict[str, object] = {}


@dataclass(frozen=True)
class CoefficientField:
    """Matrix of expressions with a fixed argument signature."""

    name: str
    entries: tuple[tuple[Expr, ...], ...]  # rows x cols
    allowed: frozenset[str]  # subset of {'t','x','y','z'}

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.entries), len(self.entries[0]))

    @classmethod
    def from_strings(cls, name: str, rows, allowed) -> "CoefficientField":
        """Build from a vector (list of str) or matrix (list of list of str)."""
        if not rows:
            raise ValidationError(f"{name}: empty coefficient field")
        if isinstance(rows[0], str):
            rows = [[r] for r in rows]
        parsed = tuple(tuple(parse_expression(s) for s in row) for row in rows)
        ncol = len(parsed[0])
        if any(len(row) != ncol for row in parsed):
            raise ValidationError(f"{name}: ragged coefficient matrix")
        return cls(name, parsed, frozenset(allowed))

    @classmethod
    def from_exprs(cls, name: str, rows, allowed) -> "CoefficientField":
        rows = tuple(tuple(row) for row in rows)
        return cls(name, rows, frozenset(allowed))

    def validate(self, d1: int, d2: int) -> None:
        """Enforce the argument signature and variable index bounds."""
        bounds = {"t": 1, "x": d1, "y": d2, "z": d2}
        for i, row in enumerate(self.entries):
            for j, e in enumerate(row):
                for kind, idx in variables(e):
                    if kind not in self.allowed:
                        raise ValidationError(
                            f"argument-signature: {self.name}[{i}][{j}] may not "
                            f"reference {_KIND_NAMES[kind]} variables"
                        )
                    if idx >= bounds[kind]:
                        raise ValidationError(
                            f"{self.name}[{i}][{j}]: variable {kind}{idx + 1} out of "
                            f"range (d1={d1}, d2={d2})"
                        )

    # -- evaluators --------------------------------------------------------

    def evaluate(self, t, x, y) -> np.ndarray:
        """Reference (vectorized) evaluation -> (..., rows, cols)."""
        return self.compile_vector()(t, np.asarray(x, float), np.asarray(y, float))

    def source_key(self) -> str:
        rows, cols = self.shape
        parts = [f"{rows}x{cols}"]
        for row in self.entries:
            for e in row:
                parts.append(to_python(e))
        return "|".join(parts)

    def compile_vector(self):
        """callable(t, X(...,d1), Y(...,d2)) -> (..., rows, cols) float array.

        ``t`` may be a scalar or an array broadcastable against the leading
        axes of X/Y.
        """
        key = "vec:" + self.source_key()
        fn = _VECTOR_CACHE.get(key)
        if fn is None:
            rows, cols = self.shape
            lines = ["def _field(t, X, Y, _np=__np__):"]
            lines += _unpack_lines(self.entries, array=True)
            lines.append("    _lead = _np.broadcast(X[..., 0], Y[..., 0]).shape")
            lines.append(f"    out = _np.empty(_lead + ({rows}, {cols}))")
            for i, row in enumerate(self.entries):
                for j, e in enumerate(row):
                    lines.append(f"    out[..., {i}, {j}] = {to_python(e, array=True)}")
            lines.append("    return out")
            ns = dict(_VECTOR_NS)
            ns["__np__"] = np
            exec("\n".join(lines), ns)
            fn = ns["_field"]
            _VECTOR_CACHE[key] = fn
        return fn

    def compile_scalar(self):
        """njit-compiled callable(t, x(d1,), y(d2,), out(rows*cols,))."""
        key = f"scal:{int(backend.use_numba())}:" + self.source_key()
        fn = _SCALAR_CACHE.get(key)
        if fn is None:
            cols = self.shape[1]
            lines = ["def _field(t, x, y, out):"]
            lines += _unpack_lines(self.entries, array=False)
            for i, row in enumerate(self.entries):
                for j, e in enumerate(row):
                    lines.append(f"    out[{i * cols + j}] = {to_python(e)}")
            ns = dict(_SCALAR_NS)
            ns["sign"] = backend.scalar_sign()
            exec("\n".join(lines), ns)
            fn = backend.njit_compile(ns["_field"])
            _SCALAR_CACHE[key] = fn
        return fn


def _unpack_lines(entries, array: bool) -> list[str]:
    used: set[tuple[str, int]] = set()
    for row in entries:
        for e in row:
            used |= variables(e)
    lines = []
    src = {"x": "X", "y": "Y", "z": "Z"}
    for kind, idx in sorted(used):
        if kind == "t":
            continue
        if array:
            lines.append(f"    {kind}{idx} = {src[kind]}[..., {idx}]")
        else:
            lines.append(f"    {kind}{idx} = {src[kind].lower()}[{idx}]")
    return lines


def compile_bundle(fields: list[CoefficientField | None]):
    """Scalar evaluator writing several fields at once (numba-backend path).

    Returns ``eval(t, x, y, o0, o1, ...)`` with one flat output array per
    field; ``None`` fields produce no writes (their output slot is a dummy).
    Cached per backend so a backend flip cannot leak plain-python callables
    into jitted kernels.
    """
    key = (f"bundle:{int(backend.use_numba())}:"
           + ";".join("-" if f is None else f.source_key() for f in fields))
    fn = _SCALAR_CACHE.get(key)
    if fn is None:
        outs = ", ".join(f"o{i}" for i in range(len(fields)))
        lines = [f"def _bundle(t, x, y, {outs}):"]
        entries = []
        for f in fields:
            if f is not None:
                entries.extend(f.entries)
        lines += _unpack_lines(entries, array=False)
        wrote = False
        for i, f in enumerate(fields):
            if f is None:
                continue
            cols = f.shape[1]
            for r, row in enumerate(f.entries):
                for cidx, e in enumerate(row):
                    lines.append(f"    o{i}[{r * cols + cidx}] = {to_python(e)}")
                    wrote = True
        if not wrote:
            lines.append("    pass")
        ns = dict(_SCALAR_NS)
        ns["sign"] = backend.scalar_sign()
        exec("\n".join(lines), ns)
        fn = backend.njit_compile(ns["_bundle"])
        _SCALAR_CACHE[key] = fn
    return fn


def constant_field(name: str, values: np.ndarray, allowed=("x", "y")) -> CoefficientField:
    """Field of numeric constants (mainly for tests and zero coefficients)."""
    from .expr import Num

    arr = np.atleast_2d(np.asarray(values, float))
    rows = tuple(tuple(Num(float(v)) for v in row) for row in arr)
    return CoefficientField(name, rows, frozenset(allowed))


def compile_functional(expr: Expr, d2: int):
    """Compile a test functional over z into callable(Z(n, d2)) -> (n,)."""
    for kind, idx in variables(expr):
        if kind != "z":
            raise ValidationError("test functionals may only reference z variables")
        if idx >= d2:
            raise ValidationError(f"functional variable z{idx + 1} out of range")
    key = "fun:" + to_python(expr)
    fn = _VECTOR_CACHE.get(key)
    if fn is None:
        lines = ["def _phi(Z):"]
        for kind, idx in sorted(variables(expr)):
            lines.append(f"    z{idx} = Z[..., {idx}]")
        lines.append(f"    _v = {to_python(expr, array=True)}")
        lines.append("    return _v + __np__.zeros(Z.shape[:-1])")
        ns = dict(_VECTOR_NS)
        ns["__np__"] = np
        exec("\n".join(lines), ns)
        fn = ns["_phi"]
        _VECTOR_CACHE[key] = fn
    return fn
