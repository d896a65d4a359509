"""Reverse-mode automatic differentiation over scalar expression tapes.

Expressions are nodes on a flat tape owned by a ``Graph``.  Building is
define-by-run through operator overloading; evaluation and the backward
sweep are single passes over the tape, compiled with numba.  Symbolic
input derivatives (``input_derivative``) append new nodes to the same
tape, so the derivative of an expression with respect to its input stays
differentiable with respect to every other variable in the graph.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = [
    "Expression",
    "Graph",
    "NonFiniteValueError",
    "exp",
    "tanh",
    "sin",
    "cos",
]

# Opcodes.  CONST and VAR carry their value on the tape; the rest compute
# from one or two operand slots.
_CONST = 0
_VAR = 1
_ADD = 2
_SUB = 3
_MUL = 4
_DIV = 5
_NEG = 6
_TANH = 7
_EXP = 8
_IPOW = 9
_SIN = 10
_COS = 11

_OP_NAMES = (
    "const", "var", "add", "sub", "mul", "div",
    "neg", "tanh", "exp", "ipow", "sin", "cos",
)

_BINARY_OPS = (_ADD, _SUB, _MUL, _DIV)
_UNARY_OPS = (_NEG, _TANH, _EXP, _IPOW, _SIN, _COS)


class NonFiniteValueError(ArithmeticError):
    """A forward pass produced inf or nan; identifies the first bad node."""

    def __init__(self, node_index: int, op_name: str):
        super().__init__(
            f"non-finite value at tape node {node_index} (op '{op_name}')"
        )
        self.node_index = node_index
        self.op_name = op_name


@njit(cache=True, error_model="numpy")
def _forward(op, arg_a, arg_b, aux, val, n):
    for i in range(n):
        o = op[i]
        if o < 2:  # const / var already hold their value
            continue
        x = val[arg_a[i]]
        if o == 2:
            val[i] = x + val[arg_b[i]]
        elif o == 3:
            val[i] = x - val[arg_b[i]]
        elif o == 4:
            val[i] = x * val[arg_b[i]]
        elif o == 5:
            val[i] = x / val[arg_b[i]]
        elif o == 6:
            val[i] = -x
        elif o == 7:
            val[i] = math.tanh(x)
        elif o == 8:
            val[i] = math.exp(x)
        elif o == 9:
            val[i] = x ** np.int64(aux[i])
        elif o == 10:
            val[i] = math.sin(x)
        else:
            val[i] = math.cos(x)


@njit(cache=True, error_model="numpy")
def _backward(op, arg_a, arg_b, aux, val, adj, root):
    adj[root] = 1.0
    for i in range(root, -1, -1):
        g = adj[i]
        if g == 0.0:
            continue
        o = op[i]
        if o < 2:
            continue
        ia = arg_a[i]
        if o == 2:
            adj[ia] += g
            adj[arg_b[i]] += g
        elif o == 3:
            adj[ia] += g
            adj[arg_b[i]] -= g
        elif o == 4:
            adj[ia] += g * val[arg_b[i]]
            adj[arg_b[i]] += g * val[ia]
        elif o == 5:
            bv = val[arg_b[i]]
            adj[ia] += g / bv
            adj[arg_b[i]] -= g * val[ia] / (bv * bv)
        elif o == 6:
            adj[ia] -= g
        elif o == 7:
            adj[ia] += g * (1.0 - val[i] * val[i])
        elif o == 8:
            adj[ia] += g * val[i]
        elif o == 9:
            k = np.int64(aux[i])
            adj[ia] += g * aux[i] * val[ia] ** (k - 1)
        elif o == 10:
            adj[ia] += g * math.cos(val[ia])
        else:
            adj[ia] -= g * math.sin(val[ia])


class Expression:
    """Handle to one tape node.  Cheap to copy; identity is (graph, index)."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    # -- arithmetic -----------------------------------------------------
    def _lift(self, other):
        if isinstance(other, Expression):
            if other.graph is not self.graph:
                raise ValueError("expressions belong to different graphs")
            return other
        return self.graph.constant(float(other))

    def __add__(self, other):
        return self.graph._emit(_ADD, self.index, self._lift(other).index)

    def __radd__(self, other):
        return self._lift(other).__add__(self)

    def __sub__(self, other):
        return self.graph._emit(_SUB, self.index, self._lift(other).index)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        return self.graph._emit(_MUL, self.index, self._lift(other).index)

    def __rmul__(self, other):
        return self._lift(other).__mul__(self)

    def __truediv__(self, other):
        return self.graph._emit(_DIV, self.index, self._lift(other).index)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return self.graph._emit(_NEG, self.index)

    def __pow__(self, k):
        if not isinstance(k, (int, np.integer)):
            raise TypeError("only integer exponents are supported")
        return self.graph._emit(_IPOW, self.index, aux=float(k))

    def __repr__(self):
        op = _OP_NAMES[self.graph._op[self.index]]
        return f"Expression({op}@{self.index})"


def tanh(x: Expression) -> Expression:
    return x.graph._emit(_TANH, x.index)


def exp(x: Expression) -> Expression:
    return x.graph._emit(_EXP, x.index)


def sin(x: Expression) -> Expression:
    return x.graph._emit(_SIN, x.index)


def cos(x: Expression) -> Expression:
    return x.graph._emit(_COS, x.index)


class Graph:
    """A flat tape of scalar operations.

    Nodes only ever reference earlier nodes, so the tape is acyclic by
    construction and a single left-to-right pass evaluates it.  Variables
    are bound with :meth:`bind` (or the ``bindings`` argument of
    :meth:`evaluate`) and keep their value until rebound, which makes it
    cheap to rebind a handful of variables and re-run a large tape.
    """

    def __init__(self):
        self._op: list[int] = []
        self._a: list[int] = []
        self._b: list[int] = []
        self._aux: list[float] = []
        self._vals: list[float] = []  # const/var payloads; 0.0 elsewhere
        self._const_cache: dict[float, int] = {}
        self._dirty = True
        self._opa = self._aa = self._ba = self._auxa = self._vala = None
        self._adj = None
        self._last_forward = 0

    def __len__(self):
        return len(self._op)

    # -- construction ---------------------------------------------------
    def _emit(self, op, a=0, b=0, aux=0.0, val=0.0) -> Expression:
        self._op.append(op)
        self._a.append(a)
        self._b.append(b)
        self._aux.append(aux)
        self._vals.append(val)
        self._dirty = True
        return Expression(self, len(self._op) - 1)

    def constant(self, value) -> Expression:
        value = float(value)
        idx = self._const_cache.get(value)
        if idx is not None:
            return Expression(self, idx)
        node = self._emit(_CONST, val=value)
        self._const_cache[value] = node.index
        return node

    def variable(self, value=0.0) -> Expression:
        return self._emit(_VAR, val=float(value))

    def bind(self, var: Expression, value) -> None:
        """Assign a value to a variable node."""
        if var.graph is not self:
            raise ValueError("variable belongs to a different graph")
        if self._op[var.index] != _VAR:
            raise ValueError("only variables can be bound")
        value = float(value)
        self._vals[var.index] = value
        if not self._dirty:
            self._vala[var.index] = value
        self._last_forward = 0

    def bind_many(self, variables, values) -> None:
        """Bind a sequence of variables to a sequence of values at once."""
        if len(variables) != len(values):
            raise ValueError("variables and values differ in length")
        vals = self._vals
        for var, value in zip(variables, values):
            vals[var.index] = float(value)
        if not self._dirty:
            idx = np.fromiter(
                (v.index for v in variables), dtype=np.int64, count=len(variables)
            )
            self._vala[idx] = np.asarray(values, dtype=np.float64)
        self._last_forward = 0

    def _compile(self):
        self._opa = np.asarray(self._op, dtype=np.uint8)
        self._aa = np.asarray(self._a, dtype=np.int64)
        self._ba = np.asarray(self._b, dtype=np.int64)
        self._auxa = np.asarray(self._aux, dtype=np.float64)
        self._vala = np.asarray(self._vals, dtype=np.float64)
        self._adj = np.zeros(len(self._op), dtype=np.float64)
        self._dirty = False
        self._last_forward = 0

    # -- execution ------------------------------------------------------
    def evaluate(self, expr: Expression, bindings=None) -> float:
        """Run the forward pass up to ``expr`` and return its value.

        Raises :class:`NonFiniteValueError` naming the first tape node
        whose value is inf or nan.
        """
        if bindings:
            for var, value in bindings.items():
                self.bind(var, value)
        if self._dirty:
            self._compile()
        n = expr.index + 1
        _forward(self._opa, self._aa, self._ba, self._auxa, self._vala, n)
        self._last_forward = n
        head = self._vala[:n]
        if not np.isfinite(head).all():
            bad = int(np.nonzero(~np.isfinite(head))[0][0])
            raise NonFiniteValueError(bad, _OP_NAMES[self._op[bad]])
        return float(self._vala[expr.index])

    def value_of(self, expr: Expression) -> float:
        """Value cached by the most recent forward pass covering ``expr``."""
        if self._dirty or expr.index >= self._last_forward:
            return self.evaluate(expr)
        return float(self._vala[expr.index])

    def gradient(self, loss: Expression, wrt) -> np.ndarray:
        """Exact reverse-mode gradient of ``loss`` with respect to ``wrt``.

        One backward sweep over the tape; cost linear in tape length.
        Variables that ``loss`` does not depend on get a zero entry.
        """
        n = loss.index + 1
        if self._dirty or self._last_forward < n:
            self.evaluate(loss)
        adj = self._adj
        adj[:n] = 0.0
        _backward(self._opa, self._aa, self._ba, self._auxa, self._vala, adj, loss.index)
        out = np.empty(len(wrt), dtype=np.float64)
        for i, var in enumerate(wrt):
            if var.graph is not self:
                raise ValueError("variable belongs to a different graph")
            out[i] = adj[var.index] if var.index < n else 0.0
        return out

    def input_derivative(self, output: Expression, input_var: Expression, order: int) -> Expression:
        """Symbolic derivative of ``output`` with respect to ``input_var``.

        Returns a new expression on the same tape, so the result can be
        evaluated and differentiated like any other node.  ``order`` must
        be 1 or 2.
        """
        if order not in (1, 2):
            raise ValueError("derivative order must be 1 or 2")
        if input_var.graph is not self or output.graph is not self:
            raise ValueError("expressions belong to a different graph")
        if self._op[input_var.index] != _VAR:
            raise ValueError("input must be a variable node")
        root = output
        for _ in range(order):
            root = self._differentiate(root, input_var)
        return root

    # -- symbolic differentiation ----------------------------------------
    def _is_const(self, idx: int, value: float) -> bool:
        return self._op[idx] == _CONST and self._vals[idx] == value

    def _add2(self, x: int, y: int) -> int:
        if self._is_const(x, 0.0):
            return y
        if self._is_const(y, 0.0):
            return x
        return self._emit(_ADD, x, y).index

    def _sub2(self, x: int, y: int) -> int:
        if self._is_const(y, 0.0):
            return x
        if self._is_const(x, 0.0):
            return self._emit(_NEG, y).index
        return self._emit(_SUB, x, y).index

    def _mul2(self, x: int, y: int) -> int:
        if self._is_const(x, 0.0) or self._is_const(y, 0.0):
            return self.constant(0.0).index
        if self._is_const(x, 1.0):
            return y
        if self._is_const(y, 1.0):
            return x
        return self._emit(_MUL, x, y).index

    def _differentiate(self, root: Expression, var: Expression) -> Expression:
        # Collect the nodes root actually depends on, then emit tangent
        # nodes in tape order.  Branches independent of var collapse to a
        # shared zero constant, which the pruned emitters propagate.
        op, a, b = self._op, self._a, self._b
        support = set()
        stack = [root.index]
        while stack:
            i = stack.pop()
            if i in support:
                continue
            support.add(i)
            o = op[i]
            if o >= 2:
                stack.append(a[i])
                if o <= 5:
                    stack.append(b[i])
        zero = self.constant(0.0).index
        vidx = var.index
        d = {}
        for i in sorted(support):
            o = op[i]
            if i == vidx:
                d[i] = self.constant(1.0).index
                continue
            if o < 2:
                d[i] = zero
                continue
            ia = a[i]
            da = d[ia]
            if o == _ADD:
                d[i] = self._add2(da, d[b[i]])
            elif o == _SUB:
                d[i] = self._sub2(da, d[b[i]])
            elif o == _MUL:
                ib = b[i]
                d[i] = self._add2(self._mul2(da, ib), self._mul2(ia, d[ib]))
            elif o == _DIV:
                ib = b[i]
                db = d[ib]
                lhs = self.constant(0.0).index if self._is_const(da, 0.0) \
                    else self._emit(_DIV, da, ib).index
                if self._is_const(db, 0.0):
                    d[i] = lhs
                else:
                    num = self._mul2(ia, db)
                    den = self._emit(_IPOW, ib, aux=2.0).index
                    d[i] = self._sub2(lhs, self._emit(_DIV, num, den).index)
            elif o == _NEG:
                d[i] = zero if self._is_const(da, 0.0) \
                    else self._emit(_NEG, da).index
            elif o == _TANH:
                if self._is_const(da, 0.0):
                    d[i] = zero
                else:
                    sq = self._emit(_IPOW, i, aux=2.0).index
                    sech2 = self._sub2(self.constant(1.0).index, sq)
                    d[i] = self._mul2(sech2, da)
            elif o == _EXP:
                d[i] = self._mul2(i, da)
            elif o == _IPOW:
                k = self._aux[i]
                if self._is_const(da, 0.0) or k == 0.0:
                    d[i] = zero
                else:
                    ki = int(k)
                    if ki == 1:
                        base = self.constant(1.0).index
                    elif ki == 2:
                        base = ia
                    else:
                        base = self._emit(_IPOW, ia, aux=float(ki - 1)).index
                    d[i] = self._mul2(self.constant(k).index, self._mul2(base, da))
            elif o == _SIN:
                d[i] = self._mul2(self._emit(_COS, ia).index, da)
            else:  # cos
                d[i] = zero if self._is_const(da, 0.0) else self._emit(
                    _NEG, self._mul2(self._emit(_SIN, ia).index, da)
                ).index
        return Expression(self, d[root.index])
