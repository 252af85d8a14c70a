"""Scalar reverse-mode autodiff with nested differentiation.

Every quantity lives as a node in an append-only :class:`ExprGraph`.  The
backward pass either accumulates plain floats (fast, first order only) or,
with ``create_graph=True``, emits new nodes on the same graph so the result
can be differentiated again.

    >>> g = ExprGraph()
    >>> x = g.variable(2.0)
    >>> (dx,) = grad(x ** 4, [x], create_graph=True)
    >>> (ddx,) = grad(dx, [x], create_graph=True)
    >>> grad(ddx, [x])
    [48.0]
"""

from __future__ import annotations

import math
from typing import Sequence, Union

__all__ = [
    "AutodiffError",
    "DomainError",
    "NonFiniteError",
    "SingularMatrixError",
    "ExprGraph",
    "ExprRef",
    "grad",
    "stop_gradient",
    "magicbox",
    "exp",
    "log",
    "total",
    "linear_solve",
    "nested_derivatives",
]

# op codes
VAR, CONST, ADD, SUB, MUL, DIV, NEG, EXP, LOG, POWC, SCALE, SHIFT, SG, MAGIC, SUM = range(15)

OP_NAMES = (
    "variable", "constant", "add", "sub", "mul", "div", "neg", "exp", "log",
    "pow", "scale", "shift", "stop_gradient", "magicbox", "sum",
)

PIVOT_TOL = 1e-12


class AutodiffError(Exception):
    pass


class DomainError(AutodiffError, ValueError):
    """Raised for log of a non-positive number or division by zero."""


class NonFiniteError(AutodiffError, ArithmeticError):
    """Raised when a node would hold a NaN or infinite value."""


class SingularMatrixError(AutodiffError, ArithmeticError):
    pass


Operand = Union["ExprRef", float, int]


class ExprGraph:
    """Append-only arena of scalar expression nodes.

    Parents always precede children, so node index order is a topological
    order.  Nodes never change after being pushed.
    """

    __slots__ = ("ops", "args", "vals")

    def __init__(self) -> None:
        self.ops: list[int] = []
        self.args: list[tuple] = []
        self.vals: list[float] = []

    def __len__(self) -> int:
        return len(self.vals)

    def _push(self, op: int, args: tuple, val: float) -> ExprRef:
        vals = self.vals
        n = len(vals)
        if val - val != 0.0:  # NaN or +-inf
            raise NonFiniteError(f"node {n} ({OP_NAMES[op]} of {args}) evaluated to {val}")
        self.ops.append(op)
        self.args.append(args)
        vals.append(val)
        return ExprRef(self, n)

    def variable(self, value: float) -> ExprRef:
        return self._push(VAR, (), float(value))

    def constant(self, value: float) -> ExprRef:
        return self._push(CONST, (), float(value))

    def lift(self, x: Operand) -> ExprRef:
        if isinstance(x, ExprRef):
            if x.graph is not self:
                raise AutodiffError("cannot mix nodes from different graphs")
            return x
        return self.constant(x)

    def op_name(self, idx: int) -> str:
        return OP_NAMES[self.ops[idx]]


class ExprRef:
    """Handle to one node of an :class:`ExprGraph`."""

    __slots__ = ("graph", "idx")

    def __init__(self, graph: ExprGraph, idx: int) -> None:
        self.graph = graph
        self.idx = idx

    @property
    def value(self) -> float:
        return self.graph.vals[self.idx]

    @property
    def is_variable(self) -> bool:
        return self.graph.ops[self.idx] == VAR

    def __float__(self) -> float:
        return self.graph.vals[self.idx]

    def __repr__(self) -> str:
        return f"ExprRef(#{self.idx} {self.graph.op_name(self.idx)} = {self.value!r})"

    def _other(self, other: Operand) -> ExprRef:
        if isinstance(other, ExprRef):
            if other.graph is not self.graph:
                raise AutodiffError("cannot mix nodes from different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other: Operand) -> ExprRef:
        g = self.graph
        if not isinstance(other, ExprRef):
            c = float(other)
            return g._push(SHIFT, (self.idx, c), g.vals[self.idx] + c)
        o = self._other(other)
        return g._push(ADD, (self.idx, o.idx), g.vals[self.idx] + g.vals[o.idx])

    __radd__ = __add__

    def __sub__(self, other: Operand) -> ExprRef:
        g = self.graph
        if not isinstance(other, ExprRef):
            c = -float(other)
            return g._push(SHIFT, (self.idx, c), g.vals[self.idx] + c)
        o = self._other(other)
        return g._push(SUB, (self.idx, o.idx), g.vals[self.idx] - g.vals[o.idx])

    def __rsub__(self, other: Operand) -> ExprRef:
        return self._other(other) - self

    def __mul__(self, other: Operand) -> ExprRef:
        g = self.graph
        if not isinstance(other, ExprRef):
            c = float(other)
            return g._push(SCALE, (self.idx, c), g.vals[self.idx] * c)
        o = self._other(other)
        return g._push(MUL, (self.idx, o.idx), g.vals[self.idx] * g.vals[o.idx])

    __rmul__ = __mul__

    def __truediv__(self, other: Operand) -> ExprRef:
        g = self.graph
        if not isinstance(other, ExprRef):
            c = float(other)
            if c == 0.0:
                raise DomainError(f"division of node {self.idx} by zero")
            return g._push(SCALE, (self.idx, 1.0 / c), g.vals[self.idx] / c)
        o = self._other(other)
        den = g.vals[o.idx]
        if den == 0.0:
            raise DomainError(f"division by zero: denominator node {o.idx} is 0")
        return g._push(DIV, (self.idx, o.idx), g.vals[self.idx] / den)

    def __rtruediv__(self, other: Operand) -> ExprRef:
        return self._other(other) / self

    def __neg__(self) -> ExprRef:
        return self.graph._push(NEG, (self.idx,), -self.graph.vals[self.idx])

    def __pow__(self, p: Operand) -> ExprRef:
        g = self.graph
        if isinstance(p, ExprRef):
            # x ** y with a differentiable exponent needs x > 0
            return exp(p * log(self))
        p = float(p)
        if p == 0.0:
            return g.constant(1.0)
        if p == 1.0:
            return self
        base = g.vals[self.idx]
        if base == 0.0 and p < 0.0:
            raise DomainError(f"node {self.idx} is 0 raised to negative power {p}")
        if base < 0.0 and not p.is_integer():
            raise DomainError(f"node {self.idx} is negative raised to fractional power {p}")
        return g._push(POWC, (self.idx, p), base ** p)


def exp(x: ExprRef) -> ExprRef:
    g = x.graph
    try:
        val = math.exp(g.vals[x.idx])
    except OverflowError:
        raise NonFiniteError(f"exp overflow at node {x.idx} (argument {g.vals[x.idx]})") from None
    return g._push(EXP, (x.idx,), val)


def log(x: ExprRef) -> ExprRef:
    g = x.graph
    v = g.vals[x.idx]
    if v <= 0.0:
        raise DomainError(f"log of non-positive value {v} at node {x.idx}")
    return g._push(LOG, (x.idx,), math.log(v))


def stop_gradient(x: ExprRef) -> ExprRef:
    """Identity on values; blocks every derivative path at every order."""
    return x.graph._push(SG, (x.idx,), x.graph.vals[x.idx])


def magicbox(x: ExprRef) -> ExprRef:
    """``exp(x - stop_gradient(x))`` as a single fused node.

    Evaluates to exactly 1.0.  Its derivative is itself times ``dx``, which
    reproduces the score-function term at every order of differentiation.
    """
    return x.graph._push(MAGIC, (x.idx,), 1.0)


def total(terms: Sequence[ExprRef]) -> ExprRef:
    """N-ary sum of nodes from one graph."""
    if not terms:
        raise ValueError("total() of an empty sequence")
    g = terms[0].graph
    idxs = []
    for t in terms:
        if t.graph is not g:
            raise AutodiffError("cannot mix nodes from different graphs")
        idxs.append(t.idx)
    if len(idxs) == 1:
        return terms[0]
    return g._push(SUM, tuple(idxs), math.fsum(g.vals[i] for i in idxs))


def _accumulate(adj: list, i: int, contrib: ExprRef) -> None:
    cur = adj[i]
    adj[i] = contrib if cur is None else cur + contrib


def grad(
    output: ExprRef,
    wrt: Sequence[ExprRef],
    create_graph: bool = False,
    allow_intermediate: bool = False,
) -> list:
    """Derivatives of ``output`` with respect to each variable in ``wrt``.

    Returns floats when ``create_graph`` is false.  Otherwise returns nodes on
    the same graph, which may themselves be passed to :func:`grad` again.
    Variables that ``output`` does not depend on get a derivative of 0.

    ``allow_intermediate`` lifts the leaf requirement on ``wrt``; the result
    is then the adjoint at that node, which equals the derivative only when
    ``output`` depends on everything below it solely through ``wrt``.
    """
    g = output.graph
    for w in wrt:
        if w.graph is not g:
            raise AutodiffError("wrt variable belongs to a different graph")
        if g.ops[w.idx] != VAR and not allow_intermediate:
            raise AutodiffError(
                f"wrt node {w.idx} is a {g.op_name(w.idx)}, not a variable"
            )
    stop = min((w.idx for w in wrt), default=0)
    if create_graph:
        return _backward_graph(output, wrt, stop)
    return _backward_float(output, wrt, stop)


def _backward_float(output: ExprRef, wrt: Sequence[ExprRef], stop: int) -> list[float]:
    g = output.graph
    ops, args, vals = g.ops, g.args, g.vals
    o = output.idx
    adj = [0.0] * (o + 1)
    adj[o] = 1.0
    for i in range(o, stop - 1, -1):
        gi = adj[i]
        if gi == 0.0:
            continue
        op = ops[i]
        a = args[i]
        if op == ADD:
            adj[a[0]] += gi
            adj[a[1]] += gi
        elif op == MUL:
            adj[a[0]] += gi * vals[a[1]]
            adj[a[1]] += gi * vals[a[0]]
        elif op == SCALE:
            adj[a[0]] += gi * a[1]
        elif op == SHIFT:
            adj[a[0]] += gi
        elif op == SUB:
            adj[a[0]] += gi
            adj[a[1]] -= gi
        elif op == MAGIC or op == EXP:
            adj[a[0]] += gi * vals[i]
        elif op == SUM:
            for j in a:
                adj[j] += gi
        elif op == LOG:
            adj[a[0]] += gi / vals[a[0]]
        elif op == DIV:
            den = vals[a[1]]
            adj[a[0]] += gi / den
            adj[a[1]] -= gi * vals[i] / den
        elif op == NEG:
            adj[a[0]] -= gi
        elif op == POWC:
            p = a[1]
            adj[a[0]] += gi * p * vals[a[0]] ** (p - 1.0)
        # VAR, CONST, SG: leaves for differentiation
    out = []
    for w in wrt:
        d = adj[w.idx] if w.idx <= o else 0.0
        if not math.isfinite(d):
            raise NonFiniteError(f"derivative wrt node {w.idx} is {d}")
        out.append(d)
    return out


def _backward_graph(output: ExprRef, wrt: Sequence[ExprRef], stop: int) -> list[ExprRef]:
    g = output.graph
    ops, args = g.ops, g.args
    o = output.idx
    adj: list = [None] * (o + 1)
    adj[o] = g.constant(1.0)
    for i in range(o, stop - 1, -1):
        gi = adj[i]
        if gi is None:
            continue
        op = ops[i]
        a = args[i]
        if op == ADD:
            _accumulate(adj, a[0], gi)
            _accumulate(adj, a[1], gi)
        elif op == MUL:
            _accumulate(adj, a[0], gi * ExprRef(g, a[1]))
            _accumulate(adj, a[1], gi * ExprRef(g, a[0]))
        elif op == SCALE:
            _accumulate(adj, a[0], gi * a[1])
        elif op == SHIFT:
            _accumulate(adj, a[0], gi)
        elif op == SUB:
            _accumulate(adj, a[0], gi)
            _accumulate(adj, a[1], -gi)
        elif op == MAGIC or op == EXP:
            _accumulate(adj, a[0], gi * ExprRef(g, i))
        elif op == SUM:
            for j in a:
                _accumulate(adj, j, gi)
        elif op == LOG:
            _accumulate(adj, a[0], gi / ExprRef(g, a[0]))
        elif op == DIV:
            den = ExprRef(g, a[1])
            _accumulate(adj, a[0], gi / den)
            _accumulate(adj, a[1], -(gi * ExprRef(g, i) / den))
        elif op == NEG:
            _accumulate(adj, a[0], -gi)
        elif op == POWC:
            p = a[1]
            _accumulate(adj, a[0], gi * (ExprRef(g, a[0]) ** (p - 1.0)) * p)
    return [
        adj[w.idx] if w.idx <= o and adj[w.idx] is not None else g.constant(0.0)
        for w in wrt
    ]


def nested_derivatives(
    output: ExprRef, params: Sequence[ExprRef], max_order: int
) -> list[list[float]]:
    """First-parameter derivative stack of ``output``.

    Order 1 is the full gradient.  Order k > 1 is the gradient of entry 0 of
    the order k-1 vector.  Returns ``max_order`` lists of floats.
    """
    if not 1 <= max_order:
        raise ValueError(f"max_order must be >= 1, got {max_order}")
    stack: list[list[float]] = []
    target = output
    for order in range(1, max_order + 1):
        last = order == max_order
        ds = grad(target, params, create_graph=not last)
        if last:
            stack.append(list(ds))
        else:
            stack.append([d.value for d in ds])
            target = ds[0]
    return stack


def linear_solve(A: Sequence[Sequence[Operand]], b: Sequence[Operand]) -> list[ExprRef]:
    """Solve ``A x = b`` by LU with partial pivoting on graph scalars.

    All arithmetic goes through graph nodes, so the solution can be
    differentiated to any order with respect to variables inside A and b.
    Pivot choice depends on values only.
    """
    n = len(A)
    if n == 0 or any(len(row) != n for row in A) or len(b) != n:
        raise ValueError("linear_solve needs a square matrix and a matching vector")
    g = _find_graph(A, b)
    M = [[g.lift(x) for x in row] for row in A]
    y = [g.lift(x) for x in b]
    for k in range(n):
        p = max(range(k, n), key=lambda r: abs(M[r][k].value))
        if abs(M[p][k].value) < PIVOT_TOL:
            raise SingularMatrixError(
                f"pivot {M[p][k].value:.3e} in column {k} is below {PIVOT_TOL}"
            )
        if p != k:
            M[k], M[p] = M[p], M[k]
            y[k], y[p] = y[p], y[k]
        piv = M[k][k]
        for r in range(k + 1, n):
            if M[r][k].value == 0.0 and _is_const(M[r][k]):
                continue
            f = M[r][k] / piv
            for c in range(k + 1, n):
                M[r][c] = M[r][c] - f * M[k][c]
            y[r] = y[r] - f * y[k]
    x: list = [None] * n
    for k in range(n - 1, -1, -1):
        acc = y[k]
        for c in range(k + 1, n):
            acc = acc - M[k][c] * x[c]
        x[k] = acc / M[k][k]
    return x


def _is_const(x: ExprRef) -> bool:
    return x.graph.ops[x.idx] == CONST


def _find_graph(A, b) -> ExprGraph:
    for row in A:
        for x in row:
            if isinstance(x, ExprRef):
                return x.graph
    for x in b:
        if isinstance(x, ExprRef):
            return x.graph
    return ExprGraph()
