"""Scalar reverse-mode automatic differentiation on an explicit tape.

Every arithmetic operation on a :class:`Var` appends one node to its
:class:`Tape`.  A node keeps its operand indices and the local partial
derivatives evaluated at record time, so a reverse sweep is a single pass
over the node list.  :func:`grad_as_var` performs the same sweep but records
it on the tape, which makes the returned derivative differentiable again::

    tape = Tape()
    x = tape.var(2.0)
    y = x * x * x
    dy = grad_as_var(y, x)      # 3x^2, itself a Var
    grad(dy, [x])               # [12.0]

The tape is single threaded.  Build one tape per worker (or per path) and
clear it between training iterations.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

from .errors import NumericError, UsageError

__all__ = [
    "Tape",
    "Var",
    "grad",
    "grad_as_var",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "tanh",
    "leaky_relu",
    "maximum",
    "minimum",
]

SOFTPLUS_TINY = 2.2250738585072014e-308  # smallest normal double


def _softplus_value(x: float) -> float:
    # Equal to x + log1p(exp(-x)) for x > 0, which covers the overflow branch.
    return max(max(x, 0.0) + math.log1p(math.exp(-abs(x))), SOFTPLUS_TINY)


def _sigmoid_value(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class Tape:
    """Append-only list of primitive operations.

    Parallel lists hold, per node: the op name, operand indices, a constant
    (exponent, slope, bound, ...), the recorded value and the local partials.
    Operands always precede results, so index order is a topological order.
    """

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.args: list[tuple[int, ...]] = []
        self.consts: list[float | None] = []
        self.values: list[float] = []
        self.partials: list[tuple[float, ...]] = []

    def __len__(self) -> int:
        return len(self.values)

    def var(self, value: float) -> "Var":
        """Create an independent leaf variable."""
        return self._push("leaf", (), None, float(value), ())

    def clear(self) -> None:
        self.ops.clear()
        self.args.clear()
        self.consts.clear()
        self.values.clear()
        self.partials.clear()

    def _push(self, op, args, const, value, partials) -> "Var":
        self.ops.append(op)
        self.args.append(args)
        self.consts.append(const)
        self.values.append(value)
        self.partials.append(partials)
        return Var(self, len(self.values) - 1)

    def replay(self, leaves: dict[int, float] | None = None) -> list[float]:
        """Recompute every node value from the leaves.

        ``leaves`` maps leaf indices to replacement values; the others keep
        their recorded value.  Without overrides the result equals
        ``self.values`` bit for bit.
        """
        leaves = leaves or {}
        out: list[float] = []
        for i, op in enumerate(self.ops):
            if op == "leaf":
                out.append(float(leaves.get(i, self.values[i])))
                continue
            a = [out[j] for j in self.args[i]]
            out.append(_FORWARD[op](a, self.consts[i]))
        return out


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> float:
        return self.tape.values[self.index]

    def __float__(self) -> float:
        return self.value

    def __repr__(self) -> str:
        return f"Var({self.value!r}, node={self.index})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise UsageError("operands live on different tapes")
            return other
        return None

    def __add__(self, other):
        o = self._lift(other)
        if o is None:
            c = float(other)
            return self.tape._push("addc", (self.index,), c, self.value + c, (1.0,))
        return self.tape._push("add", (self.index, o.index), None, self.value + o.value, (1.0, 1.0))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        if o is None:
            return self + (-float(other))
        return self.tape._push("sub", (self.index, o.index), None, self.value - o.value, (1.0, -1.0))

    def __rsub__(self, other):
        c = float(other)
        return self.tape._push("rsubc", (self.index,), c, c - self.value, (-1.0,))

    def __neg__(self):
        return self.tape._push("mulc", (self.index,), -1.0, -self.value, (-1.0,))

    def __mul__(self, other):
        o = self._lift(other)
        if o is None:
            c = float(other)
            return self.tape._push("mulc", (self.index,), c, self.value * c, (c,))
        a, b = self.value, o.value
        return self.tape._push("mul", (self.index, o.index), None, a * b, (b, a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        if o is None:
            return self * (1.0 / float(other))
        a, b = self.value, o.value
        q = a / b
        return self.tape._push("div", (self.index, o.index), None, q, (1.0 / b, -q / b))

    def __rtruediv__(self, other):
        c = float(other)
        a = self.value
        q = c / a
        return self.tape._push("rdivc", (self.index,), c, q, (-q / a,))

    def __pow__(self, p):
        if isinstance(p, Var):
            raise UsageError("only constant exponents are supported")
        p = float(p)
        a = self.value
        return self.tape._push("powc", (self.index,), p, a**p, (p * a ** (p - 1.0),))


def _check(x) -> Var:
    if not isinstance(x, Var):
        raise UsageError(f"expected a Var, got {type(x).__name__}")
    return x


def exp(x: Var) -> Var:
    v = math.exp(_check(x).value)
    return x.tape._push("exp", (x.index,), None, v, (v,))


def log(x: Var) -> Var:
    a = _check(x).value
    return x.tape._push("log", (x.index,), None, math.log(a), (1.0 / a,))


def sigmoid(x: Var) -> Var:
    s = _sigmoid_value(_check(x).value)
    return x.tape._push("sigmoid", (x.index,), None, s, (s * (1.0 - s),))


def softplus(x: Var) -> Var:
    """log(1 + e^x), overflow safe and strictly positive."""
    a = _check(x).value
    return x.tape._push("softplus", (x.index,), None, _softplus_value(a), (_sigmoid_value(a),))


def tanh(x: Var) -> Var:
    v = math.tanh(_check(x).value)
    return x.tape._push("tanh", (x.index,), None, v, (1.0 - v * v,))


def leaky_relu(x: Var, slope: float) -> Var:
    """x for x > 0, slope*x otherwise (the derivative at 0 is ``slope``)."""
    a = _check(x).value
    d = 1.0 if a > 0 else slope
    return x.tape._push("lrelu", (x.index,), float(slope), a * d, (d,))


def maximum(x: Var, y) -> Var:
    """max(x, y) where y is a constant or another Var on the same tape."""
    _check(x)
    o = x._lift(y)
    if o is None:
        c = float(y)
        d = 1.0 if x.value > c else 0.0
        return x.tape._push("maxc", (x.index,), c, max(x.value, c), (d,))
    first = x.value >= o.value
    return x.tape._push("max", (x.index, o.index), None, max(x.value, o.value),
                        (1.0, 0.0) if first else (0.0, 1.0))


def minimum(x: Var, y) -> Var:
    """min(x, y) where y is a constant or another Var on the same tape."""
    _check(x)
    o = x._lift(y)
    if o is None:
        c = float(y)
        d = 1.0 if x.value < c else 0.0
        return x.tape._push("minc", (x.index,), c, min(x.value, c), (d,))
    first = x.value <= o.value
    return x.tape._push("min", (x.index, o.index), None, min(x.value, o.value),
                        (1.0, 0.0) if first else (0.0, 1.0))


_FORWARD = {
    "add": lambda a, c: a[0] + a[1],
    "sub": lambda a, c: a[0] - a[1],
    "mul": lambda a, c: a[0] * a[1],
    "div": lambda a, c: a[0] / a[1],
    "addc": lambda a, c: a[0] + c,
    "rsubc": lambda a, c: c - a[0],
    "mulc": lambda a, c: a[0] * c,
    "rdivc": lambda a, c: c / a[0],
    "powc": lambda a, c: a[0] ** c,
    "exp": lambda a, c: math.exp(a[0]),
    "log": lambda a, c: math.log(a[0]),
    "sigmoid": lambda a, c: _sigmoid_value(a[0]),
    "softplus": lambda a, c: _softplus_value(a[0]),
    "tanh": lambda a, c: math.tanh(a[0]),
    "lrelu": lambda a, c: a[0] * (1.0 if a[0] > 0 else c),
    "maxc": lambda a, c: max(a[0], c),
    "minc": lambda a, c: min(a[0], c),
    "max": lambda a, c: max(a[0], a[1]),
    "min": lambda a, c: min(a[0], a[1]),
}


def _partials_as_vars(tape: Tape, i: int) -> tuple:
    """Local partials of node ``i`` as Vars (or floats when constant)."""
    op = tape.ops[i]
    args = [Var(tape, j) for j in tape.args[i]]
    out = Var(tape, i)
    c = tape.consts[i]
    if op == "mul":
        return (args[1], args[0])
    if op == "div":
        inv = 1.0 / args[1]
        return (inv, -(out * inv))
    if op == "rdivc":
        return (-(out / args[0]),)
    if op == "powc":
        if c == 1.0:
            return (1.0,)
        return ((args[0] ** (c - 1.0)) * c,)
    if op == "exp":
        return (out,)
    if op == "log":
        return (1.0 / args[0],)
    if op == "sigmoid":
        return (out * (1.0 - out),)
    if op == "softplus":
        return (sigmoid(args[0]),)
    if op == "tanh":
        return (1.0 - out * out,)
    # piecewise-linear and affine ops: partials are constants
    return tape.partials[i]


def _validate(output: Var, inputs: Sequence[Var]) -> Tape:
    if not isinstance(output, Var):
        raise UsageError("output must be a Var")
    tape = output.tape
    for v in inputs:
        if not isinstance(v, Var) or v.tape is not tape:
            raise UsageError("all inputs must be Vars on the output's tape")
    return tape


def grad(output: Var, inputs: Iterable[Var]) -> list[float]:
    """d output / d input for every input, from one reverse sweep."""
    inputs = list(inputs)
    tape = _validate(output, inputs)
    n = output.index + 1
    adj = [0.0] * n
    adj[output.index] = 1.0
    args, partials = tape.args, tape.partials
    for i in range(output.index, -1, -1):
        a = adj[i]
        if a == 0.0:
            continue
        if a != a:
            raise NumericError(f"NaN adjoint at node {i} ({tape.ops[i]})", node=i)
        for j, p in zip(args[i], partials[i]):
            adj[j] += a * p
    return [adj[v.index] if v.index < n else 0.0 for v in inputs]


def grad_as_var(output: Var, input: Var) -> Var:
    """d output / d input as a Var recorded on the same tape.

    The reverse sweep is itself taped, so the result can be differentiated
    again with :func:`grad` or :func:`grad_as_var`.  If ``output`` does not
    depend on ``input`` a zero constant is returned.
    """
    tape = _validate(output, [input])
    top = output.index
    # Only nodes on a path between input and output matter.
    reach = bytearray(top + 1)
    if input.index <= top:
        reach[input.index] = 1
        for i in range(input.index + 1, top + 1):
            for j in tape.args[i]:
                if reach[j]:
                    reach[i] = 1
                    break
    adj: dict[int, Var | float] = {top: 1.0}
    for i in range(top, input.index, -1):
        a = adj.pop(i, None)
        if a is None or not reach[i]:
            continue
        if isinstance(a, Var) and a.value != a.value:
            raise NumericError(f"NaN adjoint at node {i} ({tape.ops[i]})", node=i)
        parts = _partials_as_vars(tape, i)
        for j, p in zip(tape.args[i], parts):
            if not reach[j]:
                continue
            if isinstance(p, float) and p == 0.0:
                continue
            contrib = a * p
            if isinstance(a, float) and isinstance(p, float):
                contrib = float(contrib)
            prev = adj.get(j)
            adj[j] = contrib if prev is None else prev + contrib
    result = adj.get(input.index, 0.0)
    if not isinstance(result, Var):
        result = tape.var(result)
    return result
