"""Symbolic expression kernel with exact repeated differentiation.

The node vocabulary is deliberately small: constants, indexed variables,
n-ary sums and products, nonnegative integer powers, exp, and negation.
That covers every objective and constraint family this package builds
(quadratics, quartic couplings, exp(v.z) + exp(-v.z)) while keeping
differentiation total and exact.

Expressions are immutable DAGs.  Shared subtrees are shared by object
reference; derivatives are memoized per node so a subtree that appears in
many rows is differentiated once.  Simplification is best-effort constant
folding and 0/1 absorption only -- semantic equality is always checked by
evaluation, never structurally.

Caches (per-node derivative memo, degree memo) are append-only and
value-deterministic, so evaluation is externally pure and expressions are
safe to share across threads.
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

Number = Union[int, float]


class ExprError(Exception):
    """Base class for expression kernel errors."""


class DeclarationError(ExprError):
    """A variable reference is not declared in the governing variable space."""


class EvaluationError(ExprError):
    """Evaluation hit a variable with no assigned value."""


class Expression:
    """Base node.  Use the module-level constructors, not the classes."""

    __slots__ = ("support", "_dcache", "_degree", "__weakref__")

    def __init__(self, support):
        self.support = support
        self._dcache = None
        self._degree = -2  # sentinel: not computed

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, as_expression(other))

    def __radd__(self, other):
        return add(as_expression(other), self)

    def __sub__(self, other):
        return sub(self, as_expression(other))

    def __rsub__(self, other):
        return sub(as_expression(other), self)

    def __mul__(self, other):
        return mul(self, as_expression(other))

    def __rmul__(self, other):
        return mul(as_expression(other), self)

    def __pow__(self, k):
        return pow_(self, k)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return to_sexpr(self)


class Const(Expression):
    __slots__ = ("value",)

    def __init__(self, value):
        super().__init__(_EMPTY)
        self.value = float(value)


class Var(Expression):
    __slots__ = ("name", "index")

    def __init__(self, name, index):
        super().__init__(None)  # support set below; needs self
        self.name = name
        self.index = index
        self.support = frozenset((self,))


class Sum(Expression):
    __slots__ = ("terms",)

    def __init__(self, terms, support):
        super().__init__(support)
        self.terms = terms


class Prod(Expression):
    __slots__ = ("factors",)

    def __init__(self, factors, support):
        super().__init__(support)
        self.factors = factors


class Pow(Expression):
    __slots__ = ("base", "exponent")

    def __init__(self, base, exponent):
        super().__init__(base.support)
        self.base = base
        self.exponent = exponent


class Exp(Expression):
    __slots__ = ("arg",)

    def __init__(self, arg):
        super().__init__(arg.support)
        self.arg = arg


class Neg(Expression):
    __slots__ = ("arg",)

    def __init__(self, arg):
        super().__init__(arg.support)
        self.arg = arg


_EMPTY = frozenset()
_VARS: dict = {}

ZERO = Const(0.0)
ONE = Const(1.0)


def const(value: Number) -> Const:
    if value == 0.0:
        return ZERO
    if value == 1.0:
        return ONE
    return Const(value)


def var(name: str, index: int) -> Var:
    """Interned variable node for (name, index)."""
    key = (name, index)
    node = _VARS.get(key)
    if node is None:
        if index < 0:
            raise DeclarationError(f"variable index must be >= 0, got {key}")
        node = _VARS[key] = Var(name, int(index))
    return node


def as_expression(x) -> Expression:
    if isinstance(x, Expression):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return const(float(x))
    raise TypeError(f"cannot coerce {type(x).__name__} to Expression")


def add(*terms) -> Expression:
    """n-ary sum with flattening and constant folding."""
    flat = []
    total = 0.0
    for t in terms:
        t = as_expression(t)
        if isinstance(t, Const):
            total += t.value
        elif isinstance(t, Sum):
            flat.extend(t.terms)
        else:
            flat.append(t)
    if total != 0.0:
        flat.append(const(total))
    if not flat:
        return ZERO
    if len(flat) == 1:
        return flat[0]
    support = frozenset().union(*(t.support for t in flat))
    return Sum(tuple(flat), support)


def sub(a, b) -> Expression:
    return add(as_expression(a), neg(as_expression(b)))


def mul(*factors) -> Expression:
    """n-ary product with flattening, constant folding and 0/1 absorption."""
    flat = []
    coeff = 1.0
    for f in factors:
        f = as_expression(f)
        if isinstance(f, Const):
            coeff *= f.value
        elif isinstance(f, Prod):
            # leading constant of a nested product folds into coeff
            for g in f.factors:
                if isinstance(g, Const):
                    coeff *= g.value
                else:
                    flat.append(g)
        else:
            flat.append(f)
    if coeff == 0.0:
        return ZERO
    if not flat:
        return const(coeff)
    if coeff != 1.0:
        flat.insert(0, const(coeff))
    if len(flat) == 1:
        return flat[0]
    support = frozenset().union(*(t.support for t in flat))
    return Prod(tuple(flat), support)


def neg(e) -> Expression:
    e = as_expression(e)
    if isinstance(e, Const):
        return const(-e.value)
    if isinstance(e, Neg):
        return e.arg
    return Neg(e)


def pow_(e, k: int) -> Expression:
    e = as_expression(e)
    if not isinstance(k, (int, np.integer)) or k < 0:
        raise ExprError(f"power exponent must be a nonnegative integer, got {k!r}")
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return e
    if isinstance(e, Const):
        return const(e.value**k)
    return Pow(e, k)


def exp_(e) -> Expression:
    e = as_expression(e)
    if isinstance(e, Const):
        return const(math.exp(e.value))
    return Exp(e)


def dot(coeffs: Sequence, exprs: Sequence) -> Expression:
    """Sum of pairwise products; either argument may hold plain numbers."""
    if len(coeffs) != len(exprs):
        raise ExprError("dot: length mismatch")
    return add(*(mul(c, e) for c, e in zip(coeffs, exprs)))


# differentiation ------------------------------------------------------

def _as_var(v) -> Var:
    if isinstance(v, Var):
        return v
    if isinstance(v, tuple) and len(v) == 2:
        return var(v[0], v[1])
    raise DeclarationError(f"not a variable reference: {v!r}")


def differentiate(e: Expression, v, space: "VariableSpace | None" = None) -> Expression:
    """Exact partial derivative of e with respect to v.

    Repeated application yields higher derivatives.  If a space is given,
    v must be declared in it.
    """
    v = _as_var(v)
    if space is not None and not space.declares(v):
        raise DeclarationError(f"variable {v.name}[{v.index}] not declared in space")
    return _diff(as_expression(e), v)


def _diff(e: Expression, v: Var) -> Expression:
    if v not in e.support:
        return ZERO
    cache = e._dcache
    if cache is None:
        cache = e._dcache = {}
    hit = cache.get(v)
    if hit is not None:
        return hit
    if isinstance(e, Var):
        out = ONE
    elif isinstance(e, Sum):
        out = add(*(_diff(t, v) for t in e.terms))
    elif isinstance(e, Prod):
        parts = []
        fs = e.factors
        for i, f in enumerate(fs):
            if v in f.support:
                parts.append(mul(*fs[:i], *fs[i + 1:], _diff(f, v)))
        out = add(*parts)
    elif isinstance(e, Pow):
        out = mul(const(e.exponent), pow_(e.base, e.exponent - 1), _diff(e.base, v))
    elif isinstance(e, Exp):
        out = mul(e, _diff(e.arg, v))
    elif isinstance(e, Neg):
        out = neg(_diff(e.arg, v))
    else:  # Const is unreachable: empty support
        out = ZERO
    cache[v] = out
    return out


def gradient(e: Expression, block: str, space: "VariableSpace") -> list:
    """Vector of partial derivatives of e over one variable block."""
    if block not in space.dims:
        raise DeclarationError(f"block {block!r} not declared")
    return [differentiate(e, var(block, j)) for j in range(space.dims[block])]


def polynomial_degree(e: Expression):
    """Total polynomial degree, or None if not a polynomial (contains exp)."""
    d = e._degree
    if d != -2:
        return d
    if isinstance(e, Const):
        d = 0
    elif isinstance(e, Var):
        d = 1
    elif isinstance(e, Sum):
        subs = [polynomial_degree(t) for t in e.terms]
        d = None if any(s is None for s in subs) else max(subs)
    elif isinstance(e, Prod):
        subs = [polynomial_degree(t) for t in e.factors]
        d = None if any(s is None for s in subs) else sum(subs)
    elif isinstance(e, Pow):
        s = polynomial_degree(e.base)
        d = None if s is None else s * e.exponent
    elif isinstance(e, Neg):
        d = polynomial_degree(e.arg)
    else:  # Exp
        d = None
    e._degree = d
    return d


# evaluation -----------------------------------------------------------

def evaluate(e: Expression, point: Mapping) -> float:
    """Evaluate at a point mapping (name, index) -> value.

    Every variable appearing in e must be assigned.
    """
    memo: dict = {}
    return _eval(as_expression(e), point, memo)


def _eval(e, point, memo):
    key = id(e)
    if key in memo:
        return memo[key]
    if isinstance(e, Const):
        val = e.value
    elif isinstance(e, Var):
        try:
            val = float(point[(e.name, e.index)])
        except KeyError:
            raise EvaluationError(f"no value assigned for {e.name}[{e.index}]") from None
    elif isinstance(e, Sum):
        val = math.fsum(_eval(t, point, memo) for t in e.terms)
    elif isinstance(e, Prod):
        val = 1.0
        for f in e.factors:
            val *= _eval(f, point, memo)
    elif isinstance(e, Pow):
        val = _eval(e.base, point, memo) ** e.exponent
    elif isinstance(e, Exp):
        val = math.exp(_eval(e.arg, point, memo))
    else:  # Neg
        val = -_eval(e.arg, point, memo)
    memo[key] = val
    return val


def iter_nodes(roots: Iterable[Expression]) -> Iterator[Expression]:
    """Unique nodes of the DAG under roots, children before parents."""
    seen = set()
    stack = [(r, False) for r in roots]
    order = []
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            order.append(node)
            continue
        if key in seen:
            continue
        seen.add(key)
        stack.append((node, True))
        if isinstance(node, Sum):
            stack.extend((t, False) for t in node.terms)
        elif isinstance(node, Prod):
            stack.extend((f, False) for f in node.factors)
        elif isinstance(node, Pow):
            stack.append((node.base, False))
        elif isinstance(node, (Exp, Neg)):
            stack.append((node.arg, False))
    return iter(order)


class VariableSpace:
    """Ordered, named blocks of scalar variables with a flat layout.

    Names are unique and dimensions are >= 1; the flat layout is the
    concatenation of the blocks in declaration order.
    """

    __slots__ = ("blocks", "dims", "offsets", "size")

    def __init__(self, blocks: Sequence):
        self.blocks = tuple((str(n), int(d)) for n, d in blocks)
        self.dims = {}
        self.offsets = {}
        off = 0
        for name, dim in self.blocks:
            if name in self.dims:
                raise DeclarationError(f"duplicate block name {name!r}")
            if dim < 1:
                raise DeclarationError(f"block {name!r} has dimension {dim} < 1")
            self.dims[name] = dim
            self.offsets[name] = off
            off += dim
        self.size = off

    def declares(self, v) -> bool:
        v = _as_var(v)
        return v.name in self.dims and 0 <= v.index < self.dims[v.name]

    def flat_index(self, v) -> int:
        v = _as_var(v)
        if not self.declares(v):
            raise DeclarationError(f"variable {v.name}[{v.index}] not declared")
        return self.offsets[v.name] + v.index

    def block_slice(self, name: str) -> slice:
        off = self.offsets[name]
        return slice(off, off + self.dims[name])

    def variables(self, name: str) -> list:
        return [var(name, j) for j in range(self.dims[name])]

    def point_from_vector(self, x: np.ndarray) -> dict:
        point = {}
        for name, dim in self.blocks:
            off = self.offsets[name]
            for j in range(dim):
                point[(name, j)] = float(x[off + j])
        return point


_OP_CONST, _OP_VAR, _OP_SUM, _OP_PROD, _OP_POW, _OP_EXP, _OP_NEG = range(7)


class Tape:
    """Flat evaluation program for a set of expressions over one space.

    Compiling once and evaluating per point amortizes the DAG traversal;
    shared subtrees are evaluated once per point.
    """

    def __init__(self, roots: Sequence[Expression], space: VariableSpace):
        self.space = space
        nodes = list(iter_nodes(roots))
        index = {id(n): i for i, n in enumerate(nodes)}
        prog = []
        for n in nodes:
            if isinstance(n, Const):
                prog.append((_OP_CONST, n.value))
            elif isinstance(n, Var):
                prog.append((_OP_VAR, space.flat_index(n)))
            elif isinstance(n, Sum):
                prog.append((_OP_SUM, [index[id(t)] for t in n.terms]))
            elif isinstance(n, Prod):
                prog.append((_OP_PROD, [index[id(f)] for f in n.factors]))
            elif isinstance(n, Pow):
                prog.append((_OP_POW, (index[id(n.base)], n.exponent)))
            elif isinstance(n, Exp):
                prog.append((_OP_EXP, index[id(n.arg)]))
            else:
                prog.append((_OP_NEG, index[id(n.arg)]))
        self._prog = prog
        self._roots = [index[id(r)] for r in roots]

    def __len__(self):
        return len(self._prog)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        vals = [0.0] * len(self._prog)
        exp = math.exp
        for i, (op, arg) in enumerate(self._prog):
            if op == _OP_CONST:
                vals[i] = arg
            elif op == _OP_VAR:
                vals[i] = x[arg]
            elif op == _OP_SUM:
                acc = 0.0
                for j in arg:
                    acc += vals[j]
                vals[i] = acc
            elif op == _OP_PROD:
                acc = 1.0
                for j in arg:
                    acc *= vals[j]
                vals[i] = acc
            elif op == _OP_POW:
                vals[i] = vals[arg[0]] ** arg[1]
            elif op == _OP_EXP:
                vals[i] = exp(vals[arg])
            else:
                vals[i] = -vals[arg]
        return np.array([vals[i] for i in self._roots], dtype=float)


# textual serialization ------------------------------------------------

def to_sexpr(e: Expression) -> str:
    """Prefix s-expression form, e.g. (pow (sub (var z 0) (const 1)) 2)."""
    e = as_expression(e)
    if isinstance(e, Const):
        return f"(const {_fmt(e.value)})"
    if isinstance(e, Var):
        return f"(var {e.name} {e.index})"
    if isinstance(e, Sum):
        return "(add " + " ".join(to_sexpr(t) for t in e.terms) + ")"
    if isinstance(e, Prod):
        return "(mul " + " ".join(to_sexpr(f) for f in e.factors) + ")"
    if isinstance(e, Pow):
        return f"(pow {to_sexpr(e.base)} {e.exponent})"
    if isinstance(e, Exp):
        return f"(exp {to_sexpr(e.arg)})"
    return f"(neg {to_sexpr(e.arg)})"


def _fmt(v: float) -> str:
    return repr(int(v)) if v == int(v) and abs(v) < 1e15 else repr(v)


def parse_sexpr(text: str) -> Expression:
    """Parse the prefix s-expression form.

    Accepted heads: const, var, add (alias sum), sub, mul (alias product),
    neg, pow, exp.  sub takes two or more children and means a - b - ...
    """
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def parse():
        nonlocal pos
        if pos >= len(tokens):
            raise ExprError("unexpected end of s-expression")
        tok = tokens[pos]
        pos += 1
        if tok != "(":
            # bare number is tolerated as shorthand for (const x)
            try:
                return const(float(tok))
            except ValueError:
                raise ExprError(f"unexpected token {tok!r}") from None
        head = tokens[pos]
        pos += 1
        args = []
        while tokens[pos] != ")":
            if head == "var" and tokens[pos] != "(":
                args.append(tokens[pos])
                pos += 1
            elif head == "pow" and tokens[pos] != "(" and args:
                args.append(tokens[pos])
                pos += 1
            else:
                args.append(parse())
        pos += 1  # consume ")"
        if head == "const":
            (v,) = args
            return v if isinstance(v, Expression) else const(float(v))
        if head == "var":
            name, idx = args
            return var(str(name), int(idx))
        if head in ("add", "sum"):
            return add(*args)
        if head == "sub":
            if len(args) < 2:
                raise ExprError("sub needs at least two children")
            out = args[0]
            for a in args[1:]:
                out = sub(out, a)
            return out
        if head in ("mul", "product"):
            return mul(*args)
        if head == "neg":
            (a,) = args
            return neg(a)
        if head == "pow":
            base, k = args
            return pow_(base, int(k))
        if head == "exp":
            (a,) = args
            return exp_(a)
        raise ExprError(f"unknown s-expression head {head!r}")

    out = parse()
    if pos != len(tokens):
        raise ExprError("trailing tokens after s-expression")
    return out
