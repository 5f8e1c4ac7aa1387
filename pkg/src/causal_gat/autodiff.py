"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations are executed eagerly on a :class:`Tape`, which records every
primitive as a :class:`Node`.  A frozen :class:`Record` can be replayed on
new inputs with :func:`forward_eval` and differentiated with
:func:`backward`.

Broadcasting is deliberately restricted: apart from a 1-D bias added along
the last axis, and a 2-D right operand in ``matmul``, operand shapes must
match exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple[int, ...]
    attrs: dict
    out: int


@dataclass(frozen=True)
class Record:
    """An immutable, topologically ordered list of primitive operations."""

    inputs: tuple[int, ...]
    input_shapes: tuple[tuple[int, ...], ...]
    constants: dict[int, np.ndarray]
    nodes: tuple[Node, ...]
    outputs: tuple[int, ...]
    size: int


@dataclass
class Evaluation:
    record: Record
    values: list
    outputs: list = field(default_factory=list)


# ----------------------------------------------------------------------
# primitive kernels: forward(*values, **attrs) and vjp(g, out, *values, **attrs)
# ----------------------------------------------------------------------


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def _add_fwd(a, b):
    if a.shape == b.shape:
        return a + b
    _check(b.ndim == 1 and a.shape[-1:] == b.shape, "add",
           f"expected equal shapes or bias of shape {a.shape[-1:]}, got {a.shape} and {b.shape}")
    return a + b


def _add_vjp(g, out, a, b):
    gb = g if a.shape == b.shape else g.reshape(-1, b.shape[0]).sum(axis=0)
    return g, gb


def _sub_fwd(a, b):
    _check(a.shape == b.shape, "sub", f"expected equal shapes, got {a.shape} and {b.shape}")
    return a - b


def _mul_fwd(a, b):
    _check(a.shape == b.shape, "mul", f"expected equal shapes, got {a.shape} and {b.shape}")
    return a * b


def _matmul_fwd(a, b):
    _check(a.ndim >= 2 and b.ndim >= 2, "matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    _check(a.shape[-1] == b.shape[-2], "matmul",
           f"inner dimensions differ: {a.shape} @ {b.shape}")
    _check(b.ndim == 2 or a.shape[:-2] == b.shape[:-2], "matmul",
           f"batch dimensions differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    return a @ b


def _matmul_vjp(g, out, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def _softmax_fwd(x, mask=None):
    if mask is not None:
        _check(mask.shape == x.shape[-mask.ndim:], "softmax",
               f"mask shape {mask.shape} does not match trailing dims of {x.shape}")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(g, y, x, mask=None):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _layer_norm_fwd(x, gamma, beta, eps=LN_EPS):
    d = x.shape[-1]
    _check(gamma.shape == (d,) and beta.shape == (d,), "layer_norm",
           f"scale/offset must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def _layer_norm_vjp(g, out, x, gamma, beta, eps=LN_EPS):
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gxhat = g * gamma
    gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                 - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    g2 = g.reshape(-1, d)
    return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)


def _embedding_fwd(table, ids=None):
    _check(table.ndim == 2, "embedding", f"table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids must lie in [0, {table.shape[0]})")
    return table[ids]


def _embedding_vjp(g, out, table, ids=None):
    gt = np.zeros_like(table)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def _gelu_fwd(x):
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(GELU_C * x * (1.0 + GELU_A * x2)))


def _gelu_vjp(g, out, x):
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + GELU_A * x2))
    du = GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


def _relu_fwd(x):
    return np.maximum(x, 0.0)


def _leaky_relu_fwd(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def _sigmoid_fwd(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_fwd(x):
    return np.log(x)


def _clamp_min_fwd(x, floor=0.0):
    return np.maximum(x, floor)


def _cross_entropy_fwd(logits, targets=None, weights=None):
    _check(targets.shape == logits.shape[:-1], "cross_entropy",
           f"targets shape {targets.shape} must equal logits leading shape {logits.shape[:-1]}")
    w = np.ones(targets.shape) if weights is None else weights
    _check(w.shape == targets.shape, "cross_entropy", f"weights shape {w.shape} != {targets.shape}")
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return np.asarray(((lse - picked) * w).sum() / w.sum(), dtype=logits.dtype)


def _cross_entropy_vjp(g, out, logits, targets=None, weights=None):
    w = np.ones(targets.shape) if weights is None else weights
    p = _softmax_fwd(logits)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    return (g * (p - onehot) * (w / w.sum())[..., None],)


def _sum_fwd(x, axis=None):
    return np.asarray(x.sum(axis=axis), dtype=x.dtype)


def _sum_vjp(g, out, x, axis=None):
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _take_fwd(x, key=None):
    return np.asarray(x[key])


def _take_vjp(g, out, x, key=None):
    gx = np.zeros_like(x)
    np.add.at(gx, key, g)
    return (gx,)


def _outer_add_fwd(col, row):
    _check(col.ndim == 1 and row.ndim == 1, "outer_add", f"expected 1-D operands, got {col.shape} and {row.shape}")
    return col[:, None] + row[None, :]


def _row_bias_fwd(scores, bias, row=-1):
    _check(scores.ndim == 4 and bias.shape == (scores.shape[0], scores.shape[3]), "row_bias",
           f"expected scores (B,H,T,T) and bias (B,T), got {scores.shape} and {bias.shape}")
    out = scores.copy()
    out[:, :, row, :] += bias[:, None, :]
    return out


def _row_bias_vjp(g, out, scores, bias, row=-1):
    return g, g[:, :, row, :].sum(axis=1)


_PRIMS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_vjp),
    "sub": (_sub_fwd, lambda g, out, a, b: (g, -g)),
    "mul": (_mul_fwd, lambda g, out, a, b: (g * b, g * a)),
    "scale": (lambda x, c=1.0: x * c, lambda g, out, x, c=1.0: (g * c,)),
    "matmul": (_matmul_fwd, _matmul_vjp),
    "transpose": (lambda x, axes=None: np.transpose(x, axes),
                  lambda g, out, x, axes=None: (np.transpose(g, np.argsort(axes)),)),
    "reshape": (lambda x, shape=None: x.reshape(shape),
                lambda g, out, x, shape=None: (g.reshape(x.shape),)),
    "softmax": (_softmax_fwd, _softmax_vjp),
    "layer_norm": (_layer_norm_fwd, _layer_norm_vjp),
    "embedding": (_embedding_fwd, _embedding_vjp),
    "gelu": (_gelu_fwd, _gelu_vjp),
    "relu": (_relu_fwd, lambda g, out, x: (g * (x > 0),)),
    "leaky_relu": (_leaky_relu_fwd, lambda g, out, x, slope=0.2: (g * np.where(x > 0, 1.0, slope),)),
    "sigmoid": (_sigmoid_fwd, lambda g, out, x: (g * out * (1.0 - out),)),
    "log": (_log_fwd, lambda g, out, x: (g / x,)),
    "clamp_min": (_clamp_min_fwd, lambda g, out, x, floor=0.0: (g * (x > floor),)),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_vjp),
    "sum": (_sum_fwd, _sum_vjp),
    "take": (_take_fwd, _take_vjp),
    "outer_add": (_outer_add_fwd, lambda g, out, c, r: (g.sum(axis=1), g.sum(axis=0))),
    "row_bias": (_row_bias_fwd, _row_bias_vjp),
}

PRIMITIVES = tuple(_PRIMS)


# ----------------------------------------------------------------------
# tracing
# ----------------------------------------------------------------------


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


class Tape:
    """Eager recorder.  Values are computed as operations are applied."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.nodes: list[Node] = []
        self.inputs: list[int] = []
        self.constants: dict[int, np.ndarray] = {}

    def _push(self, value) -> Var:
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def input(self, value) -> Var:
        """Register a differentiable leaf."""
        v = self._push(np.asarray(value, dtype=np.result_type(value, np.float32)))
        self.inputs.append(v.id)
        return v

    def constant(self, value) -> Var:
        v = self._push(np.asarray(value))
        self.constants[v.id] = v.value
        return v

    def apply(self, op: str, *args: Var, **attrs) -> Var:
        fwd, _ = _PRIMS[op]
        for a in args:
            if a.tape is not self:
                raise ValueError(f"{op}: operand recorded on a different tape")
        out = fwd(*(a.value for a in args), **attrs)
        v = self._push(out)
        self.nodes.append(Node(op, tuple(a.id for a in args), attrs, v.id))
        return v

    def record(self, outputs: Sequence[Var]) -> Record:
        return Record(
            inputs=tuple(self.inputs),
            input_shapes=tuple(self.values[i].shape for i in self.inputs),
            constants=dict(self.constants),
            nodes=tuple(self.nodes),
            outputs=tuple(o.id for o in outputs),
            size=len(self.values),
        )

    def gradient(self, output: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
        """Reverse-accumulate d(output)/d(wrt) using the eagerly computed values."""
        rec = self.record([output])
        ev = Evaluation(rec, self.values, [output.value])
        return backward(ev, np.ones_like(output.value) if seed is None else seed,
                        wrt=[w.id for w in wrt])


def _as_var(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(np.asarray(x))


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _binary(op):
    def f(a, b):
        t = _tape_of(a, b)
        return t.apply(op, _as_var(t, a), _as_var(t, b))
    f.__name__ = op
    return f


add = _binary("add")
sub = _binary("sub")
mul = _binary("mul")
matmul = _binary("matmul")
outer_add = _binary("outer_add")


def constant_like(x: Var, value) -> Var:
    return x.tape.constant(np.full(x.shape, value, dtype=x.value.dtype))


def scale(x: Var, c: float) -> Var:
    return x.tape.apply("scale", x, c=float(c))


def transpose(x: Var, axes) -> Var:
    return x.tape.apply("transpose", x, axes=tuple(axes))


def reshape(x: Var, shape) -> Var:
    return x.tape.apply("reshape", x, shape=tuple(shape))


def softmax(x: Var, mask=None) -> Var:
    return x.tape.apply("softmax", x, mask=None if mask is None else np.asarray(mask, dtype=bool))


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = LN_EPS) -> Var:
    return x.tape.apply("layer_norm", x, gamma, beta, eps=eps)


def embedding(table: Var, ids) -> Var:
    return table.tape.apply("embedding", table, ids=np.asarray(ids, dtype=np.int64))


def gelu(x: Var) -> Var:
    return x.tape.apply("gelu", x)


def relu(x: Var) -> Var:
    return x.tape.apply("relu", x)


def leaky_relu(x: Var, slope: float = 0.2) -> Var:
    return x.tape.apply("leaky_relu", x, slope=float(slope))


def sigmoid(x: Var) -> Var:
    return x.tape.apply("sigmoid", x)


def log(x: Var) -> Var:
    return x.tape.apply("log", x)


def clamp_min(x: Var, floor: float) -> Var:
    return x.tape.apply("clamp_min", x, floor=float(floor))


def cross_entropy(logits: Var, targets, weights=None) -> Var:
    t = np.asarray(targets, dtype=np.int64)
    w = None if weights is None else np.asarray(weights, dtype=logits.value.dtype)
    return logits.tape.apply("cross_entropy", logits, targets=t, weights=w)


def sum(x: Var, axis=None) -> Var:  # noqa: A001
    return x.tape.apply("sum", x, axis=axis)


def take(x: Var, key) -> Var:
    return x.tape.apply("take", x, key=key)


def row_bias(scores: Var, bias: Var, row: int = -1) -> Var:
    t = scores.tape
    return t.apply("row_bias", scores, _as_var(t, bias), row=int(row))


# ----------------------------------------------------------------------
# replay and reverse accumulation
# ----------------------------------------------------------------------


def forward_eval(record: Record, inputs: Sequence[np.ndarray]) -> Evaluation:
    """Re-execute ``record`` on fresh input values."""
    if len(inputs) != len(record.inputs):
        raise ShapeError(f"forward_eval: expected {len(record.inputs)} inputs, got {len(inputs)}")
    values: list = [None] * record.size
    for k, (h, shape, x) in enumerate(zip(record.inputs, record.input_shapes, inputs)):
        x = np.asarray(x)
        if x.shape != shape:
            raise ShapeError(f"forward_eval: input {k} expected shape {shape}, got {x.shape}")
        values[h] = x
    for h, c in record.constants.items():
        values[h] = c
    for node in record.nodes:
        fwd, _ = _PRIMS[node.op]
        try:
            values[node.out] = fwd(*(values[a] for a in node.args), **node.attrs)
        except ShapeError as exc:
            raise ShapeError(f"{exc} (node {node.out})") from None
    return Evaluation(record, values, [values[o] for o in record.outputs])


def backward(evaluation: Evaluation, seed_gradient, wrt: Sequence[int] | None = None) -> list[np.ndarray]:
    """Gradients of the first output (contracted with ``seed_gradient``).

    Returns one array per handle in ``wrt`` (default: the record's inputs).
    """
    rec, values = evaluation.record, evaluation.values
    target = rec.outputs[0]
    seed = np.asarray(seed_gradient, dtype=values[target].dtype)
    if seed.shape != values[target].shape:
        raise ShapeError(f"backward: seed shape {seed.shape} does not match output shape {values[target].shape}")
    wrt = list(rec.inputs if wrt is None else wrt)

    needs = np.zeros(rec.size, dtype=bool)
    needs[wrt] = True
    for node in rec.nodes:
        if any(needs[a] for a in node.args):
            needs[node.out] = True

    grads: dict[int, np.ndarray] = {target: seed}
    for node in reversed(rec.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        _, vjp = _PRIMS[node.op]
        arg_grads = vjp(g, values[node.out], *(values[a] for a in node.args), **node.attrs)
        for a, ga in zip(node.args, arg_grads):
            if not needs[a] or a in rec.constants:
                continue
            grads[a] = grads[a] + ga if a in grads else ga
    return [grads.get(h, np.zeros_like(values[h])) for h in wrt]


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------


@dataclass
class CheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    nonfinite: np.ndarray
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        finite = self.rel_error[~self.nonfinite]
        return float(finite.max()) if finite.size else 0.0

    @property
    def passed(self) -> bool:
        return not self.nonfinite.any() and self.max_rel_error <= self.tolerance


def relative_error(a, b, floor: float = 1e-4) -> np.ndarray:
    """|a-b| / max(|a|, |b|, floor), elementwise.

    The floor keeps near-zero gradients from turning central-difference
    round-off (about 1e-10 absolute in float64) into large relative errors.
    """
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(fn: Callable[[Tape, Var], Var], x, epsilon: float = 1e-5,
                      tolerance: float = 1e-6, indices=None, floor: float = 1e-4) -> CheckReport:
    """Compare reverse-mode gradients of a scalar ``fn`` with central differences.

    ``fn(tape, x)`` must build a scalar on ``tape``.  ``indices`` restricts the
    numeric check to a subset of flat coordinates.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.input(x)
    out = fn(tape, xv)
    if out.value.size != 1:
        raise ShapeError(f"finite_diff_check: function must return a scalar, got shape {out.shape}")
    (grad,) = tape.gradient(out, [xv])
    rec = tape.record([out])

    def f(z):
        with np.errstate(all="ignore"):
            return float(forward_eval(rec, [z]).outputs[0])

    flat = range(x.size) if indices is None else indices
    idx = np.array(list(flat), dtype=np.int64)
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += epsilon
        xm.flat[i] -= epsilon
        numeric[k] = (f(xp) - f(xm)) / (2.0 * epsilon)
    analytic = grad.reshape(-1)[idx]
    nonfinite = ~np.isfinite(numeric) | ~np.isfinite(analytic)
    with np.errstate(all="ignore"):
        rel = relative_error(analytic, numeric, floor)
    return CheckReport(analytic, numeric, rel, nonfinite, tolerance)
