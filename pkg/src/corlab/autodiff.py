"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is tape-based: every primitive appends a node to the active
Tape, and each node's vector-Jacobian product is itself expressed with
engine primitives.  Backward passes therefore extend the same tape with
differentiable nodes, which is what makes exact Hessian-vector products
via double-backward possible.

All arithmetic is 64-bit.  Every primitive eagerly checks its output for
NaN/Inf and aborts with the offending node id; a non-finite value is an
error, never a silent state.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class TapeConsumedError(RuntimeError):
    """backward() called twice on a consume-once tape."""


_TAPE_STACK: list["Tape"] = []


def _active_tape() -> "Tape":
    if not _TAPE_STACK:
        raise RuntimeError("no active Tape; wrap graph construction in `with Tape():`")
    return _TAPE_STACK[-1]


class Tape:
    """Ordered record of primitive nodes; creation order is topological."""

    def __init__(self, consume_once: bool = False):
        self.nodes: list[Tensor] = []
        self.consume_once = consume_once
        self._consumed = False
        self.root_param: Tensor | None = None
        self.output: Tensor | None = None

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        assert _TAPE_STACK.pop() is self

    def register(self, t: "Tensor") -> None:
        t.node_id = len(self.nodes)
        self.nodes.append(t)


class Tensor:
    """Dense float64 array node on a tape."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "node_id")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.node_id = -1
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite output of op '{op}'")
        _active_tape().register(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, node={self.node_id})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def leaf(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, op="input")


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)

def val(x):
    """Raw ndarray view of a Tensor (or pass an ndarray through)."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _graph_mode(*args) -> bool:
    return any(isinstance(a, Tensor) for a in args)


def _node(data, parents, vjp, op) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, parents=parents, vjp=vjp if rg else None, op=op)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else leaf(x)


def _unbroadcast(ct: "Tensor", shape: tuple) -> "Tensor":
    """Sum a cotangent down to `shape` after numpy-style broadcasting."""
    while ct.ndim > len(shape):
        ct = sum_(ct, axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and ct.shape[i] != 1)
    if axes:
        ct = sum_(ct, axis=axes, keepdims=True)
    return ct


# ---------------------------------------------------------------------------
# primitives (generic: build graph nodes for Tensors, plain numpy otherwise)
# ---------------------------------------------------------------------------

def add(a, b):
    if not _graph_mode(a, b):
        return np.add(val(a), val(b))
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda ct: (_unbroadcast(ct, a.shape), _unbroadcast(ct, b.shape)),
        "add",
    )


def sub(a, b):
    if not _graph_mode(a, b):
        return np.subtract(val(a), val(b))
    return add(a, neg(_as_tensor(b)))


def neg(a):
    if not _graph_mode(a):
        return -val(a)
    return _node(-a.data, (a,), lambda ct: (neg(ct),), "neg")


def mul(a, b):
    if not _graph_mode(a, b):
        return np.multiply(val(a), val(b))
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda ct: (_unbroadcast(mul(ct, b), a.shape), _unbroadcast(mul(ct, a), b.shape)),
        "mul",
    )


def power(a, p: float):
    """Elementwise a**p with constant exponent."""
    if not _graph_mode(a):
        return np.power(val(a), p)
    out = np.power(a.data, p)
    return _node(out, (a,), lambda ct: (mul(ct, mul(p, power(a, p - 1.0))),), f"power[{p}]")


def div(a, b):
    if not _graph_mode(a, b):
        return np.divide(val(a), val(b))
    return mul(a, power(_as_tensor(b), -1.0))


def exp(a):
    if not _graph_mode(a):
        return np.exp(val(a))
    out_node = _node(np.exp(a.data), (a,), None, "exp")
    if out_node.requires_grad:
        out_node.vjp = lambda ct: (mul(ct, out_node),)
    return out_node


def log(a):
    if not _graph_mode(a):
        return np.log(val(a))
    return _node(np.log(a.data), (a,), lambda ct: (div(ct, a),), "log")


def tanh(a):
    if not _graph_mode(a):
        return np.tanh(val(a))
    out_node = _node(np.tanh(a.data), (a,), None, "tanh")
    if out_node.requires_grad:
        out_node.vjp = lambda ct: (mul(ct, sub(1.0, mul(out_node, out_node))),)
    return out_node


def matmul(a, b):
    if not _graph_mode(a, b):
        return np.matmul(val(a), val(b))
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(ct):
        da = _unbroadcast(matmul(ct, swapaxes(b, -1, -2)), a.shape)
        db = _unbroadcast(matmul(swapaxes(a, -1, -2), ct), b.shape)
        return da, db

    return _node(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def swapaxes(a, ax1: int, ax2: int):
    if not _graph_mode(a):
        return np.swapaxes(val(a), ax1, ax2)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda ct: (swapaxes(ct, ax1, ax2),), "swapaxes")


def reshape(a, shape):
    if not _graph_mode(a):
        return np.reshape(val(a), shape)
    old = a.shape
    return _node(np.reshape(a.data, shape), (a,), lambda ct: (reshape(ct, old),), "reshape")


def sum_(a, axis=None, keepdims: bool = False):
    if not _graph_mode(a):
        return np.sum(val(a), axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(ct):
        if axis is None:
            return (broadcast_to(reshape(ct, (1,) * len(in_shape)), in_shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(in_shape) for ax in axes)
        if not keepdims:
            kept = tuple(1 if i in axes else n for i, n in enumerate(in_shape))
            ct = reshape(ct, kept)
        return (broadcast_to(ct, in_shape),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def broadcast_to(a, shape):
    if not _graph_mode(a):
        return np.broadcast_to(val(a), shape)
    in_shape = a.shape
    return _node(
        np.ascontiguousarray(np.broadcast_to(a.data, shape)),
        (a,),
        lambda ct: (_unbroadcast(ct, in_shape),),
        "broadcast_to",
    )


def mean(a, axis=None, keepdims: bool = False):
    if not _graph_mode(a):
        return np.mean(val(a), axis=axis, keepdims=keepdims)
    n = val(a).size if axis is None else np.prod(
        [val(a).shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def gather(a, indices, axis: int = 0):
    """Take rows along `axis` (integer fancy indexing)."""
    idx = np.asarray(indices, dtype=np.intp)
    if not _graph_mode(a):
        return np.take(val(a), idx, axis=axis)
    in_shape = a.shape
    return _node(
        np.take(a.data, idx, axis=axis),
        (a,),
        lambda ct: (scatter(ct, idx, in_shape, axis=axis),),
        "gather",
    )


def scatter(a, indices, shape, axis: int = 0):
    """Adjoint of gather: add slices of `a` into a zero array of `shape`."""
    idx = np.asarray(indices, dtype=np.intp)

    def _scatter_np(x):
        out = np.zeros(shape, dtype=np.float64)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(x, axis, 0))
        return out

    if not _graph_mode(a):
        return _scatter_np(val(a))
    return _node(_scatter_np(a.data), (a,), lambda ct: (gather(ct, idx, axis=axis),), "scatter")


def slice_along(a, axis: int, start: int, stop: int):
    """Contiguous slice along one axis."""
    if not _graph_mode(a):
        sl = [slice(None)] * val(a).ndim
        sl[axis] = slice(start, stop)
        return val(a)[tuple(sl)]
    in_shape = a.shape
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    return _node(
        a.data[tuple(sl)],
        (a,),
        lambda ct: (pad_slice(ct, axis, start, in_shape),),
        "slice",
    )


def pad_slice(a, axis: int, start: int, shape):
    """Adjoint of slice_along: embed into zeros of `shape` at offset."""

    def _pad_np(x):
        out = np.zeros(shape, dtype=np.float64)
        sl = [slice(None)] * len(shape)
        sl[axis] = slice(start, start + x.shape[axis])
        out[tuple(sl)] = x
        return out

    if not _graph_mode(a):
        return _pad_np(val(a))
    width = a.shape[axis]
    return _node(
        _pad_np(a.data),
        (a,),
        lambda ct: (slice_along(ct, axis, start, start + width),),
        "pad_slice",
    )


def concat(parts, axis: int = 0):
    parts = list(parts)
    if not _graph_mode(*parts):
        return np.concatenate([val(p) for p in parts], axis=axis)
    parts = [_as_tensor(p) for p in parts]
    widths = [p.shape[axis] for p in parts]
    out_shape = list(parts[0].shape)
    out_shape[axis] = sum(widths)
    offsets = np.cumsum([0] + widths)

    def vjp(ct):
        return tuple(
            slice_along(ct, axis, int(offsets[i]), int(offsets[i + 1]))
            for i in range(len(parts))
        )

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp, "concat")


# ---------------------------------------------------------------------------
# compositions (shared by graph and numpy modes)
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1):
    shift = val(x).max(axis=axis, keepdims=True)  # detached; softmax is shift-invariant
    e = exp(sub(x, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def logsumexp(x, axis: int = -1, keepdims: bool = True):
    shift = val(x).max(axis=axis, keepdims=True)
    return add(log(sum_(exp(sub(x, shift)), axis=axis, keepdims=keepdims)),
               shift if keepdims else np.squeeze(shift, axis=axis))


def softplus(x):
    shift = np.maximum(val(x), 0.0)  # detached; log(e^x+1) = c + log(e^(x-c)+e^(-c))
    return add(log(add(exp(sub(x, shift)), np.exp(-shift))), shift)


def sigmoid(x):
    return exp(sub(x, softplus(x)))


def gelu(x):
    # tanh approximation
    inner = mul(np.sqrt(2.0 / np.pi), add(x, mul(0.044715, power(x, 3.0))))
    return mul(mul(0.5, x), add(1.0, tanh(inner)))


def layer_norm(x, eps: float = 1e-5):
    m = mean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    return div(centered, power(add(var, eps), 0.5))


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy; `targets` in {0,1}, detached."""
    t = val(targets)
    return mean(sub(softplus(logits), mul(t, logits)))


# ---------------------------------------------------------------------------
# parameter vector
# ---------------------------------------------------------------------------

class ParamVector:
    """Named trainable blocks flattened to one float64 vector of dim P.

    Frozen parameters never enter a ParamVector.  flatten/unflatten
    round-trips bit-exactly.
    """

    def __init__(self, blocks: dict[str, np.ndarray]):
        self.names = list(blocks)
        self.shapes = {k: np.asarray(v, dtype=np.float64).shape for k, v in blocks.items()}
        self.flat = np.concatenate(
            [np.asarray(blocks[k], dtype=np.float64).ravel() for k in self.names]
        ) if self.names else np.zeros(0)
        self.grad: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.flat.size

    def unflatten(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        flat = self.flat if flat is None else np.asarray(flat, dtype=np.float64)
        out, off = {}, 0
        for k in self.names:
            n = int(np.prod(self.shapes[k], dtype=np.intp)) if self.shapes[k] else 1
            out[k] = flat[off:off + n].reshape(self.shapes[k])
            off += n
        return out

    def views(self, w: Tensor) -> dict[str, Tensor]:
        """Graph views of a flat parameter Tensor, one per named block."""
        out, off = {}, 0
        for k in self.names:
            n = int(np.prod(self.shapes[k], dtype=np.intp)) if self.shapes[k] else 1
            out[k] = reshape(slice_along(w, 0, off, off + n), self.shapes[k])
            off += n
        return out

    def copy(self) -> "ParamVector":
        pv = ParamVector({})
        pv.names = list(self.names)
        pv.shapes = dict(self.shapes)
        pv.flat = self.flat.copy()
        pv.grad = None if self.grad is None else self.grad.copy()
        return pv


# ---------------------------------------------------------------------------
# forward / backward / hvp / grad_check
# ---------------------------------------------------------------------------

def forward(graph, params: ParamVector, x, consume_once: bool = False):
    """Run `graph(views, x)` under a fresh tape.

    `graph` is a callable taking a dict of named parameter Tensors and an
    input array; it returns the output Tensor (usually a scalar loss).
    """
    tape = Tape(consume_once=consume_once)
    with tape:
        w = leaf(params.flat, requires_grad=True)
        out = graph(params.views(w), x)
    tape.root_param = w
    tape.output = out
    return out, tape


def grad_nodes(output: Tensor, tape: Tape, inputs: list[Tensor], seed=None) -> list[Tensor | None]:
    """Cotangents of `inputs` w.r.t. `output`, as live graph nodes."""
    if seed is not None and np.shape(val(seed)) != output.data.shape:
        raise ValueError(f"seed shape {np.shape(val(seed))} != output shape {output.data.shape}")
    with tape:
        seed_t = leaf(np.ones_like(output.data) if seed is None else val(seed))
        cotangents: dict[int, Tensor] = {output.node_id: seed_t}
        for node in reversed(tape.nodes[: output.node_id + 1]):
            if node.vjp is None:
                continue
            ct = cotangents.get(node.node_id)
            if ct is None:
                continue
            for parent, pct in zip(node.parents, node.vjp(ct)):
                if pct is None or not parent.requires_grad:
                    continue
                acc = cotangents.get(parent.node_id)
                cotangents[parent.node_id] = pct if acc is None else add(acc, pct)
        return [cotangents.get(t.node_id) for t in inputs]


def backward(tape: Tape, seed=None) -> np.ndarray:
    """Gradient of the tape's output w.r.t. its flat parameter vector."""
    if tape.consume_once:
        if tape._consumed:
            raise TapeConsumedError("tape already consumed")
        tape._consumed = True
    (g,) = grad_nodes(tape.output, tape, [tape.root_param], seed=seed)
    if g is None:
        return np.zeros_like(tape.root_param.data)
    return g.data.copy()


def hvp(graph, params: ParamVector, x, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product via double backward."""
    v = np.asarray(v, dtype=np.float64)
    if np.linalg.norm(v) == 0.0:
        raise ValueError("hvp requires a nonzero probe vector")
    out, tape = forward(graph, params, x)
    (g,) = grad_nodes(out, tape, [tape.root_param])
    if g is None:
        return np.zeros_like(v)
    with tape:
        s = sum_(mul(g, v))
    (hv,) = grad_nodes(s, tape, [tape.root_param])
    return np.zeros_like(v) if hv is None else hv.data.copy()


def gradient(graph, params: ParamVector, x) -> np.ndarray:
    out, tape = forward(graph, params, x)
    return backward(tape)


def loss_and_gradient(graph, params: ParamVector, x) -> tuple[float, np.ndarray]:
    out, tape = forward(graph, params, x)
    return float(out.data), backward(tape)


def grad_check(graph, params: ParamVector, x, step: float = 1e-5) -> dict:
    """Compare backward() against central finite differences, per block.

    Relative error per coordinate, with an absolute-error fallback where
    the analytic gradient and the difference quotient are both tiny.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError("step must lie in (0, 1e-2]")
    analytic = gradient(graph, params, x)
    numeric = np.zeros_like(analytic)
    base = params.flat.copy()
    for i in range(params.dim):
        for sgn, tgt in ((+1.0, 0), (-1.0, 1)):
            pv = params.copy()
            pv.flat = base.copy()
            pv.flat[i] += sgn * step
            out, _ = forward(graph, pv, x)
            numeric[i] += sgn * float(out.data)
    numeric /= 2.0 * step
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    abs_err = np.abs(analytic - numeric)
    rel_err = np.where(scale > 1e-8, abs_err / np.maximum(scale, 1e-300), abs_err)
    report = {"max_rel_error": float(rel_err.max(initial=0.0)), "per_block": {}}
    off = 0
    for k in params.names:
        n = int(np.prod(params.shapes[k], dtype=np.intp)) if params.shapes[k] else 1
        report["per_block"][k] = float(rel_err[off:off + n].max(initial=0.0))
        off += n
    return report
