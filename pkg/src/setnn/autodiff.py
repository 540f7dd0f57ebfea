"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Every differentiable computation runs through :func:`apply_primitive`, which
evaluates a primitive eagerly and, when a :class:`Tape` is active, records a
node so :func:`backprop` can later sweep the graph in reverse. Without an
active tape the same calls are plain eager numpy evaluation.

The primitive set is intentionally small: dense layers, elementwise
nonlinearities, reductions, segment pooling over ragged batches, and the three
loss heads used by the training driver. All arrays are float64; any primitive
producing a NaN/Inf raises immediately rather than letting it propagate.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "apply_primitive",
    "backprop",
    "grad_check",
    "AutodiffError",
    "ShapeError",
    "UnknownPrimitiveError",
    "NonFiniteError",
    "NonDeterministicError",
    "PRIMITIVE_KINDS",
]


class AutodiffError(ValueError):
    """Base class for tape/primitive errors."""


class ShapeError(AutodiffError):
    pass


class UnknownPrimitiveError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    """A primitive produced NaN or Inf, which is an error state."""


class NonDeterministicError(AutodiffError):
    """grad_check evaluated the target twice and got different results."""


class Tensor:
    """Dense float64 array, optionally attached to the active tape.

    `node_id` is only meaningful together with `tape`; a tensor re-used under
    a new tape is re-registered as a fresh leaf there.
    """

    __slots__ = ("data", "node_id", "tape", "is_param", "name")

    def __init__(self, data, is_param: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.node_id: int | None = None
        self.tape: "Tape | None" = None
        self.is_param = is_param
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Small amount of operator sugar; everything routes through the tape.
    def __add__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("add", (self, other))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("add", (self, apply_primitive("scalar_scale", (other,), {"alpha": -1.0})))

    def __mul__(self, alpha: float) -> "Tensor":
        return apply_primitive("scalar_scale", (self,), {"alpha": float(alpha)})

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("matmul", (self, other))


class _Node:
    __slots__ = ("kind", "inputs", "attrs", "saved", "in_data", "out_data")

    def __init__(self, kind, inputs, attrs, saved, in_data, out_data):
        self.kind = kind
        self.inputs = inputs        # node ids of inputs, all < own id
        self.attrs = attrs
        self.saved = saved          # per-kind extras for the backward pass
        self.in_data = in_data      # input arrays (leaves keep their own data)
        self.out_data = out_data


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Append-only record of one computation, used as a context manager.

    Nodes are stored in the order they were created, so every node's inputs
    precede it and the reverse sweep in :func:`backprop` is a valid
    topological order. `gradients` is populated by backprop with one entry
    per leaf (inputs and parameters).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def _register_leaf(self, t: Tensor) -> int:
        node = _Node("leaf", (), {}, None, (), t.data)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        t.node_id = nid
        t.tape = self
        return nid

    def ensure_leaf(self, t: Tensor) -> int:
        if t.tape is self and t.node_id is not None:
            return t.node_id
        return self._register_leaf(t)

    def leaf_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf"]


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# Primitive registry: kind -> (forward, backward).
#
# forward(arrays, attrs) -> (out_array, saved)
# backward(grad_out, arrays, out, saved, attrs) -> tuple of per-input grads
# ---------------------------------------------------------------------------


def _fw_matmul(xs, attrs):
    a, b = xs
    if b.ndim != 2 or a.ndim not in (1, 2):
        raise ShapeError(f"matmul supports (N,K)@(K,P) or (K,)@(K,P), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    return a @ b, None


def _bw_matmul(g, xs, out, saved, attrs):
    a, b = xs
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    return g @ b.T, a.T @ g


def _fw_add(xs, attrs):
    a, b = xs
    if a.shape == b.shape:
        return a + b, None
    if a.ndim == 2 and b.shape == (a.shape[1],):
        # bias broadcast over the leading (row) axis only
        return a + b, None
    raise ShapeError(f"add requires equal shapes or (N,H)+(H,), got {a.shape} + {b.shape}")


def _bw_add(g, xs, out, saved, attrs):
    a, b = xs
    gb = g if a.shape == b.shape else g.sum(axis=0)
    return g, gb


def _fw_scalar_scale(xs, attrs):
    (x,) = xs
    return float(attrs["alpha"]) * x, None


def _bw_scalar_scale(g, xs, out, saved, attrs):
    return (float(attrs["alpha"]) * g,)


def _fw_relu(xs, attrs):
    (x,) = xs
    return np.maximum(x, 0.0), None


def _bw_relu(g, xs, out, saved, attrs):
    # derivative at exactly 0 is 0
    return (g * (xs[0] > 0.0),)


def _fw_tanh(xs, attrs):
    return np.tanh(xs[0]), None


def _bw_tanh(g, xs, out, saved, attrs):
    return (g * (1.0 - out * out),)


def _fw_sigmoid(xs, attrs):
    (x,) = xs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, None


def _bw_sigmoid(g, xs, out, saved, attrs):
    return (g * out * (1.0 - out),)


def _fw_elu(xs, attrs):
    (x,) = xs
    alpha = float(attrs.get("alpha", 1.0))
    return np.where(x >= 0.0, x, alpha * np.expm1(np.minimum(x, 0.0))), None


def _bw_elu(g, xs, out, saved, attrs):
    x = xs[0]
    alpha = float(attrs.get("alpha", 1.0))
    return (g * np.where(x >= 0.0, 1.0, out + alpha),)


def _axis(attrs, x):
    ax = int(attrs["axis"])
    if not -x.ndim <= ax < x.ndim:
        raise ShapeError(f"axis {ax} out of range for shape {x.shape}")
    return ax % x.ndim


def _fw_reduce_sum(xs, attrs):
    (x,) = xs
    return x.sum(axis=_axis(attrs, x)), None


def _bw_reduce_sum(g, xs, out, saved, attrs):
    x = xs[0]
    ax = _axis(attrs, x)
    return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)


def _fw_reduce_mean(xs, attrs):
    (x,) = xs
    return x.mean(axis=_axis(attrs, x)), None


def _bw_reduce_mean(g, xs, out, saved, attrs):
    x = xs[0]
    ax = _axis(attrs, x)
    return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy() / x.shape[ax],)


def _fw_reduce_max(xs, attrs):
    (x,) = xs
    ax = _axis(attrs, x)
    idx = x.argmax(axis=ax)  # ties resolve to the first (lowest) index
    return x.max(axis=ax), idx


def _bw_reduce_max(g, xs, out, saved, attrs):
    x = xs[0]
    ax = _axis(attrs, x)
    gx = np.zeros_like(x)
    np.put_along_axis(gx, np.expand_dims(saved, ax), np.expand_dims(g, ax), axis=ax)
    return (gx,)


def _fw_softmax(xs, attrs):
    (x,) = xs
    ax = _axis(attrs, x)
    z = x - x.max(axis=ax, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=ax, keepdims=True), None


def _bw_softmax(g, xs, out, saved, attrs):
    ax = _axis(attrs, xs[0])
    inner = (g * out).sum(axis=ax, keepdims=True)
    return (out * (g - inner),)


def _fw_concat(xs, attrs):
    ax = int(attrs["axis"])
    nd = xs[0].ndim
    for x in xs[1:]:
        if x.ndim != nd:
            raise ShapeError("concat inputs must have equal rank")
    return np.concatenate(xs, axis=ax), None


def _bw_concat(g, xs, out, saved, attrs):
    ax = int(attrs["axis"])
    sizes = [x.shape[ax] for x in xs]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))


def _fw_mse_loss(xs, attrs):
    p, t = xs
    if p.shape != t.shape:
        raise ShapeError(f"mse_loss shapes disagree: {p.shape} vs {t.shape}")
    d = p - t
    return np.asarray((d * d).mean()), None


def _bw_mse_loss(g, xs, out, saved, attrs):
    p, t = xs
    gp = (2.0 / p.size) * (p - t) * g
    return gp, -gp


def _fw_hinge_margin_loss(xs, attrs):
    s_pos, s_neg = xs
    if s_pos.shape != s_neg.shape:
        raise ShapeError(f"hinge_margin_loss shapes disagree: {s_pos.shape} vs {s_neg.shape}")
    m = s_neg - s_pos + float(attrs["delta"])
    return np.asarray(np.maximum(m, 0.0).mean()), m


def _bw_hinge_margin_loss(g, xs, out, saved, attrs):
    active = (saved > 0.0) * (g / saved.size)
    return -active, active


def _check_offsets(offsets, total):
    off = np.asarray(offsets, dtype=np.int64)
    if off.ndim != 1 or off.size < 2 or off[0] != 0 or off[-1] != total:
        raise ShapeError(f"offsets must span [0, {total}], got {off.tolist()}")
    if np.any(np.diff(off) <= 0):
        raise ShapeError("offsets must be strictly increasing (no empty segments)")
    return off


def _fw_set_softmax_nll(xs, attrs):
    (scores,) = xs
    flat = scores.reshape(-1) if scores.ndim == 2 and scores.shape[1] == 1 else scores
    if flat.ndim != 1:
        raise ShapeError(f"set_softmax_nll expects (total,) or (total,1) scores, got {scores.shape}")
    off = _check_offsets(attrs["offsets"], flat.shape[0])
    targets = np.asarray(attrs["targets"], dtype=np.int64)
    nsets = off.size - 1
    if targets.shape != (nsets,):
        raise ShapeError(f"need one target per set, got {targets.shape} for {nsets} sets")
    probs = np.empty_like(flat)
    nll = 0.0
    for s in range(nsets):
        lo, hi = off[s], off[s + 1]
        if not 0 <= targets[s] < hi - lo:
            raise ShapeError(f"target {targets[s]} out of range for set {s} of size {hi - lo}")
        seg = flat[lo:hi]
        z = seg - seg.max()
        e = np.exp(z)
        p = e / e.sum()
        probs[lo:hi] = p
        nll -= np.log(p[targets[s]])
    return np.asarray(nll / nsets), (probs, off, targets)


def _bw_set_softmax_nll(g, xs, out, saved, attrs):
    probs, off, targets = saved
    gx = probs.copy()
    gx[off[:-1] + targets] -= 1.0
    gx *= g / (off.size - 1)
    return (gx.reshape(xs[0].shape),)


def _seg_starts(xs, attrs):
    (x,) = xs
    if x.ndim != 2:
        raise ShapeError(f"segment ops expect a (total, H) matrix, got {x.shape}")
    off = _check_offsets(attrs["offsets"], x.shape[0])
    return x, off


def _fw_segment_sum(xs, attrs):
    x, off = _seg_starts(xs, attrs)
    return np.add.reduceat(x, off[:-1], axis=0), off


def _bw_segment_sum(g, xs, out, saved, attrs):
    counts = np.diff(saved)
    return (np.repeat(g, counts, axis=0),)


def _fw_segment_mean(xs, attrs):
    x, off = _seg_starts(xs, attrs)
    counts = np.diff(off)
    return np.add.reduceat(x, off[:-1], axis=0) / counts[:, None], off


def _bw_segment_mean(g, xs, out, saved, attrs):
    counts = np.diff(saved)
    return (np.repeat(g / counts[:, None], counts, axis=0),)


def _fw_segment_max(xs, attrs):
    x, off = _seg_starts(xs, attrs)
    nsets = off.size - 1
    out = np.empty((nsets, x.shape[1]))
    argrows = np.empty((nsets, x.shape[1]), dtype=np.int64)
    for s in range(nsets):
        lo, hi = off[s], off[s + 1]
        seg = x[lo:hi]
        idx = seg.argmax(axis=0)  # first index on ties
        argrows[s] = lo + idx
        out[s] = seg[idx, np.arange(x.shape[1])]
    return out, (off, argrows)


def _bw_segment_max(g, xs, out, saved, attrs):
    off, argrows = saved
    gx = np.zeros_like(xs[0])
    cols = np.arange(gx.shape[1])
    for s in range(off.size - 1):
        gx[argrows[s], cols] += g[s]
    return (gx,)


def _fw_segment_broadcast(xs, attrs):
    (x,) = xs
    off = np.asarray(attrs["offsets"], dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != off.size - 1:
        raise ShapeError(f"segment_broadcast expects one row per segment, got {x.shape} for {off.size - 1} segments")
    counts = np.diff(off)
    if np.any(counts <= 0):
        raise ShapeError("offsets must be strictly increasing (no empty segments)")
    return np.repeat(x, counts, axis=0), off


def _bw_segment_broadcast(g, xs, out, saved, attrs):
    return (np.add.reduceat(g, saved[:-1], axis=0),)


_PRIMITIVES = {
    "matmul": (_fw_matmul, _bw_matmul),
    "add": (_fw_add, _bw_add),
    "scalar_scale": (_fw_scalar_scale, _bw_scalar_scale),
    "relu": (_fw_relu, _bw_relu),
    "tanh": (_fw_tanh, _bw_tanh),
    "sigmoid": (_fw_sigmoid, _bw_sigmoid),
    "elu": (_fw_elu, _bw_elu),
    "reduce_sum": (_fw_reduce_sum, _bw_reduce_sum),
    "reduce_max": (_fw_reduce_max, _bw_reduce_max),
    "reduce_mean": (_fw_reduce_mean, _bw_reduce_mean),
    "softmax": (_fw_softmax, _bw_softmax),
    "concat": (_fw_concat, _bw_concat),
    "mse_loss": (_fw_mse_loss, _bw_mse_loss),
    "hinge_margin_loss": (_fw_hinge_margin_loss, _bw_hinge_margin_loss),
    "set_softmax_nll": (_fw_set_softmax_nll, _bw_set_softmax_nll),
    "segment_sum": (_fw_segment_sum, _bw_segment_sum),
    "segment_mean": (_fw_segment_mean, _bw_segment_mean),
    "segment_max": (_fw_segment_max, _bw_segment_max),
    "segment_broadcast": (_fw_segment_broadcast, _bw_segment_broadcast),
}

PRIMITIVE_KINDS = tuple(sorted(_PRIMITIVES))


def apply_primitive(kind: str, inputs: tuple[Tensor, ...] | list[Tensor], attrs: dict | None = None) -> Tensor:
    """Evaluate one primitive and record it on the active tape, if any.

    Raises ShapeError for non-conforming inputs, UnknownPrimitiveError for an
    unregistered kind, and NonFiniteError if the result contains NaN/Inf.
    """
    if kind not in _PRIMITIVES:
        raise UnknownPrimitiveError(f"unknown primitive kind {kind!r}")
    attrs = attrs or {}
    fw, _ = _PRIMITIVES[kind]
    arrays = tuple(t.data for t in inputs)
    out, saved = fw(arrays, attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"primitive {kind!r} produced non-finite values")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.node_id = None
    result.tape = None
    result.is_param = False
    result.name = None
    tape = active_tape()
    if tape is not None:
        ids = tuple(tape.ensure_leaf(t) for t in inputs)
        tape.nodes.append(_Node(kind, ids, attrs, saved, arrays, out))
        result.node_id = len(tape.nodes) - 1
        result.tape = tape
    return result


def backprop(tape: Tape, loss: int | Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss node; returns gradients for all leaves.

    The gradient of a leaf shared by several consumers (e.g. a weight applied
    to every element of a set) accumulates one contribution per use.
    Unreached leaves get zero gradients of matching shape. Intermediate
    gradients are dropped as soon as they have been propagated.
    """
    loss_id = loss.node_id if isinstance(loss, Tensor) else int(loss)
    if loss_id is None or not 0 <= loss_id < len(tape.nodes):
        raise AutodiffError("loss node is not on this tape")
    if tape.nodes[loss_id].out_data.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {tape.nodes[loss_id].out_data.shape}")

    grads: dict[int, np.ndarray] = {loss_id: np.asarray(1.0)}
    leaf = [n.kind == "leaf" for n in tape.nodes]
    for nid in range(loss_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.kind == "leaf":
            continue
        if any(i >= nid for i in node.inputs):
            raise AutodiffError(f"tape order violated at node {nid}")
        _, bw = _PRIMITIVES[node.kind]
        in_grads = bw(g, node.in_data, node.out_data, node.saved, node.attrs)
        for iid, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + ig
            else:
                grads[iid] = ig
        del grads[nid]

    tape.gradients = {}
    for nid, is_leaf in enumerate(leaf):
        if not is_leaf:
            continue
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(tape.nodes[nid].out_data)
        if g.shape != tape.nodes[nid].out_data.shape:
            raise ShapeError(f"gradient shape {g.shape} != leaf shape {tape.nodes[nid].out_data.shape}")
        tape.gradients[nid] = Tensor(g)
    return tape.gradients


def grad_check(f, params: list[Tensor], step: float = 1e-5, samples_per_tensor: int = 10, seed: int = 0) -> float:
    """Compare backprop gradients of ``f(params)`` with central differences.

    ``f`` must build a scalar from the given parameter tensors using
    primitives only, deterministically; it is evaluated twice up front and a
    bitwise mismatch raises NonDeterministicError. Returns the maximum of
    ``|analytic - numeric| / max(1, |analytic|)`` over sampled coordinates.
    """
    if not 0.0 < step <= 1e-2:
        raise AutodiffError(f"step must lie in (0, 1e-2], got {step}")

    def value() -> float:
        out = f(params)
        if out.data.shape != ():
            raise ShapeError("grad_check target must be scalar")
        return float(out.data)

    if value() != value():
        raise NonDeterministicError("two evaluations of f at the same point differ")

    with Tape() as tape:
        for p in params:
            tape.ensure_leaf(p)
        loss = f(params)
        grads = backprop(tape, loss)
    analytic = [grads[p.node_id].data for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= samples_per_tensor else rng.choice(n, size=samples_per_tensor, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = value()
            flat[c] = orig - step
            down = value()
            flat[c] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[c] - numeric) / max(1.0, abs(gflat[c]))
            if err > worst:
                worst = err
    return worst


# Functional aliases used throughout the model code.

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", (a, b))


def scalar_scale(x: Tensor, alpha: float) -> Tensor:
    return apply_primitive("scalar_scale", (x,), {"alpha": alpha})


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", (x,))


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", (x,))


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", (x,))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    return apply_primitive("elu", (x,), {"alpha": alpha})


def reduce_sum(x: Tensor, axis: int) -> Tensor:
    return apply_primitive("reduce_sum", (x,), {"axis": axis})


def reduce_max(x: Tensor, axis: int) -> Tensor:
    return apply_primitive("reduce_max", (x,), {"axis": axis})


def reduce_mean(x: Tensor, axis: int) -> Tensor:
    return apply_primitive("reduce_mean", (x,), {"axis": axis})


def softmax(x: Tensor, axis: int) -> Tensor:
    return apply_primitive("softmax", (x,), {"axis": axis})


def concat(xs, axis: int) -> Tensor:
    return apply_primitive("concat", tuple(xs), {"axis": axis})


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    return apply_primitive("mse_loss", (pred, target))


def hinge_margin_loss(s_pos: Tensor, s_neg: Tensor, delta: float) -> Tensor:
    return apply_primitive("hinge_margin_loss", (s_pos, s_neg), {"delta": delta})


def set_softmax_nll(scores: Tensor, offsets, targets) -> Tensor:
    return apply_primitive("set_softmax_nll", (scores,), {"offsets": tuple(int(o) for o in offsets), "targets": tuple(int(t) for t in targets)})


def segment_sum(x: Tensor, offsets) -> Tensor:
    return apply_primitive("segment_sum", (x,), {"offsets": tuple(int(o) for o in offsets)})


def segment_mean(x: Tensor, offsets) -> Tensor:
    return apply_primitive("segment_mean", (x,), {"offsets": tuple(int(o) for o in offsets)})


def segment_max(x: Tensor, offsets) -> Tensor:
    return apply_primitive("segment_max", (x,), {"offsets": tuple(int(o) for o in offsets)})


def segment_broadcast(x: Tensor, offsets) -> Tensor:
    return apply_primitive("segment_broadcast", (x,), {"offsets": tuple(int(o) for o in offsets)})
