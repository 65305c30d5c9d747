"""Reverse-mode automatic differentiation over float64 numpy buffers.

A :class:`Tape` records operations as they execute; :func:`backward` walks
the record list once in reverse and accumulates gradients per node id.
Tapes are rebuilt for every forward pass, so the seven model wirings in
this package need no graph compiler. Everything is float64 and
deterministic given identical input bits (dropout takes an explicit seed).

Op kinds
--------
add, subtract, multiply, matmul, transpose, concat-last-axis, concat-rows,
elementwise-max, relu, sigmoid, tanh, masked-softmax, layer-normalize,
mean-over-rows, sum-over-rows, gather-rows, scatter-add-rows, segment-mean,
edge-message, p-norm-of-difference, broadcast-add-bias, dropout,
squared-error, binary-cross-entropy-with-logit, cross-entropy-with-logits.

``add``, ``subtract`` and ``multiply`` accept one scalar (0-d) operand and
broadcast it; all other shape combinations must match exactly.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_node_ids = itertools.count()

_LOG_EPS = 1e-12
_NORM_EPS = 1e-12
_LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op kind."""

    def __init__(self, kind, *shapes):
        super().__init__(
            f"op '{kind}': incompatible shapes {' and '.join(str(s) for s in shapes)}"
        )


class Tensor:
    """Value node of the computation graph.

    ``values`` is a float64 ndarray (row-major), ``grad`` stays None until
    :func:`backward` fills it, and ``node_id`` is unique per tensor.
    ``checked`` caches the NaN validation so each buffer is scanned once;
    code that mutates ``values`` in place (the optimizer) resets it.
    """

    __slots__ = ("values", "grad", "node_id", "requires_grad", "name", "checked")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.node_id = next(_node_ids)
        self.requires_grad = requires_grad
        self.name = name
        self.checked = False

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        label = self.name or f"node{self.node_id}"
        return f"Tensor({label}, shape={self.values.shape}, requires_grad={self.requires_grad})"


def parameter(values, name=None):
    return Tensor(values, requires_grad=True, name=name)


def constant(values):
    return Tensor(values, requires_grad=False)


@dataclass
class OpRecord:
    kind: str
    input_ids: tuple
    output_id: int
    backward_fn: object  # (grad_out, accumulate) -> None


@dataclass
class Tape:
    """Ordered operation record; inputs always precede their consumers.

    With ``grad_enabled=False`` the tape validates and computes but records
    nothing (used for evaluation passes).
    """

    grad_enabled: bool = True
    records: list = field(default_factory=list)
    watched: dict = field(default_factory=dict)  # node_id -> Tensor (requires_grad)

    def apply(self, kind, *inputs, **kwargs):
        op = _OPS.get(kind)
        if op is None:
            raise KeyError(f"unknown op kind '{kind}'")
        for t in inputs:
            if t.checked:
                continue
            # cheap fail-fast NaN test: a sum is NaN iff it saw a NaN
            # (or an inf/-inf mix, which deserves rejection just as much)
            s = t.values.sum()
            if s != s:
                if np.isnan(t.values).any():
                    raise FloatingPointError(f"op '{kind}': NaN in input values")
                raise FloatingPointError(f"op '{kind}': non-finite input values")
            t.checked = True
        out_values, backward_fn = op(inputs, kwargs)
        track = self.grad_enabled and any(t.requires_grad for t in inputs)
        out = Tensor(out_values, requires_grad=track)
        if track:
            watched = self.watched
            for t in inputs:
                if t.requires_grad and t.node_id not in watched:
                    watched[t.node_id] = t
            self.records.append((out.node_id, backward_fn))
            watched[out.node_id] = out
        return out

    def detach(self, tensor):
        """Constant copy of a tensor's values (blocks gradient flow)."""
        return Tensor(tensor.values.copy(), requires_grad=False)


def apply(kind, inputs, tape, **kwargs):
    """Functional alias for :meth:`Tape.apply`."""
    return tape.apply(kind, *inputs, **kwargs)


def backward(loss, tape):
    """Gradient of a scalar loss w.r.t. every recorded requires_grad tensor.

    Returns a dict keyed by node_id. Recorded tensors that do not feed the
    loss get exactly-zero gradients. Each tensor's ``grad`` slot is set to
    its entry (overwritten, not accumulated across calls).
    """
    if loss.values.shape != ():
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.values.shape}"
        )
    grads = {loss.node_id: np.ones((), dtype=np.float64)}
    owned = {loss.node_id}

    def accumulate(tensor, grad):
        # copy-on-write: single-consumer nodes keep the incoming buffer
        # (possibly a view); a second contribution forces an owned copy
        # before the in-place add so no shared buffer is ever mutated.
        nid = tensor.node_id
        entry = grads.get(nid)
        if entry is None:
            grads[nid] = grad
        else:
            if nid not in owned:
                entry = np.array(entry, dtype=np.float64)
                grads[nid] = entry
                owned.add(nid)
            entry += grad

    for output_id, backward_fn in reversed(tape.records):
        grad_out = grads.get(output_id)
        if grad_out is None:
            continue
        backward_fn(grad_out, accumulate)

    result = {}
    for node_id, tensor in tape.watched.items():
        grad = grads.get(node_id)
        if grad is None:
            grad = np.zeros_like(tensor.values)
        result[node_id] = grad
        tensor.grad = grad
    return result


# ---------------------------------------------------------------------------
# op implementations: each returns (output values, backward closure)
# ---------------------------------------------------------------------------

_OPS = {}


def _register(kind):
    def deco(fn):
        _OPS[kind] = fn
        return fn

    return deco


def _unary(t):
    return t[0] if len(t) == 1 else None


def _require_arity(kind, inputs, n):
    if len(inputs) != n:
        raise ShapeError(kind, *[t.shape for t in inputs])


def _elementwise_shapes(kind, a, b):
    # one 0-d operand broadcasts; otherwise shapes must match
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(kind, a.shape, b.shape)


def _reduce_to(grad, shape):
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum())
    return grad


@_register("add")
def _op_add(inputs, kw):
    _require_arity("add", inputs, 2)
    a, b = inputs
    _elementwise_shapes("add", a, b)

    def bwd(g, acc):
        acc(a, _reduce_to(g, a.shape))
        acc(b, _reduce_to(g, b.shape))

    return a.values + b.values, bwd


@_register("subtract")
def _op_subtract(inputs, kw):
    _require_arity("subtract", inputs, 2)
    a, b = inputs
    _elementwise_shapes("subtract", a, b)

    def bwd(g, acc):
        acc(a, _reduce_to(g, a.shape))
        acc(b, _reduce_to(-g, b.shape))

    return a.values - b.values, bwd


@_register("multiply")
def _op_multiply(inputs, kw):
    _require_arity("multiply", inputs, 2)
    a, b = inputs
    _elementwise_shapes("multiply", a, b)

    def bwd(g, acc):
        acc(a, _reduce_to(g * b.values, a.shape))
        acc(b, _reduce_to(g * a.values, b.shape))

    return a.values * b.values, bwd


@_register("matmul")
def _op_matmul(inputs, kw):
    _require_arity("matmul", inputs, 2)
    a, b = inputs
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bwd(g, acc):
        acc(a, g @ b.values.T)
        acc(b, a.values.T @ g)

    return a.values @ b.values, bwd


@_register("transpose")
def _op_transpose(inputs, kw):
    _require_arity("transpose", inputs, 1)
    x = inputs[0]
    if x.values.ndim != 2:
        raise ShapeError("transpose", x.shape)

    def bwd(g, acc):
        acc(x, g.T)

    return x.values.T.copy(), bwd


@_register("concat-last-axis")
def _op_concat_last(inputs, kw):
    _require_arity("concat-last-axis", inputs, 2)
    a, b = inputs
    if a.values.ndim != b.values.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError("concat-last-axis", a.shape, b.shape)
    wa = a.shape[-1]

    def bwd(g, acc):
        acc(a, g[..., :wa])
        acc(b, g[..., wa:])

    return np.concatenate([a.values, b.values], axis=-1), bwd


@_register("concat-rows")
def _op_concat_rows(inputs, kw):
    if not inputs:
        raise ShapeError("concat-rows")
    rows = [t.values if t.values.ndim == 2 else t.values[None, :] for t in inputs]
    width = rows[0].shape[1]
    if any(r.shape[1] != width for r in rows):
        raise ShapeError("concat-rows", *[t.shape for t in inputs])
    counts = [r.shape[0] for r in rows]

    def bwd(g, acc):
        lo = 0
        for t, n in zip(inputs, counts):
            piece = g[lo:lo + n]
            acc(t, piece if t.values.ndim == 2 else piece[0])
            lo += n

    return np.concatenate(rows, axis=0), bwd


@_register("elementwise-max")
def _op_max(inputs, kw):
    _require_arity("elementwise-max", inputs, 2)
    a, b = inputs
    if a.shape != b.shape:
        raise ShapeError("elementwise-max", a.shape, b.shape)
    take_a = a.values >= b.values  # ties route to the first operand

    def bwd(g, acc):
        acc(a, g * take_a)
        acc(b, g * ~take_a)

    return np.maximum(a.values, b.values), bwd


@_register("relu")
def _op_relu(inputs, kw):
    _require_arity("relu", inputs, 1)
    x = inputs[0]
    out = np.maximum(x.values, 0.0)
    active = x.values > 0.0  # gradient at exactly 0 is 0

    def bwd(g, acc):
        acc(x, g * active)

    return out, bwd


@_register("sigmoid")
def _op_sigmoid(inputs, kw):
    _require_arity("sigmoid", inputs, 1)
    x = inputs[0]
    v = x.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def bwd(g, acc):
        acc(x, g * out * (1.0 - out))

    return out, bwd


@_register("tanh")
def _op_tanh(inputs, kw):
    _require_arity("tanh", inputs, 1)
    x = inputs[0]
    out = np.tanh(x.values)

    def bwd(g, acc):
        acc(x, g * (1.0 - out * out))

    return out, bwd


@_register("masked-softmax")
def _op_masked_softmax(inputs, kw):
    _require_arity("masked-softmax", inputs, 1)
    x = inputs[0]
    mask = np.asarray(kw["mask"], dtype=bool)
    if x.values.ndim not in (1, 2) or mask.shape != (x.shape[-1],):
        raise ShapeError("masked-softmax", x.shape, mask.shape)
    if not mask.any():
        raise ShapeError("masked-softmax", x.shape, mask.shape)
    z = np.where(mask, x.values, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    out = ez / ez.sum(axis=-1, keepdims=True)

    def bwd(g, acc):
        dot = (g * out).sum(axis=-1, keepdims=True)
        acc(x, out * (g - dot))

    return out, bwd


@_register("layer-normalize")
def _op_layer_norm(inputs, kw):
    _require_arity("layer-normalize", inputs, 3)
    x, gain, bias = inputs
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer-normalize", x.shape, gain.shape, bias.shape)
    eps = kw.get("eps", _LN_EPS)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bwd(g, acc):
        gx_hat = g * gain.values
        gvar = (gx_hat * centered).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        gmu = (-gx_hat * inv).sum(axis=-1, keepdims=True) + gvar * (
            -2.0 * centered.mean(axis=-1, keepdims=True)
        )
        gx = gx_hat * inv + gvar * 2.0 * centered / d + gmu / d
        acc(x, gx)
        axes = tuple(range(x.values.ndim - 1))
        acc(gain, (g * xhat).sum(axis=axes) if axes else g * xhat)
        acc(bias, g.sum(axis=axes) if axes else g)

    return xhat * gain.values + bias.values, bwd


@_register("mean-over-rows")
def _op_mean_rows(inputs, kw):
    _require_arity("mean-over-rows", inputs, 1)
    x = inputs[0]
    if x.values.ndim not in (1, 2) or x.shape[0] == 0:
        raise ShapeError("mean-over-rows", x.shape)
    n = x.shape[0]

    def bwd(g, acc):
        acc(x, np.broadcast_to(np.asarray(g) / n, x.shape).copy())

    return x.values.mean(axis=0), bwd


@_register("sum-over-rows")
def _op_sum_rows(inputs, kw):
    _require_arity("sum-over-rows", inputs, 1)
    x = inputs[0]
    if x.values.ndim not in (1, 2):
        raise ShapeError("sum-over-rows", x.shape)

    def bwd(g, acc):
        acc(x, np.broadcast_to(np.asarray(g), x.shape).copy())

    return x.values.sum(axis=0), bwd


@_register("gather-rows")
def _op_gather_rows(inputs, kw):
    _require_arity("gather-rows", inputs, 1)
    x = inputs[0]
    idx = np.asarray(kw["indices"], dtype=np.int64)
    if x.values.ndim != 2:
        raise ShapeError("gather-rows", x.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(
            f"gather-rows: index out of range for {x.shape[0]} rows"
        )

    def bwd(g, acc):
        acc(x, kernels.scatter_add_rows(np.ascontiguousarray(g), idx, x.shape[0]))

    return x.values[idx], bwd


@_register("scatter-add-rows")
def _op_scatter_rows(inputs, kw):
    _require_arity("scatter-add-rows", inputs, 1)
    x = inputs[0]
    idx = np.asarray(kw["indices"], dtype=np.int64)
    num_rows = int(kw["num_rows"])
    if x.values.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError("scatter-add-rows", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError(f"scatter-add-rows: index out of range for {num_rows} rows")

    def bwd(g, acc):
        acc(x, np.ascontiguousarray(g)[idx])

    return kernels.scatter_add_rows(np.ascontiguousarray(x.values), idx, num_rows), bwd


@_register("segment-mean")
def _op_segment_mean(inputs, kw):
    _require_arity("segment-mean", inputs, 1)
    x = inputs[0]
    offsets = np.asarray(kw["offsets"], dtype=np.int64)
    if x.values.ndim != 2 or offsets[0] != 0 or offsets[-1] != x.shape[0]:
        raise ShapeError("segment-mean", x.shape, offsets.shape)
    if (np.diff(offsets) <= 0).any():
        raise ValueError("segment-mean: empty or non-increasing segment")
    n = x.shape[0]

    def bwd(g, acc):
        acc(x, kernels.segment_mean_grad(np.ascontiguousarray(g), offsets, n))

    return kernels.segment_mean(np.ascontiguousarray(x.values), offsets), bwd


@_register("edge-message")
def _op_edge_message(inputs, kw):
    _require_arity("edge-message", inputs, 2)
    a_flat, h = inputs
    src = np.asarray(kw["src"], dtype=np.int64)
    dst = np.asarray(kw["dst"], dtype=np.int64)
    w = h.shape[1] if h.values.ndim == 2 else 0
    if (
        h.values.ndim != 2
        or a_flat.values.ndim != 2
        or a_flat.shape != (len(src), w * w)
        or len(src) != len(dst)
    ):
        raise ShapeError("edge-message", a_flat.shape, h.shape)
    n = h.shape[0]
    if src.size and (
        src.min() < 0 or src.max() >= n or dst.min() < 0 or dst.max() >= n
    ):
        raise IndexError("edge-message: dangling edge index")

    def bwd(g, acc):
        ga, gh = kernels.edge_message_grad(
            np.ascontiguousarray(g), a_flat.values, h.values, src, dst
        )
        acc(a_flat, ga)
        acc(h, gh)

    out = kernels.edge_message(
        np.ascontiguousarray(a_flat.values), np.ascontiguousarray(h.values),
        src, dst, n,
    )
    return out, bwd


@_register("typed-edge-message")
def _op_typed_edge_message(inputs, kw):
    """edge-message where edges share a small set of matrices.

    a_types holds one flattened (w x w) matrix per edge type; ``order``
    lists edge ids grouped by type with ``bounds`` delimiting the groups.
    Per type the messages reduce to one BLAS matmul plus a scatter-add,
    which is how the message pass stays fast on dense molecule batches.
    """
    a_types, h = inputs
    src = np.asarray(kw["src"], dtype=np.int64)
    dst = np.asarray(kw["dst"], dtype=np.int64)
    order = np.asarray(kw["order"], dtype=np.int64)
    bounds = np.asarray(kw["bounds"], dtype=np.int64)
    w = h.shape[1] if h.values.ndim == 2 else 0
    num_types = len(bounds) - 1
    if (
        h.values.ndim != 2
        or a_types.values.ndim != 2
        or a_types.shape != (num_types, w * w)
        or len(src) != len(dst)
        or len(order) != len(src)
    ):
        raise ShapeError("typed-edge-message", a_types.shape, h.shape)
    n = h.shape[0]
    if src.size and (
        src.min() < 0 or src.max() >= n or dst.min() < 0 or dst.max() >= n
    ):
        raise IndexError("typed-edge-message: dangling edge index")
    hv = h.values
    out = np.zeros((n, w), dtype=np.float64)
    mats = a_types.values.reshape(num_types, w, w)
    for k in range(num_types):
        sel = order[bounds[k]:bounds[k + 1]]
        if not len(sel):
            continue
        msgs = hv[src[sel]] @ mats[k].T
        kernels.scatter_add_into(out, msgs, dst[sel])

    def bwd(g, acc):
        g = np.ascontiguousarray(g)
        grad_a = np.zeros_like(a_types.values)
        grad_h = np.zeros_like(hv)
        for k in range(num_types):
            sel = order[bounds[k]:bounds[k + 1]]
            if not len(sel):
                continue
            gm = g[dst[sel]]
            h_src = hv[src[sel]]
            grad_a[k] = (gm.T @ h_src).reshape(-1)
            kernels.scatter_add_into(grad_h, gm @ mats[k], src[sel])
        acc(a_types, grad_a)
        acc(h, grad_h)

    return out, bwd


@_register("p-norm-of-difference")
def _op_pnorm_diff(inputs, kw):
    _require_arity("p-norm-of-difference", inputs, 2)
    a, b = inputs
    if a.shape != b.shape or a.values.ndim not in (1, 2):
        raise ShapeError("p-norm-of-difference", a.shape, b.shape)
    if kw.get("p", 2) != 2:
        raise ValueError("p-norm-of-difference: only p=2 is supported")
    diff = a.values - b.values
    norm = np.sqrt((diff * diff).sum(axis=-1))

    def bwd(g, acc):
        safe = np.maximum(norm, _NORM_EPS)
        scale = np.asarray(g) / safe
        if diff.ndim == 2:
            scale = scale[:, None]
        acc(a, scale * diff)
        acc(b, -scale * diff)

    return norm, bwd


@_register("broadcast-add-bias")
def _op_add_bias(inputs, kw):
    _require_arity("broadcast-add-bias", inputs, 2)
    x, bias = inputs
    if x.values.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError("broadcast-add-bias", x.shape, bias.shape)

    def bwd(g, acc):
        acc(x, g)
        acc(bias, g.sum(axis=0))

    return x.values + bias.values, bwd


@_register("dropout")
def _op_dropout(inputs, kw):
    _require_arity("dropout", inputs, 1)
    x = inputs[0]
    rate = float(kw.get("rate", 0.0))
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0:
        def bwd_id(g, acc):
            acc(x, g)

        return x.values.copy(), bwd_id
    rng = np.random.default_rng(int(kw["seed"]))
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)

    def bwd(g, acc):
        acc(x, g * keep * scale)

    return x.values * keep * scale, bwd


@_register("squared-error")
def _op_squared_error(inputs, kw):
    _require_arity("squared-error", inputs, 2)
    pred, target = inputs
    if pred.shape != target.shape:
        raise ShapeError("squared-error", pred.shape, target.shape)
    diff = pred.values - target.values

    def bwd(g, acc):
        acc(pred, 2.0 * g * diff)
        acc(target, -2.0 * g * diff)

    return np.asarray((diff * diff).sum()), bwd


@_register("binary-cross-entropy-with-logit")
def _op_bce_logit(inputs, kw):
    _require_arity("binary-cross-entropy-with-logit", inputs, 2)
    logit, target = inputs
    if logit.shape != target.shape:
        raise ShapeError("binary-cross-entropy-with-logit", logit.shape, target.shape)
    z, y = logit.values, target.values
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 1.0 / (1.0 + np.exp(-z))

    def bwd(g, acc):
        acc(logit, g * (sig - y))
        acc(target, g * (-z))

    return np.asarray(loss.sum()), bwd


@_register("cross-entropy-with-logits")
def _op_ce_logits(inputs, kw):
    _require_arity("cross-entropy-with-logits", inputs, 1)
    logits = inputs[0]
    ids = np.asarray(kw["target_ids"], dtype=np.int64)
    if logits.values.ndim != 2 or ids.shape != (logits.shape[0],):
        raise ShapeError("cross-entropy-with-logits", logits.shape, ids.shape)
    z = logits.values
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    log_probs = (z - zmax) - np.log(denom)
    picked = log_probs[np.arange(len(ids)), ids]
    probs = ez / denom

    def bwd(g, acc):
        gz = probs.copy()
        gz[np.arange(len(ids)), ids] -= 1.0
        acc(logits, np.asarray(g) * gz)

    return np.asarray(-picked.sum()), bwd


OP_KINDS = tuple(sorted(_OPS))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    kind: str
    shapes: tuple
    max_rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list = field(default_factory=list)

    def max_error(self, kind=None):
        errs = [e.max_rel_error for e in self.entries if kind is None or e.kind == kind]
        return max(errs) if errs else 0.0

    @property
    def passed(self):
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    def failures(self):
        return [e for e in self.entries if e.max_rel_error >= self.tolerance]


def relative_error(analytic, numeric, floor=1e-3):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero grads sane."""
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def fd_gradients(fn, tensors, h=1e-5):
    """Central finite differences of scalar fn() w.r.t. each tensor's values."""
    grads = []
    for t in tensors:
        flat = t.values.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(fn())
            flat[i] = keep - h
            down = float(fn())
            flat[i] = keep
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(t.values.shape))
    return grads


def _scalarize(tape, out, projection):
    proj = constant(projection)
    prod = tape.apply("multiply", out, proj)
    flat = prod
    while flat.values.ndim > 0:
        flat = tape.apply("sum-over-rows", flat)
    return flat


def check_op_gradient(kind, tensors, kwargs=None, h=1e-5, rng=None):
    """Max relative error of one op's analytic gradient vs central FD."""
    kwargs = kwargs or {}
    rng = rng or np.random.default_rng(0)

    sample = Tape(grad_enabled=False).apply(
        kind, *[constant(t.values) for t in tensors], **kwargs
    )
    projection = rng.normal(size=sample.values.shape)

    def run():
        tape = Tape()
        out = tape.apply(kind, *tensors, **kwargs)
        return _scalarize(tape, out, projection), tape

    loss, tape = run()
    grads = backward(loss, tape)
    numeric = fd_gradients(lambda: run()[0].values, tensors, h=h)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        ana = grads[t.node_id]
        for a, n in zip(np.ravel(ana), np.ravel(num)):
            worst = max(worst, relative_error(a, n))
    return worst


def _trial_inputs(kind, shape, rng):
    """Random inputs/kwargs for one gradient-check trial of ``kind``.

    Kinked ops are sampled away from their kinks so central differences
    are valid: relu/max-type inputs keep |margin| >= 1e-3 and norm inputs
    stay well separated.
    """
    def rand(s):
        return parameter(rng.normal(size=s))

    n = shape[0] if shape else 2
    d = shape[1] if len(shape) > 1 else 3
    if kind in ("add", "subtract", "multiply", "elementwise-max"):
        a, b = rand(shape), rand(shape)
        if kind == "elementwise-max":
            gap = np.sign(a.values - b.values)
            gap[gap == 0] = 1.0
            a.values += 2e-3 * gap
        return [a, b], {}
    if kind == "matmul":
        k = d + 1
        return [rand((n, k)), rand((k, d))], {}
    if kind == "transpose":
        return [rand((n, d))], {}
    if kind in ("concat-last-axis",):
        return [rand((n, d)), rand((n, d + 1))], {}
    if kind == "concat-rows":
        return [rand((n, d)), rand((n + 1, d)), rand((d,))], {}
    if kind == "relu":
        x = rand(shape)
        x.values = np.sign(x.values) * (np.abs(x.values) + 1e-3)
        return [x], {}
    if kind in ("sigmoid", "tanh"):
        return [rand(shape)], {}
    if kind == "masked-softmax":
        mask = np.ones(d, dtype=bool)
        if d > 1:
            mask[rng.integers(0, d)] = False
        return [rand((n, d))], {"mask": mask}
    if kind == "layer-normalize":
        return [rand((n, d)), rand((d,)), rand((d,))], {}
    if kind in ("mean-over-rows", "sum-over-rows"):
        return [rand((n, d))], {}
    if kind == "gather-rows":
        idx = rng.integers(0, n, size=n + 2)
        return [rand((n, d))], {"indices": idx}
    if kind == "scatter-add-rows":
        rows = n + 1
        idx = rng.integers(0, rows, size=n)
        return [rand((n, d))], {"indices": idx, "num_rows": rows}
    if kind == "segment-mean":
        cut = rng.integers(1, n) if n > 1 else 1
        offsets = [0, int(cut), n] if n > 1 else [0, 1]
        return [rand((n, d))], {"offsets": np.array(offsets)}
    if kind == "edge-message":
        num_edges = n + 1
        src = rng.integers(0, n, size=num_edges)
        dst = rng.integers(0, n, size=num_edges)
        return [rand((num_edges, d * d)), rand((n, d))], {"src": src, "dst": dst}
    if kind == "typed-edge-message":
        num_edges = n + 2
        num_types = 2
        src = rng.integers(0, n, size=num_edges)
        dst = rng.integers(0, n, size=num_edges)
        type_idx = rng.integers(0, num_types, size=num_edges)
        order = np.argsort(type_idx, kind="stable")
        counts = np.bincount(type_idx, minlength=num_types)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        return (
            [rand((num_types, d * d)), rand((n, d))],
            {"src": src, "dst": dst, "order": order, "bounds": bounds},
        )
    if kind == "p-norm-of-difference":
        a, b = rand((n, d)), rand((n, d))
        b.values = a.values + np.sign(b.values - a.values + 0.5) * (
            np.abs(b.values - a.values) + 0.2
        )
        return [a, b], {}
    if kind == "broadcast-add-bias":
        return [rand((n, d)), rand((d,))], {}
    if kind == "dropout":
        return [rand((n, d))], {"rate": 0.4, "seed": int(rng.integers(1 << 30))}
    if kind == "squared-error":
        return [rand((n, d)), rand((n, d))], {}
    if kind == "binary-cross-entropy-with-logit":
        y = parameter((rng.random((n, 1)) > 0.5).astype(np.float64))
        return [rand((n, 1)), y], {}
    if kind == "cross-entropy-with-logits":
        ids = rng.integers(0, d, size=n)
        return [rand((n, d))], {"target_ids": ids}
    raise KeyError(f"no trial recipe for op kind '{kind}'")


def check_gradients(kinds=None, trials=10, tolerance=1e-4, seed=1234,
                    trial_shapes=None):
    """Finite-difference sweep over op kinds; failures land in the report.

    ``trial_shapes`` fixes the base (rows, cols) shape of each trial;
    otherwise ``trials`` random shapes are drawn per kind.
    """
    if kinds is None:
        kinds = OP_KINDS
    elif isinstance(kinds, str):
        kinds = [kinds]
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for kind in kinds:
        if trial_shapes is not None:
            shapes = [tuple(s) for s in trial_shapes]
        else:
            shapes = [
                (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
                for _ in range(trials)
            ]
        for shape in shapes:
            tensors, kwargs = _trial_inputs(kind, shape, rng)
            err = check_op_gradient(kind, tensors, kwargs, rng=rng)
            report.entries.append(
                GradCheckEntry(kind, tuple(t.shape for t in tensors), err)
            )
    return report
