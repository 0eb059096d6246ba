"""Minimal differentiable numeric core.

Forward primitives record onto a ComputeRecord (a linear tape of numpy
operations); reverse-mode accumulation replays the tape backward and
returns gradients for trainable parameters only.  Everything is double
precision, and every random draw comes from a named stream derived from
one experiment seed, so runs replay bit-for-bit on one platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NnError",
    "ShapeError",
    "NonFiniteError",
    "Parameter",
    "ComputeRecord",
    "Node",
    "rng_stream",
    "linear",
    "relu",
    "add",
    "temporal_conv",
    "graph_conv_spatial",
    "graph_conv_cheb",
    "mean_pool_time",
    "dropout",
    "mse_loss",
    "backward",
    "AdamState",
    "adam_step",
    "grad_check",
    "save_params",
    "load_params",
]


class NnError(ValueError):
    pass


class ShapeError(NnError):
    pass


class NonFiniteError(NnError):
    pass


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Generator for a named substream of one experiment seed (PCG64).

    Streams are derived with numpy's SeedSequence from (seed, names), so
    adding a new stream never perturbs existing ones.
    """
    entropy = [int(seed)] + [abs(hash_name(n)) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def hash_name(name) -> int:
    # Stable across processes (hash() is salted per run; this is not).
    h = 2166136261
    for ch in str(name).encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


@dataclass
class Parameter:
    """Named tensor with a trainable flag; frozen values never move."""

    name: str
    value: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)


class Node:
    """A value on the tape."""

    __slots__ = ("value", "parents", "grad_fn", "needs_grad")

    def __init__(self, value, parents=(), grad_fn=None, needs_grad=False):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape


class ComputeRecord:
    """Ordered log of primitive applications, replayable once backward."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._param_nodes = {}

    def leaf(self, param: Parameter) -> Node:
        node = Node(param.value, needs_grad=param.trainable)
        self._param_nodes[param.name] = (param, node)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        node = Node(np.asarray(value, dtype=float))
        self.nodes.append(node)
        return node

    def record(self, op_name, value, parents, grad_fn) -> Node:
        value = np.asarray(value, dtype=float)
        if not np.isfinite(value).all():
            raise NonFiniteError("non-finite output of %s" % op_name)
        node = Node(value, parents=tuple(parents), grad_fn=grad_fn,
                    needs_grad=any(p.needs_grad for p in parents))
        self.nodes.append(node)
        return node


def _as_node(record: ComputeRecord, x) -> Node:
    return x if isinstance(x, Node) else record.constant(x)


def _shape_check(op, cond, *shapes):
    if not cond:
        raise ShapeError("%s: incompatible shapes %s" % (op, [tuple(s) for s in shapes]))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def linear(record, x, W, b=None):
    """x @ W + b over the last axis."""
    x, W = _as_node(record, x), _as_node(record, W)
    _shape_check("linear", x.shape[-1] == W.shape[0], x.shape, W.shape)
    out = x.value @ W.value
    parents = [x, W]
    if b is not None:
        b = _as_node(record, b)
        _shape_check("linear", b.shape == (W.shape[1],), b.shape, W.shape)
        out = out + b.value
        parents.append(b)

    def grad_fn(g):
        # frozen weights skip their matmul entirely; backward drops None
        grads = [
            g @ W.value.T if x.needs_grad else None,
            np.einsum("...i,...j->ij", x.value, g, optimize=True)
            if W.needs_grad else None,
        ]
        if b is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0)
                         if b.needs_grad else None)
        return grads

    return record.record("linear", out, parents, grad_fn)


def relu(record, x):
    x = _as_node(record, x)
    mask = x.value > 0

    def grad_fn(g):
        return [g * mask]

    return record.record("relu", x.value * mask, [x], grad_fn)


def add(record, x, y):
    """Elementwise sum with numpy broadcasting (prompt fusion uses this)."""
    x, y = _as_node(record, x), _as_node(record, y)
    try:
        out = x.value + y.value
    except ValueError:
        raise ShapeError("add: incompatible shapes %s %s" % (x.shape, y.shape))

    def grad_fn(g):
        return [_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)]

    return record.record("add", out, [x, y], grad_fn)


def concat_rows(record, parts):
    """Stack tape values along axis 0 (pool segments into one factor matrix)."""
    parts = [_as_node(record, p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of nothing")
    out = np.concatenate([p.value for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def grad_fn(g):
        grads = []
        start = 0
        for size in sizes:
            grads.append(g[start:start + size])
            start += size
        return grads

    return record.record("concat_rows", out, parts, grad_fn)


def temporal_conv(record, x, W, b):
    """1D convolution over the time axis, kernel K, same-length zero padding.

    x: (B, T, n, d_in), W: (K, d_in, d_out), b: (d_out,).
    """
    x, W, b = _as_node(record, x), _as_node(record, W), _as_node(record, b)
    _shape_check("temporal_conv", x.value.ndim == 4 and W.value.ndim == 3
                 and x.shape[-1] == W.shape[1] and b.shape == (W.shape[2],),
                 x.shape, W.shape, b.shape)
    K = W.shape[0]
    T = x.shape[1]
    left = K // 2
    pad = np.zeros((x.shape[0], T + K - 1, x.shape[2], x.shape[3]))
    pad[:, left:left + T] = x.value
    out = np.zeros(x.shape[:3] + (W.shape[2],))
    for k in range(K):
        out += pad[:, k:k + T] @ W.value[k]
    out += b.value

    def grad_fn(g):
        gx, gW, gb = None, None, None
        if W.needs_grad:
            gW = np.zeros_like(W.value)
            for k in range(K):
                gW[k] = np.einsum("btnd,btne->de", pad[:, k:k + T], g, optimize=True)
        if x.needs_grad:
            gpad = np.zeros_like(pad)
            for k in range(K):
                gpad[:, k:k + T] += g @ W.value[k].T
            gx = gpad[:, left:left + T]
        if b.needs_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return [gx, gW, gb]

    return record.record("temporal_conv", out, [x, W, b], grad_fn)


def graph_conv_spatial(record, A_hat, h, W):
    """Normalized-adjacency propagation: A_hat @ h @ W.

    A_hat is a constant n x n operator; h may carry leading batch/time axes
    with nodes on axis -2.
    """
    h, W = _as_node(record, h), _as_node(record, W)
    A = np.asarray(A_hat, dtype=float)
    _shape_check("graph_conv_spatial", h.shape[-2] == A.shape[0]
                 and h.shape[-1] == W.shape[0], A.shape, h.shape, W.shape)
    Ah = np.einsum("ij,...jd->...id", A, h.value, optimize=True)
    out = Ah @ W.value

    def grad_fn(g):
        gh = (np.einsum("ji,...jd->...id", A, g @ W.value.T, optimize=True)
              if h.needs_grad else None)
        gW = (np.einsum("...i,...j->ij", Ah, g, optimize=True)
              if W.needs_grad else None)
        return [gh, gW]

    return record.record("graph_conv_spatial", out, [h, W], grad_fn)


def graph_conv_cheb(record, cheb_basis, h, thetas):
    """Spectral propagation: sum_k theta_k * T_k(L~) @ h.

    cheb_basis is the precomputed list [T_0, ..., T_K] of constant n x n
    matrices; thetas is a length K+1 coefficient vector.
    """
    h, thetas = _as_node(record, h), _as_node(record, thetas)
    _shape_check("graph_conv_cheb", thetas.value.ndim == 1
                 and len(cheb_basis) == thetas.shape[0]
                 and h.shape[-2] == cheb_basis[0].shape[0],
                 thetas.shape, h.shape, cheb_basis[0].shape)
    Tk_h = [np.einsum("ij,...jd->...id", Tk, h.value, optimize=True) for Tk in cheb_basis]
    out = sum(th * v for th, v in zip(thetas.value, Tk_h))

    def grad_fn(g):
        gh = None
        if h.needs_grad:
            gh = np.zeros_like(h.value)
            for th, Tk in zip(thetas.value, cheb_basis):
                gh += th * np.einsum("ji,...jd->...id", Tk, g, optimize=True)
        gth = (np.array([float(np.sum(v * g)) for v in Tk_h])
               if thetas.needs_grad else None)
        return [gh, gth]

    return record.record("graph_conv_cheb", out, [h, thetas], grad_fn)


def mean_pool_time(record, x):
    """Mean over the time axis of a (B, T, n, d) tensor."""
    x = _as_node(record, x)
    _shape_check("mean_pool_time", x.value.ndim == 4, x.shape)
    T = x.shape[1]
    out = x.value.mean(axis=1)

    def grad_fn(g):
        return [np.repeat(g[:, None] / T, T, axis=1)]

    return record.record("mean_pool_time", out, [x], grad_fn)


def dropout(record, x, p, rng=None):
    """Inverted dropout; p=0 is exactly the identity map."""
    x = _as_node(record, x)
    if not (0.0 <= p < 1.0):
        raise NnError("dropout rate must lie in [0, 1), got %r" % p)
    if p == 0.0:
        return x
    if rng is None:
        raise NnError("dropout with p > 0 needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def grad_fn(g):
        return [g * mask]

    return record.record("dropout", x.value * mask, [x], grad_fn)


def mse_loss(record, pred, target):
    pred = _as_node(record, pred)
    t = np.asarray(target, dtype=float)
    _shape_check("mse_loss", pred.shape == t.shape, pred.shape, t.shape)
    if t.size == 0:
        raise NnError("mse_loss on empty tensors")
    diff = pred.value - t
    out = np.asarray((diff ** 2).mean())

    def grad_fn(g):
        return [g * 2.0 * diff / diff.size]

    return record.record("mse_loss", out, [pred], grad_fn)


def backward(record: ComputeRecord, loss: Node) -> dict:
    """Reverse accumulation; gradients for trainable parameters only.

    Trainable parameters that never touched the loss get zero gradients;
    frozen parameters are absent from the map.  A record replays once.
    """
    if record.consumed:
        raise NnError("compute record already consumed")
    if loss.value.shape != ():
        raise NnError("loss must be scalar, got shape %s" % (loss.value.shape,))
    record.consumed = True
    grads = {id(loss): np.asarray(1.0)}
    for node in reversed(record.nodes):
        if node.grad_fn is None:
            continue  # leaves keep their accumulated gradient
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.grad_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.needs_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    out = {}
    for name, (param, node) in record._param_nodes.items():
        if not param.trainable:
            continue
        g = grads.get(id(node))
        out[name] = np.zeros_like(param.value) if g is None else np.asarray(g)
    return out


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads: dict, state: AdamState, lr: float):
    """One Adam update with bias correction; frozen parameters untouched."""
    by_name = {p.name: p for p in params}
    trainable = {p.name for p in params if p.trainable}
    extra = set(grads) - trainable
    if extra:
        raise NnError("gradients supplied for non-trainable parameters: %s" % sorted(extra))
    missing = trainable - set(grads)
    if missing:
        raise NnError("gradients missing for trainable parameters: %s" % sorted(missing))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = by_name[name]
        if g.shape != p.value.shape:
            raise ShapeError("adam_step: grad shape %s vs parameter %s for %r"
                             % (g.shape, p.value.shape, name))
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def grad_check(build_loss, params, h=(1e-5, 1e-4)) -> float:
    """Max relative error between tape gradients and central differences.

    build_loss(record) must rebuild the forward pass from the current
    parameter values each time it is called.  Each coordinate keeps its
    best step size: the small step bounds truncation error, the larger
    one rescues near-zero gradients whose differences would otherwise
    drown in float64 roundoff.
    """
    steps = (h,) if np.isscalar(h) else tuple(h)
    record = ComputeRecord()
    loss = build_loss(record)
    analytic = backward(record, loss)
    worst = 0.0
    for p in params:
        if not p.trainable:
            continue
        flat = p.value.reshape(-1)
        ga = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            best = np.inf
            for step in steps:
                flat[i] = orig + step
                lp = float(build_loss(ComputeRecord()).value)
                flat[i] = orig - step
                lm = float(build_loss(ComputeRecord()).value)
                flat[i] = orig
                fd = (lp - lm) / (2 * step)
                if not np.isfinite(fd):
                    raise NonFiniteError("finite-difference estimate diverged at %s[%d]"
                                         % (p.name, i))
                rel = abs(ga[i] - fd) / max(1e-8, abs(ga[i]) + abs(fd))
                best = min(best, rel)
            worst = max(worst, best)
    return worst


CHECKPOINT_HEADER = "growcast-params v1"


def save_params(path, params, extra: str = ""):
    """Versioned decimal-text checkpoint, one line per parameter."""
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_HEADER + (" " + extra if extra else "") + "\n")
        for p in params:
            shape = "x".join(str(s) for s in p.value.shape) or "scalar"
            vals = " ".join(repr(float(v)) for v in p.value.reshape(-1))
            fh.write("%s %s %s\n" % (p.name, shape, vals))


def load_params(path) -> dict:
    """Read a checkpoint back into {name: ndarray}."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(CHECKPOINT_HEADER):
            raise NnError("unknown checkpoint version: %r" % header)
        out = {}
        for line in fh:
            parts = line.split()
            if len(parts) < 2:
                raise NnError("truncated checkpoint line: %r" % line)
            name, shape_tok = parts[0], parts[1]
            shape = () if shape_tok == "scalar" else tuple(int(s) for s in shape_tok.split("x"))
            vals = np.array([float(v) for v in parts[2:]])
            expected = int(np.prod(shape)) if shape else 1
            if vals.size != expected:
                raise NnError("checkpoint entry %r has wrong value count" % name)
            out[name] = vals.reshape(shape)
    return out
