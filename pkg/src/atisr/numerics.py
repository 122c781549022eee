"""Dense tensors with reverse-mode autodiff, plus the Adam optimizer.

Operations are recorded on the active :class:`Tape` whenever at least one
input requires a gradient.  Records are appended in evaluation order, so the
tape is already a topological order and the backward pass is a single
reverse sweep.

The recurrent kernels (:func:`lstm_scan`, :func:`lstm_cell`) are single tape
nodes with hand-written adjoints; everything else is assembled from small
primitives.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, OptimizerError, UsageError

DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox (counter-based) generator used for all randomness."""
    return np.random.Generator(np.random.Philox(int(seed)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations evaluated inside it are recorded.
    ``backward`` may be called repeatedly on the same tape and always
    produces the same gradients (leaf ``.grad`` is overwritten, not summed).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss: Tensor) -> list[Tensor]:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None:
            raise UsageError("loss was not produced under an active tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            if isinstance(node.out, tuple):
                gs = [grads.pop(id(o), None) for o in node.out]
                if all(g is None for g in gs):
                    continue
                pgrads = node.backward(gs)
            else:
                g = grads.pop(id(node.out), None)
                if g is None:
                    continue
                pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p._node is None:
                    leaves[key] = p
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        return list(leaves.values())


_TAPES: list[Tape] = []


@contextlib.contextmanager
def no_grad():
    """Temporarily stop recording (inference)."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def backward(loss: Tensor) -> list[Tensor]:
    """Backpropagate ``loss`` through the tape that recorded it."""
    if loss._node is None:
        raise UsageError("loss was not produced under an active tape")
    return loss._node[0].backward(loss)


def _record(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        tape = _TAPES[-1]
        out.requires_grad = True
        node = _Node(out, tuple(parents), fn)
        tape.nodes.append(node)
        out._node = (tape, node)
    return out


def _record_multi(datas: Sequence[np.ndarray], parents: Sequence[Tensor], fn: Callable) -> list[Tensor]:
    """Record one node with several outputs; ``fn`` receives a list of output
    gradients with ``None`` for outputs that received none."""
    outs = [Tensor(d) for d in datas]
    if _TAPES and any(p.requires_grad for p in parents):
        tape = _TAPES[-1]
        node = _Node(tuple(outs), tuple(parents), fn)
        tape.nodes.append(node)
        for o in outs:
            o.requires_grad = True
            o._node = (tape, node)
    return outs


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where the floor binds."""
    xd = x.data
    if floor > 0:
        clipped = np.maximum(xd, floor)
        live = xd > floor
    else:
        clipped = xd
        live = np.ones(xd.shape, dtype=bool)
    y = np.log(clipped)
    return _record(y, (x,), lambda g: (np.where(live, g / clipped, 0.0),))


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of shape (k, n).

    A batched right operand (B, k, n) is accepted when ``a`` is (B, m, k).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    if bd.ndim == 2:
        def fn(g):
            ga = np.matmul(g, bd.T)
            a2 = ad.reshape(-1, ad.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
            raise DimensionError(f"batched matmul shape mismatch: {a.shape} @ {b.shape}")

        def fn(g):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            return ga, gb
    return _record(out, (a, b), fn)


def softmax(x, axis: int = -1, mask_add: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``mask_add`` is a constant added to the logits."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax of an empty tensor")
    z = x.data if mask_add is None else x.data + mask_add
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), fn)


# ----------------------------------------------------------------------------
# shape manipulation


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    scatter = _needs_add_at(idx)

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        if scatter:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _record(x.data[idx], (x,), fn)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([x.data for x in xs], axis=axis), xs, fn)


def unstack(x: Tensor) -> list[Tensor]:
    """Split along axis 0 into views, as a single tape node."""
    shape = x.shape

    def fn(gs):
        out = np.empty(shape, dtype=DTYPE)
        for i, g in enumerate(gs):
            out[i] = 0.0 if g is None else g
        return (out,)

    return _record_multi(list(x.data), (x,), fn)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis)), (x,), fn)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tensor_sum(mul(a, b))


# ----------------------------------------------------------------------------
# gathers


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids, g)
        return (out,)

    return _record(table.data[ids], (table,), fn)


def pick(x: Tensor, ids: np.ndarray) -> Tensor:
    """``x[..., ids]`` elementwise along the last axis (probability of the target)."""
    ids = np.asarray(ids, dtype=np.int64)
    sel = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(out, ids[..., None], g[..., None], axis=-1)
        return (out,)

    return _record(sel, (x,), fn)


def take_time(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-column time permutation of a (T, B, F) tensor: ``out[t, b] = x[idx[t, b], b]``."""
    idx = np.asarray(idx, dtype=np.int64)
    cols = np.broadcast_to(np.arange(x.shape[1]), idx.shape)
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, (idx, cols), g)
        return (out,)

    return _record(x.data[idx, cols], (x,), fn)


def gather_steps(x: Tensor, steps: np.ndarray) -> Tensor:
    """``out[..., b] = x[b, steps[..., b]]`` for ``x`` of shape (B, N, ...).

    ``steps`` is (B,) or (T, B); the result is (B, ...) or (T, B, ...).
    """
    steps = np.asarray(steps, dtype=np.int64)
    rows = np.broadcast_to(np.arange(x.shape[0]), steps.shape)
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, (rows, steps), g)
        return (out,)

    return _record(x.data[rows, steps], (x,), fn)


# ----------------------------------------------------------------------------
# recurrent kernels (gate order: input, forget, cell, output)


def _gate_affine(H):
    """Per-gate constants so one tanh yields all four gates.

    sigmoid(z) = 0.5 * tanh(0.5 * z) + 0.5; the cell-input gate is plain tanh.
    """
    scale = np.full(4 * H, 0.5)
    scale[2 * H:3 * H] = 1.0
    shift = np.full(4 * H, 0.5)
    shift[2 * H:3 * H] = 0.0
    return scale, shift


def _lstm_forward(xs, h0, c0, W, b):
    T, B, I = xs.shape
    H = h0.shape[-1]
    Wx, Wh = W[:I], W[I:]
    scale, shift = _gate_affine(H)
    # pre-scaled input contribution, so each step needs a single tanh
    zx = (xs.reshape(T * B, I) @ (Wx * scale) + b * scale).reshape(T, B, 4 * H)
    Whs = Wh * scale
    gates = np.empty((T, B, 4 * H), dtype=DTYPE)
    out = np.empty((T, B, 2 * H), dtype=DTYPE)
    tanh_c = np.empty((T, B, H), dtype=DTYPE)
    h, c = h0, c0
    for t in range(T):
        gt = gates[t]
        np.matmul(h, Whs, out=gt)
        gt += zx[t]
        np.tanh(gt, out=gt)
        gt *= scale
        gt += shift
        i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        c = f * c + i * g
        tc = np.tanh(c, out=tanh_c[t])
        h = o * tc
        out[t, :, :H] = h
        out[t, :, H:] = c
    return out, (gates, tanh_c)


def _lstm_backward(G, xs, h0, c0, W, out, cache):
    gates, tanh_c = cache
    T, B, I = xs.shape
    H = h0.shape[-1]
    Wx, Wh = W[:I], W[I:]
    # d(gate)/d(pre-activation): i*(1-i) for sigmoid gates, 1-g^2 for the cell input
    dact = gates * (1.0 - gates)
    g = gates[:, :, 2 * H:3 * H]
    dact[:, :, 2 * H:3 * H] = 1.0 - g * g
    dzx = np.empty((T, B, 4 * H), dtype=DTYPE)
    dh_next = np.zeros((B, H), dtype=DTYPE)
    dc_next = np.zeros((B, H), dtype=DTYPE)
    WhT = np.ascontiguousarray(Wh.T)
    for t in range(T - 1, -1, -1):
        gt = gates[t]
        tc = tanh_c[t]
        c_prev = out[t - 1, :, H:] if t > 0 else c0
        dh = G[t, :, :H] + dh_next
        dc = G[t, :, H:] + dc_next
        dc += dh * gt[:, 3 * H:] * (1.0 - tc * tc)
        dz = dzx[t]
        dz[:, :H] = dc * gt[:, 2 * H:3 * H]
        dz[:, H:2 * H] = dc * c_prev
        dz[:, 2 * H:3 * H] = dc * gt[:, :H]
        dz[:, 3 * H:] = dh * tc
        dz *= dact[t]
        dh_next = dz @ WhT
        dc_next = dc * gt[:, H:2 * H]
    flat = dzx.reshape(T * B, 4 * H)
    h_prev = np.concatenate([h0[None], out[:-1, :, :H]], axis=0).reshape(T * B, H)
    dWx = xs.reshape(T * B, I).T @ flat
    dWh = h_prev.T @ flat
    db = flat.sum(axis=0)
    dxs = (flat @ Wx.T).reshape(T, B, I)
    return dxs, dh_next, dc_next, np.concatenate([dWx, dWh], axis=0), db


def _c(a):
    return np.ascontiguousarray(a, dtype=DTYPE)


def lstm_scan(xs: Tensor, h0: Tensor, c0: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Run an LSTM over time-major inputs ``xs`` (T, B, I).

    ``W`` has shape (I + H, 4H).  Returns (T, B, 2H) holding ``[h_t, c_t]``
    at every step, so the final carry is ``out[-1]``.
    """
    xs, h0, c0 = as_tensor(xs), as_tensor(h0), as_tensor(c0)
    if xs.ndim != 3:
        raise DimensionError(f"lstm_scan expects (T, B, I) input, got {xs.shape}")
    I = xs.shape[2]
    H = h0.shape[-1]
    if W.shape != (I + H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(f"lstm weights {W.shape}/{b.shape} do not fit input {I}, hidden {H}")
    xd, hd, cd, Wd = _c(xs.data), _c(h0.data), _c(c0.data), _c(W.data)
    out, gates = _lstm_forward(xd, hd, cd, Wd, _c(b.data))
    return _record(out, (xs, h0, c0, W, b),
                   lambda g: _lstm_backward(_c(g), xd, hd, cd, Wd, out, gates))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """One LSTM step on (B, I) input; returns (B, 2H) = ``[h', c']``."""
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    xs, hd, cd, Wd = _c(x.data[None]), _c(h.data), _c(c.data), _c(W.data)
    out, gates = _lstm_forward(xs, hd, cd, Wd, _c(b.data))

    def fn(g):
        dxs, dh, dc, dW, db = _lstm_backward(_c(g[None]), xs, hd, cd, Wd, out, gates)
        return dxs[0], dh, dc, dW, db

    return _record(out[0], (x, h, c, W, b), fn)


# ----------------------------------------------------------------------------
# optimization


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """Bias-corrected adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, (p, g) in enumerate(zip(self.params, grads)):
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict | None,
              lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, names: Sequence[str] | None = None):
    """Functional Adam update.  Returns ``(new_params, new_state)``; inputs are not mutated."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name}")
    if state is None:
        state = {"t": 0, "m": [np.zeros(np.shape(p)) for p in params],
                 "v": [np.zeros(np.shape(p)) for p in params]}
    t = state["t"] + 1
    m = [beta1 * mk + (1 - beta1) * g for mk, g in zip(state["m"], grads)]
    v = [beta2 * vk + (1 - beta2) * g * g for vk, g in zip(state["v"], grads)]
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    new = [p - lr * (mk / c1) / (np.sqrt(vk / c2) + eps) for p, mk, vk in zip(params, m, v)]
    return new, {"t": t, "m": m, "v": v}


def numerical_grad(f: Callable[[], float], x: np.ndarray, index, h: float = 1e-5) -> float:
    """Central finite difference of scalar ``f`` with respect to ``x[index]``."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)
