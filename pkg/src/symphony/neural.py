"""Minimal reverse-mode autodiff over numpy arrays, MLPs, Adam, checkpoints.

Float64 throughout. Forward passes used inside rollouts have plain numpy
fast paths; gradients are only taped where an update needs them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class Tensor:
    """Node in a recorded computation; value plus backward closure."""

    __slots__ = ("value", "grad", "parents", "bw")

    def __init__(self, value, parents=(), bw=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.bw = bw

    @property
    def shape(self):
        return self.value.shape


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(parent, grad):
    if not isinstance(parent, Tensor):
        return
    grad = _unbroadcast(np.asarray(grad, dtype=float), parent.value.shape)
    parent.grad = grad if parent.grad is None else parent.grad + grad


def _topo(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Tensor) and id(p) not in seen:
                stack.append((p, False))
    return order


def run_backward(root: Tensor, upstream=None):
    """Reverse-mode sweep from root; leaves end up holding their gradients."""
    order = _topo(root)
    for node in order:
        node.grad = None
    root.grad = (np.ones_like(root.value) if upstream is None
                 else np.broadcast_to(np.asarray(upstream, dtype=float), root.value.shape).copy())
    for node in reversed(order):
        if node.bw is not None and node.grad is not None:
            node.bw(node.grad)


# ---------------------------------------------------------------- basic ops

def add(a, b):
    out = Tensor(_val(a) + _val(b), (a, b))
    out.bw = lambda g: (_accum(a, g), _accum(b, g))
    return out


def sub(a, b):
    out = Tensor(_val(a) - _val(b), (a, b))
    out.bw = lambda g: (_accum(a, g), _accum(b, -g))
    return out


def mul(a, b):
    va, vb = _val(a), _val(b)
    out = Tensor(va * vb, (a, b))
    out.bw = lambda g: (_accum(a, g * vb), _accum(b, g * va))
    return out


def neg(a):
    out = Tensor(-_val(a), (a,))
    out.bw = lambda g: _accum(a, -g)
    return out


def scale(a, k: float):
    out = Tensor(_val(a) * k, (a,))
    out.bw = lambda g: _accum(a, g * k)
    return out


def matmul(x, w):
    vx, vw = _val(x), _val(w)
    out = Tensor(vx @ vw, (x, w))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = vx.reshape(-1, vx.shape[-1])
        _accum(x, (g @ vw.T).reshape(vx.shape))
        _accum(w, x2.T @ g2)

    out.bw = bw
    return out


def relu(a):
    va = _val(a)
    out = Tensor(np.maximum(va, 0.0), (a,))
    out.bw = lambda g: _accum(a, g * (va > 0.0))
    return out


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-_val(a)))
    out = Tensor(s, (a,))
    out.bw = lambda g: _accum(a, g * s * (1.0 - s))
    return out


def log(a):
    va = _val(a)
    out = Tensor(np.log(va), (a,))
    out.bw = lambda g: _accum(a, g / va)
    return out


def sin(a):
    va = _val(a)
    out = Tensor(np.sin(va), (a,))
    out.bw = lambda g: _accum(a, g * np.cos(va))
    return out


def cos(a):
    va = _val(a)
    out = Tensor(np.cos(va), (a,))
    out.bw = lambda g: _accum(a, -g * np.sin(va))
    return out


def arctan2(y, x):
    vy, vx = _val(y), _val(x)
    r2 = vx * vx + vy * vy
    out = Tensor(np.arctan2(vy, vx), (y, x))
    out.bw = lambda g: (_accum(y, g * vx / r2), _accum(x, -g * vy / r2))
    return out


def hypot(x, y, eps: float = 1e-18):
    """sqrt(x^2 + y^2 + eps); eps keeps the gradient finite at the origin."""
    vx, vy = _val(x), _val(y)
    r = np.sqrt(vx * vx + vy * vy + eps)
    out = Tensor(r, (x, y))
    out.bw = lambda g: (_accum(x, g * vx / r), _accum(y, g * vy / r))
    return out


def clip(a, lo: float, hi: float):
    va = _val(a)
    inside = (va > lo) & (va < hi)
    out = Tensor(np.clip(va, lo, hi), (a,))
    out.bw = lambda g: _accum(a, g * inside)
    return out


def where_mask(mask: np.ndarray, a, b):
    """Elementwise select with a constant boolean mask."""
    va, vb = _val(a), _val(b)
    out = Tensor(np.where(mask, va, vb), (a, b))
    out.bw = lambda g: (_accum(a, g * mask), _accum(b, g * (~mask)))
    return out


def concat(parts: list, axis: int = -1):
    vals = [_val(p) for p in parts]
    out = Tensor(np.concatenate(vals, axis=axis), tuple(parts))
    sizes = [v.shape[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(int(lo), int(hi))
            _accum(p, g[tuple(sl)])

    out.bw = bw
    return out


def stack(parts: list, axis: int):
    vals = [_val(p) for p in parts]
    out = Tensor(np.stack(vals, axis=axis), tuple(parts))

    def bw(g):
        slabs = np.moveaxis(g, axis, 0)
        for p, slab in zip(parts, slabs):
            _accum(p, slab)

    out.bw = bw
    return out


def reshape(a, shape):
    va = _val(a)
    out = Tensor(va.reshape(shape), (a,))
    out.bw = lambda g: _accum(a, g.reshape(va.shape))
    return out


def take_rows(a, idx: np.ndarray):
    """Gather along axis 0 with an integer index array of any shape."""
    va = _val(a)
    idx = np.asarray(idx)
    out = Tensor(va[idx], (a,))

    def bw(g):
        acc = np.zeros_like(va)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    out.bw = bw
    return out


def take_slots(a, idx: np.ndarray):
    """Gather along axis 1 with per-row indices of shape (R, K)."""
    va = _val(a)
    rows = np.arange(va.shape[0])[:, None]
    out = Tensor(va[rows, idx], (a,))

    def bw(g):
        acc = np.zeros_like(va)
        np.add.at(acc, (rows, idx), g)
        _accum(a, acc)

    out.bw = bw
    return out


def sum_(a, axis=None, keepdims=False):
    va = _val(a)
    out = Tensor(va.sum(axis=axis, keepdims=keepdims), (a,))

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, va.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, va.shape).copy())

    out.bw = bw
    return out


def mean_(a, axis=None, keepdims=False):
    va = _val(a)
    count = va.size if axis is None else va.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def masked_max(a, mask: np.ndarray):
    """Max over axis 1 of (R, S, D) with a boolean (R, S) validity mask.

    Rows with no valid entry pool to the zero vector. The gradient is routed
    to the argmax contributor of each output element.
    """
    va = _val(a)
    R, S, D = va.shape
    if S == 0:
        out = Tensor(np.zeros((R, D)), (a,))
        out.bw = lambda g: _accum(a, np.zeros_like(va))
        return out
    any_valid = mask.any(axis=1)
    masked = np.where(mask[:, :, None], va, -np.inf)
    arg = np.argmax(masked, axis=1)
    rows = np.arange(R)[:, None]
    cols = np.arange(D)[None, :]
    pooled = np.where(any_valid[:, None], masked[rows, arg, cols], 0.0)
    out = Tensor(pooled, (a,))

    def bw(g):
        acc = np.zeros_like(va)
        g_eff = g * any_valid[:, None]
        np.add.at(acc, (rows, arg, cols), g_eff)
        _accum(a, acc)

    out.bw = bw
    return out


# ---------------------------------------------------------- fused loss ops

def _masked_softmax(logits: np.ndarray, mask: np.ndarray | None):
    z = logits - logits.max(axis=-1, keepdims=True) if mask is None else None
    if mask is not None:
        neg = np.where(mask, logits, -np.inf)
        z = neg - neg.max(axis=-1, keepdims=True)
        e = np.exp(z, where=np.isfinite(z), out=np.zeros_like(z))
    else:
        e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_probs(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Numerically stable softmax with an optional feasibility mask."""
    return _masked_softmax(np.asarray(logits, dtype=float), mask)


def softmax_nll(logits: np.ndarray, label: int, mask: np.ndarray | None = None):
    """Negative log likelihood of one label; returns (loss, grad wrt logits)."""
    logits = np.asarray(logits, dtype=float)
    if not (0 <= label < logits.shape[-1]):
        raise ValueError(f"bad-label: {label} outside {logits.shape[-1]} classes")
    if mask is not None and not mask[label]:
        raise ValueError(f"bad-label: {label} is masked out")
    p = softmax_probs(logits[None, :], None if mask is None else mask[None, :])[0]
    loss = -np.log(p[label])
    grad = p.copy()
    grad[label] -= 1.0
    return float(loss), grad


def softmax_nll_mean(logits, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Taped mean NLL over rows of (R, C) logits with integer labels."""
    vl = _val(logits)
    labels = np.asarray(labels, dtype=int)
    if np.any(labels < 0) or np.any(labels >= vl.shape[-1]):
        raise ValueError("bad-label: label outside class range")
    p = softmax_probs(vl, mask)
    rows = np.arange(vl.shape[0])
    picked = p[rows, labels]
    if np.any(picked <= 0.0):
        raise ValueError("bad-label: label has zero probability under the mask")
    out = Tensor(np.mean(-np.log(picked)), (logits,))

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        _accum(logits, g * d / vl.shape[0])

    out.bw = bw
    return out


def bce_loss(prob: np.ndarray, target: float | np.ndarray, eps: float = 1e-6):
    """Binary cross entropy on probabilities clamped away from {0, 1}.

    Returns (mean loss, gradient wrt the unclamped probabilities).
    """
    p = np.clip(np.asarray(prob, dtype=float), eps, 1.0 - eps)
    t = np.broadcast_to(np.asarray(target, dtype=float), p.shape)
    loss = float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))
    inside = (prob > eps) & (prob < 1.0 - eps)
    grad = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) / p.size
    return loss, grad


def maxpool_set(embeddings, dim: int | None = None):
    """Elementwise max over a set of vectors; empty sets pool to zeros.

    Returns (pooled vector, argmax indices or None for the empty set).
    """
    arr = np.asarray(embeddings, dtype=float)
    if arr.size == 0:
        if dim is None:
            raise ValueError("shape-error: empty set needs an explicit dim")
        return np.zeros(dim), None
    if arr.ndim != 2:
        raise ValueError("shape-error: expected (set, dim) embeddings")
    arg = np.argmax(arr, axis=0)
    return arr[arg, np.arange(arr.shape[1])], arg


# ------------------------------------------------------------- parameters

class ParamStore:
    """Named float64 parameter arrays with deterministic initialisation."""

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        self.params: dict[str, np.ndarray] = {}
        self._seq = (seed if isinstance(seed, np.random.SeedSequence)
                     else np.random.SeedSequence(seed))
        self._created = 0

    def create(self, name: str, shape: tuple, init: str = "he", fan_in: int | None = None):
        if name in self.params:
            raise ValueError(f"shape-error: duplicate parameter {name}")
        child = np.random.SeedSequence(entropy=self._seq.entropy,
                                       spawn_key=self._seq.spawn_key + (self._created,))
        self._created += 1
        if init == "zeros":
            arr = np.zeros(shape)
        elif init == "he":
            rng = np.random.Generator(np.random.Philox(child))
            std = np.sqrt(2.0 / (fan_in if fan_in else shape[0]))
            arr = rng.normal(0.0, std, size=shape)
        else:
            raise ValueError(f"shape-error: unknown init {init}")
        self.params[name] = arr
        return arr

    def block(self, prefix: str) -> list[str]:
        return sorted(n for n in self.params if n.startswith(prefix))


class GradCtx:
    """Caches leaf tensors for parameters during one taped update."""

    def __init__(self, store: ParamStore):
        self.store = store
        self.leaves: dict[str, Tensor] = {}

    def leaf(self, name: str) -> Tensor:
        if name not in self.leaves:
            self.leaves[name] = Tensor(self.store.params[name])
        return self.leaves[name]

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for n, t in self.leaves.items()}


class Mlp:
    """Fully connected ReLU stack with a linear final layer."""

    def __init__(self, store: ParamStore, name: str, sizes: list[int],
                 zero_final: bool = False):
        self.store = store
        self.name = name
        self.sizes = list(sizes)
        self.layer_names = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            w_init = "zeros" if (zero_final and last) else "he"
            store.create(f"{name}/w{i}", (n_in, n_out), init=w_init, fan_in=n_in)
            store.create(f"{name}/b{i}", (n_out,), init="zeros")
            self.layer_names.append((f"{name}/w{i}", f"{name}/b{i}"))

    @property
    def n_layers(self) -> int:
        return len(self.layer_names)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        for i, (wn, bn) in enumerate(self.layer_names):
            w = self.store.params[wn]
            if h.shape[-1] != w.shape[0]:
                raise ValueError(
                    f"shape-error: {self.name} layer {i} expected {w.shape[0]}, got {h.shape[-1]}")
            h = h @ w
            h += self.store.params[bn]
            if i < self.n_layers - 1:
                np.maximum(h, 0.0, out=h)
        return h

    def forward_ad(self, x, ctx: GradCtx):
        h = x
        for i, (wn, bn) in enumerate(self.layer_names):
            w = self.store.params[wn]
            if _val(h).shape[-1] != w.shape[0]:
                raise ValueError(
                    f"shape-error: {self.name} layer {i} expected {w.shape[0]},"
                    f" got {_val(h).shape[-1]}")
            h = add(matmul(h, ctx.leaf(wn)), ctx.leaf(bn))
            if i < self.n_layers - 1:
                h = relu(h)
        return h


@dataclass
class Tape:
    """Recorded forward pass of one Mlp, ready for a backward sweep."""

    ctx: GradCtx
    x: Tensor
    y: Tensor
    mlp: Mlp


def forward(m: Mlp, x: np.ndarray):
    """Taped forward pass: returns (output array, tape)."""
    ctx = GradCtx(m.store)
    xt = Tensor(np.asarray(x, dtype=float))
    yt = m.forward_ad(xt, ctx)
    return yt.value, Tape(ctx, xt, yt, m)


def backward(tape: Tape, upstream: np.ndarray):
    """Exact reverse-mode gradients: ([(dW, db) per layer], dx)."""
    run_backward(tape.y, upstream)
    grads = tape.ctx.grads()
    per_layer = [(grads[wn], grads[bn]) for wn, bn in tape.mlp.layer_names]
    dx = tape.x.grad if tape.x.grad is not None else np.zeros_like(tape.x.value)
    return per_layer, dx


# -------------------------------------------------------------- optimiser

@dataclass
class OptimState:
    """Adam with bias correction; first/second moments keyed by param name."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        for name in sorted(grads):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise ValueError(f"nonfinite-grad: {name}")
            m = self.m.setdefault(name, np.zeros_like(params[name]))
            v = self.v.setdefault(name, np.zeros_like(params[name]))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def adam_step(opt: OptimState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One Adam update; mutates and returns the parameter dict."""
    return opt.step(params, grads)


# ------------------------------------------------------------- checkpoint

CHECKPOINT_SCHEMA = 1


def save_checkpoint(path, store: ParamStore, opts: dict[str, OptimState],
                    step: int, config: dict):
    arrays = {}
    for name in sorted(store.params):
        arrays[f"param/{name}"] = store.params[name]
    opt_meta = {}
    for oname in sorted(opts):
        opt = opts[oname]
        for pname in sorted(opt.m):
            arrays[f"opt/{oname}/m/{pname}"] = opt.m[pname]
            arrays[f"opt/{oname}/v/{pname}"] = opt.v[pname]
        opt_meta[oname] = {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1,
                           "beta2": opt.beta2, "eps": opt.eps}
    meta = {"schema": CHECKPOINT_SCHEMA, "step": int(step), "config": config,
            "optimisers": opt_meta}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (ParamStore, {name: OptimState}, step, config)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["schema"] != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported-schema: checkpoint schema {meta['schema']}")
        store = ParamStore()
        opts: dict[str, OptimState] = {}
        for oname, om in meta["optimisers"].items():
            opts[oname] = OptimState(lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"],
                                     eps=om["eps"], t=om["t"])
        for key in data.files:
            if key.startswith("param/"):
                store.params[key[len("param/"):]] = data[key].copy()
            elif key.startswith("opt/"):
                _, oname, kind, pname = key.split("/", 3)
                getattr(opts[oname], kind)[pname] = data[key].copy()
    return store, opts, meta["step"], meta["config"]
