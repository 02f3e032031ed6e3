"""Small feed-forward networks with hand-written gradients.

An :class:`Mlp` is a trunk of ``Linear -> [norm] -> activation`` blocks
followed by one or more linear heads, each with its own output transform.
Inputs are row-major batches ``(B, in_dim)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
NORMS = ("none", "batch_norm", "layer_norm")
HEADS = ("scalar_tanh", "vector_tanh", "softmax", "probability_simplex", "identity")
LEAK = 0.01
NORM_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"HZMLP"
CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    """Backward called with activations from before a parameter update."""


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z > 0, z, LEAK * z)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(kind, z, a):
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "leaky_relu":
        return np.where(z > 0, 1.0, LEAK)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _head(kind, z):
    if kind in ("scalar_tanh", "vector_tanh"):
        return np.tanh(z)
    if kind == "softmax":
        return _softmax(z)
    if kind == "probability_simplex":
        s = np.logaddexp(0.0, z) + PROB_FLOOR
        return s / s.sum(axis=1, keepdims=True)
    return z


def _head_backward(kind, z, out, g):
    if kind in ("scalar_tanh", "vector_tanh"):
        return g * (1.0 - out * out)
    if kind == "softmax":
        return out * (g - (out * g).sum(axis=1, keepdims=True))
    if kind == "probability_simplex":
        s = np.logaddexp(0.0, z) + PROB_FLOOR
        total = s.sum(axis=1, keepdims=True)
        ds = (g - (out * g).sum(axis=1, keepdims=True)) / total
        return ds / (1.0 + np.exp(-z))
    return g


@dataclass
class Cache:
    x: np.ndarray
    blocks: list
    heads: dict
    version: int


class Mlp:
    """Feed-forward trunk with named heads.

    ``heads`` is a sequence of ``(name, kind, size)``; ``scalar_tanh`` heads
    have size 1.
    """

    def __init__(self, in_dim, hidden, heads, activation="relu", norm="none", seed=0):
        from .rng import make_rng

        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if norm not in NORMS:
            raise ValueError(f"unknown norm {norm!r}")
        heads = [(str(n), str(k), int(s)) for n, k, s in heads]
        for name, kind, size in heads:
            if kind not in HEADS:
                raise ValueError(f"unknown head {kind!r}")
            if kind == "scalar_tanh" and size != 1:
                raise ValueError("scalar_tanh heads have size 1")
        self.in_dim = int(in_dim)
        self.hidden = [int(h) for h in hidden]
        self.head_spec = heads
        self.activation = activation
        self.norm = norm
        self.version = 0
        self._fast = None
        rng = make_rng(seed)
        gain = 6.0 if activation in ("relu", "leaky_relu") else 3.0
        self.blocks = []
        fan_in = self.in_dim
        for width in self.hidden:
            bound = np.sqrt(gain / fan_in)
            blk = {"W": rng.uniform(-bound, bound, (fan_in, width)), "b": np.zeros(width)}
            if norm != "none":
                blk["gamma"] = np.ones(width)
                blk["beta"] = np.zeros(width)
            if norm == "batch_norm":
                blk["running_mean"] = np.zeros(width)
                blk["running_var"] = np.ones(width)
            self.blocks.append(blk)
            fan_in = width
        self.heads = {}
        for name, kind, size in heads:
            bound = np.sqrt(3.0 / fan_in)
            self.heads[name] = {"W": rng.uniform(-bound, bound, (fan_in, size)), "b": np.zeros(size), "kind": kind}

    # -- parameters -------------------------------------------------------
    def params(self) -> list:
        out = []
        for blk in self.blocks:
            out += [blk["W"], blk["b"]]
            if self.norm != "none":
                out += [blk["gamma"], blk["beta"]]
        for name, _, _ in self.head_spec:
            out += [self.heads[name]["W"], self.heads[name]["b"]]
        return out

    def running_stats(self) -> list:
        if self.norm != "batch_norm":
            return []
        return [a for blk in self.blocks for a in (blk["running_mean"], blk["running_var"])]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> Mlp:
        return load_bytes(save_bytes(self))

    def zero_(self) -> Mlp:
        for p in self.params():
            p[...] = 0.0
        if self.norm != "none":
            for blk in self.blocks:
                blk["gamma"][...] = 1.0
        self.version += 1
        return self

    # -- forward / backward --------------------------------------------------
    def forward(self, x, mode="eval", update_stats=True):
        """Head outputs as a dict; in train mode also return a :class:`Cache`."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[1]}")
        train = mode == "train"
        h = x
        records = []
        for blk in self.blocks:
            z = h @ blk["W"] + blk["b"]
            rec = {"h_in": h, "z": z}
            if self.norm == "batch_norm":
                if train:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_stats:
                        self.version += 1
                        blk["running_mean"] = BN_MOMENTUM * blk["running_mean"] + (1 - BN_MOMENTUM) * mu
                        blk["running_var"] = BN_MOMENTUM * blk["running_var"] + (1 - BN_MOMENTUM) * var
                else:
                    mu, var = blk["running_mean"], blk["running_var"]
                std = np.sqrt(var + NORM_EPS)
                xhat = (z - mu) / std
                rec.update(xhat=xhat, std=std)
                z = blk["gamma"] * xhat + blk["beta"]
            elif self.norm == "layer_norm":
                mu = z.mean(axis=1, keepdims=True)
                std = np.sqrt(z.var(axis=1, keepdims=True) + NORM_EPS)
                xhat = (z - mu) / std
                rec.update(xhat=xhat, std=std)
                z = blk["gamma"] * xhat + blk["beta"]
            rec["pre"] = z
            h = _act(self.activation, z)
            rec["a"] = h
            records.append(rec)
        outs = {}
        head_cache = {}
        for name, kind, _ in self.head_spec:
            hd = self.heads[name]
            z = h @ hd["W"] + hd["b"]
            outs[name] = _head(kind, z)
            head_cache[name] = z
        if train:
            return outs, Cache(x, records, {"h": h, "z": head_cache, "out": outs}, self.version)
        return outs

    def infer(self, x):
        """Eval-mode head outputs from a cached float32 copy with batch norm folded into the weights.

        Meant for the many one-row queries made during search; agrees with
        ``forward(x)`` to single precision.
        """
        if self._fast is None or self._fast[0] != self.version:
            self._fast = (self.version, self._fold())
        layers, heads = self._fast[1]
        h = np.atleast_2d(np.asarray(x, dtype=np.float32))
        for W, b, ln in layers:
            z = h @ W + b
            if ln is not None:
                mu = z.mean(axis=1, keepdims=True)
                z = ln[0] * (z - mu) / np.sqrt(z.var(axis=1, keepdims=True) + NORM_EPS) + ln[1]
            h = _act(self.activation, z)
        return {name: _head(kind, (h @ W + b).astype(float)) for name, kind, W, b in heads}

    def _fold(self):
        f32 = np.float32
        layers = []
        for blk in self.blocks:
            W, b, ln = blk["W"], blk["b"], None
            if self.norm == "batch_norm":
                s = blk["gamma"] / np.sqrt(blk["running_var"] + NORM_EPS)
                W, b = W * s, (b - blk["running_mean"]) * s + blk["beta"]
            elif self.norm == "layer_norm":
                ln = (blk["gamma"].astype(f32), blk["beta"].astype(f32))
            layers.append((W.astype(f32), b.astype(f32), ln))
        heads = [(n, k, self.heads[n]["W"].astype(f32), self.heads[n]["b"].astype(f32)) for n, k, _ in self.head_spec]
        return layers, heads

    def backward(self, cache: Cache, grad_out: dict):
        """Parameter gradients (same order as :meth:`params`) and the input gradient."""
        if cache.version != self.version:
            raise StaleCacheError("parameters changed since this forward pass")
        h = cache.heads["h"]
        dh = np.zeros_like(h)
        head_grads = {}
        for name, kind, _ in self.head_spec:
            hd = self.heads[name]
            g = grad_out.get(name)
            if g is None:
                g = np.zeros_like(cache.heads["out"][name])
            dz = _head_backward(kind, cache.heads["z"][name], cache.heads["out"][name], np.asarray(g, dtype=float))
            head_grads[name] = (h.T @ dz, dz.sum(axis=0))
            dh += dz @ hd["W"].T
        block_grads = []
        for blk, rec in zip(reversed(self.blocks), reversed(cache.blocks)):
            dz = dh * _act_grad(self.activation, rec["pre"], rec["a"])
            grads = {}
            if self.norm != "none":
                xhat, std = rec["xhat"], rec["std"]
                grads["gamma"] = (dz * xhat).sum(axis=0)
                grads["beta"] = dz.sum(axis=0)
                dxhat = dz * blk["gamma"]
                if self.norm == "batch_norm":
                    n = dxhat.shape[0]
                    dz = (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)) / (n * std)
                else:
                    d = dxhat.shape[1]
                    dz = (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)) / (d * std)
            grads["W"] = rec["h_in"].T @ dz
            grads["b"] = dz.sum(axis=0)
            dh = dz @ blk["W"].T
            block_grads.append(grads)
        block_grads.reverse()
        out = []
        for g in block_grads:
            out += [g["W"], g["b"]]
            if self.norm != "none":
                out += [g["gamma"], g["beta"]]
        for name, _, _ in self.head_spec:
            out += list(head_grads[name])
        return out, dh

    def __call__(self, x):
        return self.forward(x, "eval")


# -- losses -----------------------------------------------------------------
# Each returns (scalar loss averaged over the batch, gradient w.r.t. the prediction).

def _check_support(a, b):
    if a.shape != b.shape:
        raise ValueError(f"support mismatch: {a.shape} vs {b.shape}")


def mse(pred, target):
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    _check_support(pred, target)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def cross_entropy(probs, target_dist):
    p, t = np.atleast_2d(np.asarray(probs, float)), np.atleast_2d(np.asarray(target_dist, float))
    _check_support(p, t)
    pc = np.maximum(p, PROB_FLOOR)
    loss = -np.sum(t * np.log(pc)) / p.shape[0]
    grad = np.where(p > PROB_FLOOR, -t / pc, 0.0) / p.shape[0]
    return float(loss), grad


def kl_divergence(pred_dist, empirical_dist, weights=None):
    """KL(empirical || predicted), optionally weighted per row (weights are normalised)."""
    p, q = np.atleast_2d(np.asarray(pred_dist, float)), np.atleast_2d(np.asarray(empirical_dist, float))
    _check_support(p, q)
    w = np.full(p.shape[0], 1.0 / p.shape[0]) if weights is None else np.asarray(weights, float) / np.sum(weights)
    pc = np.maximum(p, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(np.where(q > 0, q, 1.0)) - np.log(pc)), 0.0)
    loss = float(np.sum(w * terms.sum(axis=1)))
    grad = np.where(p > PROB_FLOOR, -q / pc, 0.0) * w[:, None]
    return loss, grad


def value_loss(z, v):
    """Squared error ``(z - v)**2`` averaged; gradient w.r.t. ``v``."""
    z, v = np.asarray(z, float), np.asarray(v, float)
    _check_support(z, v)
    diff = v - z
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def tree_policy_loss(visit_dist, policy_probs):
    """``-sum_a (N_sa/N_s) log pi(a|s)`` averaged over the batch; gradient w.r.t. ``policy_probs``."""
    return cross_entropy(policy_probs, visit_dist)


# -- optimiser -----------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list, grads: list, state: AdamState, net: Mlp | None = None):
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        # in-place arithmetic: these arrays are large and the step is memory bound
        tmp = np.multiply(g, 1 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        p -= tmp
    if net is not None:
        net.version += 1
    return params, state


# -- checkpoints -----------------------------------------------------------------
def save_bytes(net: Mlp) -> bytes:
    """Versioned header, layer dims, little-endian float64 parameters, running stats."""
    arch = json.dumps(
        {"activation": net.activation, "norm": net.norm, "heads": net.head_spec}, sort_keys=True
    ).encode()
    dims = [net.in_dim] + net.hidden
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(arch)),
        arch,
        struct.pack("<I", len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
    ]
    flat = np.concatenate([p.ravel() for p in net.params()]).astype("<f8")
    stats = net.running_stats()
    flat_stats = np.concatenate([s.ravel() for s in stats]).astype("<f8") if stats else np.zeros(0, "<f8")
    parts += [struct.pack("<Q", flat.size), flat.tobytes(), struct.pack("<Q", flat_stats.size), flat_stats.tobytes()]
    return b"".join(parts)


def load_bytes(data: bytes) -> Mlp:
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint")
    off = 5
    (version,) = struct.unpack_from("<I", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 4
    (alen,) = struct.unpack_from("<I", data, off)
    off += 4
    arch = json.loads(data[off:off + alen])
    off += alen
    (nd,) = struct.unpack_from("<I", data, off)
    off += 4
    dims = list(struct.unpack_from(f"<{nd}I", data, off))
    off += 4 * nd
    net = Mlp(dims[0], dims[1:], arch["heads"], arch["activation"], arch["norm"])
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    flat = np.frombuffer(data, "<f8", n, off).astype(float)
    off += 8 * n
    pos = 0
    for p in net.params():
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    (ns,) = struct.unpack_from("<Q", data, off)
    off += 8
    stats = np.frombuffer(data, "<f8", ns, off).astype(float)
    pos = 0
    for s in net.running_stats():
        s[...] = stats[pos:pos + s.size].reshape(s.shape)
        pos += s.size
    return net


def save(net: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_bytes(net))


def load(path) -> Mlp:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())


def finite_difference_check(net: Mlp, x, loss_fn, h: float = 1e-5, mode: str = "train", max_entries: int | None = None,
                            rng: np.random.Generator | None = None, zero_floor: float = 1e-8) -> float:
    """Largest per-parameter-array relative error between backprop and central differences.

    ``loss_fn(outputs) -> (loss, grad_dict)``. Only the forward pass is used
    for the numerical side, with running statistics frozen. Arrays whose
    analytic and numerical gradients both sit below ``zero_floor`` (the
    round-off level of a central difference) are exact zeros, e.g. biases
    feeding a batch norm, and have no meaningful relative error.
    """
    outs, cache = net.forward(x, mode, update_stats=False)
    _, g = loss_fn(outs)
    analytic, _ = net.backward(cache, g)
    worst = 0.0
    for p, ga in zip(net.params(), analytic):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        num = np.empty(idx.size)
        for t, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_fn(net.forward(x, mode, update_stats=False)[0] if mode == "train" else net.forward(x, mode))
            flat[i] = old - h
            lm, _ = loss_fn(net.forward(x, mode, update_stats=False)[0] if mode == "train" else net.forward(x, mode))
            flat[i] = old
            num[t] = (lp - lm) / (2 * h)
        a = ga.reshape(-1)[idx]
        denom = np.linalg.norm(a) + np.linalg.norm(num)
        if np.linalg.norm(a) > zero_floor or np.linalg.norm(num) > zero_floor:
            worst = max(worst, float(np.linalg.norm(a - num) / denom))
    return worst
