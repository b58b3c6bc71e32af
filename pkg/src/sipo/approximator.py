"""Small dense networks with exact reverse-mode gradients.

Everything is plain NumPy. A :class:`DenseNet` is evaluated on a single
vector or a batch (rows are samples); :meth:`DenseNet.backward` returns the
gradient of ``sum(upstream * output)`` with respect to every parameter.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


def orthogonal(rng, n_in, n_out, gain):
    """Orthogonal init as in common PPO implementations; shape (n_in, n_out)."""
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


@dataclass
class Gradients:
    weights: list
    biases: list

    def flat(self):
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def flat_list(self):
        """Arrays in the same order as :meth:`DenseNet.params`."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def scale(self, c):
        return Gradients([w * c for w in self.weights], [b * c for b in self.biases])

    def __add__(self, other):
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


@dataclass
class DenseNet:
    """Feed-forward net. ``activations`` has one tag per hidden layer; the
    output layer is always linear."""

    layer_sizes: list
    weights: list
    biases: list
    activations: list
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.weights) != len(self.layer_sizes) - 1:
            raise ShapeError("need one weight matrix per layer transition")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[k], self.layer_sizes[k + 1]):
                raise ShapeError(f"layer {k}: weight shape {w.shape} does not match sizes")
            if b.shape != (self.layer_sizes[k + 1],):
                raise ShapeError(f"layer {k}: bias shape {b.shape} does not match sizes")
        if len(self.activations) != len(self.layer_sizes) - 2:
            raise ShapeError("need one activation per hidden layer")
        for a in self.activations:
            if a not in _ACT_CODES:
                raise ValueError(f"unknown activation {a!r}")

    @classmethod
    def create(cls, layer_sizes, rng, activation="tanh", hidden_gain=np.sqrt(2.0), out_gain=1.0):
        sizes = list(layer_sizes)
        n = len(sizes) - 1
        weights = [
            orthogonal(rng, sizes[k], sizes[k + 1], out_gain if k == n - 1 else hidden_gain)
            for k in range(n)
        ]
        biases = [np.zeros(sizes[k + 1]) for k in range(n)]
        return cls(sizes, weights, biases, [activation] * (n - 1))

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self):
        return DenseNet(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def params(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} values, got {flat.size}")
        pos = 0
        for p in self.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.layer_sizes[0]:
            raise ShapeError(f"input width {h.shape[-1]} != {self.layer_sizes[0]}")
        pre, post = [], [h]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = _act(self.activations[k], z) if k < len(self.activations) else z
            pre.append(z)
            post.append(h)
        self._cache = (x, pre, post)
        return h[0] if single else h

    __call__ = forward

    def backward(self, x, upstream):
        """Gradients of ``sum(upstream * forward(x))``.

        Reuses the cached activations when the last forward pass was on ``x``.
        """
        x = np.asarray(x, dtype=np.float64)
        if self._cache is None or self._cache[0] is not x and not np.array_equal(self._cache[0], x):
            self.forward(x)
        _, pre, post = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != post[-1].shape:
            raise ShapeError(f"upstream shape {g.shape} != output shape {post[-1].shape}")
        n = len(self.weights)
        gw, gb = [None] * n, [None] * n
        for k in range(n - 1, -1, -1):
            if k < len(self.activations):
                g = g * _act_grad(self.activations[k], pre[k], post[k + 1])
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient at layer {k}")
            gw[k] = post[k].T @ g
            gb[k] = g.sum(axis=0)
            if k > 0:
                g = g @ self.weights[k].T
        return Gradients(gw, gb)

    def apply(self, grads, step):
        for w, b, gw, gb in zip(self.weights, self.biases, grads.weights, grads.biases):
            w += step * gw
            b += step * gb

    def clip_(self, bound):
        for p in self.params():
            np.clip(p, -bound, bound, out=p)

    def all_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params())


class Adam:
    """Adam over an arbitrary list of parameter arrays (updated in place)."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-5, max_grad_norm=None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        """Descend along ``grads`` (same order as ``params``)."""
        grads = list(grads)
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / (norm + 1e-12)) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- heads


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def categorical_entropy(logits):
    lp = log_softmax(logits)
    return -(np.exp(lp) * lp).sum(axis=-1)


@dataclass
class CategoricalHead:
    logits: np.ndarray

    def probs(self):
        return softmax(self.logits)

    def entropy(self):
        return categorical_entropy(self.logits)


def sample_action(head, rng):
    """Draw an action index; returns ``(action, log_prob)``."""
    logits = np.asarray(head.logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits")
    lp = log_softmax(logits)
    a = int(rng.choice(len(lp), p=np.exp(lp)))
    return a, float(lp[a])


def sample_categorical_batch(logits, rng):
    """Vectorised sampling for a (batch, n_actions) logit matrix."""
    lp = log_softmax(logits)
    cdf = np.cumsum(np.exp(lp), axis=1)
    u = rng.random(len(lp))[:, None]
    a = np.minimum((u > cdf).sum(axis=1), lp.shape[1] - 1)
    return a, lp[np.arange(len(a)), a]


LOG_2PI = np.log(2.0 * np.pi)


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def gaussian_entropy(log_std):
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DNET"
_VERSION = 1


def dumps(net):
    """Serialise a net: header, layer shapes, then row-major float64 values."""
    buf = io.BytesIO()
    n = len(net.layer_sizes)
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, n))
    buf.write(struct.pack(f"<{n}I", *net.layer_sizes))
    buf.write(struct.pack(f"<{n - 2}B", *[_ACT_CODES[a] for a in net.activations]))
    for w, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data):
    if data[:4] != _MAGIC:
        raise ValueError("not a DenseNet checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    sizes = list(struct.unpack_from(f"<{n}I", data, pos))
    pos += 4 * n
    acts = [ACTIVATIONS[c] for c in struct.unpack_from(f"<{n - 2}B", data, pos)]
    pos += n - 2
    weights, biases = [], []
    for k in range(n - 1):
        cnt = sizes[k] * sizes[k + 1]
        weights.append(np.frombuffer(data, "<f8", cnt, pos).reshape(sizes[k], sizes[k + 1]).astype(np.float64))
        pos += 8 * cnt
        biases.append(np.frombuffer(data, "<f8", sizes[k + 1], pos).astype(np.float64))
        pos += 8 * sizes[k + 1]
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return DenseNet(sizes, weights, biases, acts)


def save(net, path):
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, dumps(net))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
