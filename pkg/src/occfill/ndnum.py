"""Numeric core: labelled random streams, dense layers with hand-written
reverse-mode gradients, SGD stepping, and a finite-difference gradient checker.

Everything is float64 numpy. Values crossing a public boundary are checked
finite, so NaN or inf surfaces as an error at the operation that produced it
instead of three modules later.

Random streams are split by label, not by call order: a child stream's key is
a hash of the parent key and the label string, so inserting a new consumer in
the pipeline never shifts what existing consumers draw.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import PreconditionError, ShapeMismatchError

PROB_EPS = 1e-7

ACTIVATIONS = ("identity", "relu", "sigmoid")


def tensor(data, shape=None):
    """Build a float64 array, optionally reshaping row-major, and verify it is finite."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise PreconditionError(f"tensor dims must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeMismatchError("tensor data length", arr.size, np.prod(shape))
        arr = arr.reshape(shape)
    check_finite(arr, "tensor")
    return arr


def check_finite(arr, context):
    if not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{context}: non-finite value encountered")
    return arr


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def clamp_prob(p):
    """Clamp probabilities away from 0 and 1 so logs stay finite."""
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


class Rng:
    """Deterministic counter-based random stream with labelled splitting.

    Identical seed and call sequence give bit-identical draws. `split`
    derives an independent child stream from a text label; two children of
    the same parent with different labels never share output.
    """

    def __init__(self, seed, _key=None):
        self.seed = int(seed)
        if self.seed < 0:
            raise PreconditionError("seed must be non-negative")
        if _key is None:
            _key = hashlib.sha256(b"occfill:" + self.seed.to_bytes(16, "little")).digest()
        self._key = _key
        philox_key = np.frombuffer(_key[:16], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=philox_key))

    def split(self, label):
        """Child stream fully determined by (parent key, label)."""
        if not label:
            raise PreconditionError("split label must be non-empty")
        child = hashlib.sha256(self._key + b"/" + label.encode("utf-8")).digest()
        return Rng(self.seed, _key=child)

    # Draw helpers delegate to the underlying generator.

    def normal(self, shape=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc=loc, scale=scale, size=shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape=None):
        return self._gen.random(size=shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def choice(self, n, size=None, replace=True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self._gen.permutation(n)


class DenseLayer:
    """Fully connected layer with a cached forward pass for backprop.

    Weights have shape (out_dim, in_dim). `forward` accepts a single vector
    (in_dim,) or a column batch (in_dim, n) and caches input and
    pre-activation; `backward` replays the cache to produce parameter and
    input gradients.
    """

    def __init__(self, weights, bias, activation="identity"):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2:
            raise PreconditionError(f"weights must be 2-d, got {weights.ndim}-d")
        if bias.ndim != 1 or bias.shape[0] != weights.shape[0]:
            raise ShapeMismatchError("bias", bias, (weights.shape[0],))
        if activation not in ACTIVATIONS:
            raise PreconditionError(f"unknown activation {activation!r}")
        check_finite(weights, "dense weights")
        check_finite(bias, "dense bias")
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self._cache = None

    @classmethod
    def init(cls, in_dim, out_dim, rng, activation="identity", scale=None):
        """Random small-weight initialization; scale defaults to 1/sqrt(in_dim)."""
        if scale is None:
            scale = 1.0 / np.sqrt(in_dim)
        w = rng.normal((out_dim, in_dim)) * scale
        b = np.zeros(out_dim)
        return cls(w, b, activation)

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != self.in_dim:
            raise ShapeMismatchError("dense input", x, (self.in_dim, -1))
        z = self.weights @ x + self.bias[:, None]
        if self.activation == "relu":
            a = relu(z)
        elif self.activation == "sigmoid":
            a = sigmoid(z)
        else:
            a = z
        self._cache = (x, z)
        check_finite(a, "dense output")
        return a[:, 0] if single else a

    def backward(self, upstream):
        """Gradients for the most recent forward; returns ((dW, db), dx)."""
        if self._cache is None:
            raise PreconditionError("backward called before forward")
        x, z = self._cache
        up = np.asarray(upstream, dtype=np.float64)
        single = up.ndim == 1
        if single:
            up = up[:, None]
        if up.shape != (self.out_dim, x.shape[1]):
            raise ShapeMismatchError("upstream gradient", up, (self.out_dim, x.shape[1]))
        if self.activation == "relu":
            dz = up * (z > 0)
        elif self.activation == "sigmoid":
            s = sigmoid(z)
            dz = up * s * (1.0 - s)
        else:
            dz = up
        dw = dz @ x.T
        db = dz.sum(axis=1)
        dx = self.weights.T @ dz
        if single:
            dx = dx[:, 0]
        return (dw, db), dx

    def params(self):
        return [self.weights, self.bias]

    def set_params(self, params):
        w, b = params
        if w.shape != self.weights.shape:
            raise ShapeMismatchError("weights", w, self.weights)
        if b.shape != self.bias.shape:
            raise ShapeMismatchError("bias", b, self.bias)
        self.weights = np.asarray(w, dtype=np.float64)
        self.bias = np.asarray(b, dtype=np.float64)


def dense_forward(layer, x):
    """Apply `layer` to `x`: activation(weights @ x + bias)."""
    return layer.forward(x)


def dense_backward(layer, upstream):
    """Backprop `upstream` through the cached forward pass of `layer`."""
    return layer.backward(upstream)


class Network:
    """A plain stack of dense layers, enough for gradient checking and probes."""

    def __init__(self, layers):
        if not layers:
            raise PreconditionError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeMismatchError("layer chain", (nxt.in_dim,), (prev.out_dim,))
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, upstream):
        """Returns (per-layer (dW, db) list, gradient wrt network input)."""
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            grads[i], upstream = self.layers[i].backward(upstream)
        return grads, upstream

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def set_params(self, flat):
        it = iter(flat)
        for layer in self.layers:
            layer.set_params([next(it), next(it)])


def sgd_step(params, grads, rate, direction):
    """One SGD update on a parameter list.

    direction "ascend" moves along the gradient, "descend" against it. The
    update is computed as p + t and p - t with the identical product
    t = rate * g, so an ascend followed by a descend with the same inputs
    retraces the same floating-point operations.
    """
    if direction not in ("ascend", "descend"):
        raise PreconditionError(f"direction must be ascend or descend, got {direction!r}")
    if rate <= 0 or not np.isfinite(rate):
        raise PreconditionError(f"rate must be positive and finite, got {rate}")
    if len(params) != len(grads):
        raise PreconditionError(f"{len(params)} params but {len(grads)} grads")
    out = []
    for p, g in zip(params, grads):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatchError("sgd grad", g, p)
        t = rate * g
        stepped = p + t if direction == "ascend" else p - t
        check_finite(stepped, "sgd step")
        out.append(stepped)
    return out


def finite_diff_check(network, x, epsilon):
    """Max relative error between analytic and central-difference gradients.

    The scalar loss is the sum of the network outputs. Every parameter entry
    is perturbed by +/- epsilon; the relative error of a pair (a, n) is
    |a - n| / max(|a|, |n|, 1e-12) and the maximum over all entries is
    returned.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise PreconditionError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    x = np.asarray(x, dtype=np.float64)

    out = network.forward(x)
    layer_grads, _ = network.backward(np.ones_like(out))
    analytic = []
    for dw, db in layer_grads:
        analytic.extend([dw, db])

    worst = 0.0
    params = network.params()
    for arr, grad in zip(params, analytic):
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = network.forward(x).sum()
            flat[i] = orig - epsilon
            lo = network.forward(x).sum()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            denom = max(abs(gflat[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    # restore caches to a consistent state for any later backward call
    network.forward(x)
    return worst
