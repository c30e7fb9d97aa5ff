"""Feed-forward channel-id approximator trained on labeled addresses.

Permutation-style channel hashes are non-linear, so when algebraic
cracking fails the fallback is to fit the mapping with a small
multi-layer perceptron over the binary expansion of the block-aligned
address.  Everything is plain numpy: forward pass, softmax
cross-entropy, backprop, mini-batch SGD.  Training is deterministic
given the seed.
"""

from __future__ import annotations

import numpy as np


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def encode_addresses(addrs, bit_lo: int, n_bits: int, dtype=np.float32):
    """Binary features: bits [bit_lo, bit_lo + n_bits) of each address."""
    a = np.asarray(addrs, dtype=np.uint64)
    shifts = np.arange(bit_lo, bit_lo + n_bits, dtype=np.uint64)
    return ((a[:, None] >> shifts[None, :]) & np.uint64(1)).astype(dtype)


class MlpApproximator:
    """ReLU network with softmax output over channel classes."""

    kind = "mlp"

    def __init__(self, layer_sizes, weights, biases, bit_lo, n_bits):
        self.layer_sizes = list(layer_sizes)
        self.weights = weights
        self.biases = biases
        self.bit_lo = bit_lo
        self.n_bits = n_bits
        if len(weights) != len(layer_sizes) - 1:
            raise ValueError("weight count does not match layer sizes")

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)

    def forward(self, x):
        """Class scores for a feature batch; deterministic."""
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = _relu(h @ w + b)
        return _softmax(h @ self.weights[-1] + self.biases[-1])

    def predict_features(self, x):
        return np.argmax(self.forward(x), axis=1)

    def predict(self, addr: int) -> int:
        x = encode_addresses([addr], self.bit_lo, self.n_bits)
        return int(self.predict_features(x)[0])

    def predict_many(self, addrs):
        x = encode_addresses(addrs, self.bit_lo, self.n_bits)
        return self.predict_features(x)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "version": 1,
            "layer_sizes": self.layer_sizes,
            "bit_lo": self.bit_lo,
            "n_bits": self.n_bits,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, d: dict) -> "MlpApproximator":
        return cls(
            d["layer_sizes"],
            [np.asarray(w, dtype=np.float32) for w in d["weights"]],
            [np.asarray(b, dtype=np.float32) for b in d["biases"]],
            d["bit_lo"],
            d["n_bits"],
        )


def _init_layers(layer_sizes, rng, dtype):
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, (fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return weights, biases


def _forward_cached(x, weights, biases):
    acts = [x]
    h = x
    for w, b in zip(weights[:-1], biases[:-1]):
        h = _relu(h @ w + b)
        acts.append(h)
    probs = _softmax(h @ weights[-1] + biases[-1])
    return acts, probs


def backprop(x, y_onehot, weights, biases):
    """Cross-entropy gradient for all layers of one batch."""
    acts, probs = _forward_cached(x, weights, biases)
    n = x.shape[0]
    delta = (probs - y_onehot) / n
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i:
            delta = delta @ weights[i].T
            delta[acts[i] <= 0] = 0.0
    return grads_w, grads_b


def cross_entropy(probs, y_idx):
    n = probs.shape[0]
    p = probs[np.arange(n), y_idx]
    return float(-np.log(np.clip(p, 1e-12, None)).mean())


def train(
    addrs,
    labels,
    num_classes,
    *,
    bit_lo,
    n_bits,
    hidden=(64,) * 7,
    epochs=150,
    lr=0.05,
    momentum=0.9,
    batch_size=128,
    holdout_fraction=0.2,
    seed=0,
    dtype=np.float32,
):
    """Fit the approximator; returns (model, held-out accuracy).

    The split is deterministic for a given seed.  Raises
    :class:`TrainingDivergedError` when the loss goes non-finite.
    """
    addrs = np.asarray(addrs, dtype=np.uint64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    x = encode_addresses(addrs, bit_lo, n_bits, dtype=dtype)
    order = rng.permutation(len(addrs))
    n_hold = max(1, int(len(addrs) * holdout_fraction))
    hold, fit = order[:n_hold], order[n_hold:]
    x_fit, y_fit = x[fit], labels[fit]
    x_hold, y_hold = x[hold], labels[hold]

    layer_sizes = [n_bits, *hidden, num_classes]
    weights, biases = _init_layers(layer_sizes, rng, dtype)
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    y_onehot = np.eye(num_classes, dtype=dtype)[y_fit]

    n_fit = len(fit)
    for epoch in range(epochs):
        perm = rng.permutation(n_fit)
        for start in range(0, n_fit, batch_size):
            idx = perm[start:start + batch_size]
            gw, gb = backprop(x_fit[idx], y_onehot[idx], weights, biases)
            for i in range(len(weights)):
                vel_w[i] = momentum * vel_w[i] - lr * gw[i]
                vel_b[i] = momentum * vel_b[i] - lr * gb[i]
                weights[i] += vel_w[i]
                biases[i] += vel_b[i]
        _, probs = _forward_cached(x_fit, weights, biases)
        loss = cross_entropy(probs, y_fit)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch)

    model = MlpApproximator(layer_sizes, weights, biases, bit_lo, n_bits)
    acc = float((model.predict_features(x_hold) == y_hold).mean())
    return model, acc
