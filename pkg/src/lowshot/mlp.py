"""Minimal feedforward network with rectifier activations everywhere,
including the output layer, so outputs are always non-negative.

Used both for the feature extractor and for the hallucination generator;
they differ only in layer sizes and checkpoint magic. Backpropagation is
hand-rolled: the rectifier subgradient at exactly 0 is taken to be 0.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .rng import SeededRng
from .storeio import Reader, StoreParseError, Writer


class Mlp:
    """Stack of affine layers, each followed by max(., 0)."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight/bias shapes disagree")
            if i > 0 and w.shape[1] != weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]

    @classmethod
    def init_random(cls, layer_sizes: list[int], seed: int) -> "Mlp":
        """Scaled-uniform fan-in initialization, biases at zero."""
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = SeededRng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            w = (rng.uniform((fan_out * fan_in)) * 2.0 - 1.0) * bound
            weights.append(w.reshape(fan_out, fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Activations for a single vector or a (batch, dim) matrix."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[1] != self.input_dim:
            raise ValueError(
                f"input dim {a.shape[1]} != network input {self.input_dim}"
            )
        for w, b in zip(self.weights, self.biases):
            a = np.maximum(a @ w.T + b, 0.0)
        return a[0] if single else a

    def forward_cached(self, x: np.ndarray):
        """Batch forward keeping pre-activations for backprop."""
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.input_dim:
            raise ValueError("expected a (batch, input_dim) matrix")
        activations = [a]
        pre = []
        for w, b in zip(self.weights, self.biases):
            z = a @ w.T + b
            pre.append(z)
            a = np.maximum(z, 0.0)
            activations.append(a)
        return a, (activations, pre)

    def backward(self, cache, grad_output: np.ndarray):
        """Parameter and input gradients for summed upstream gradients.

        grad_output is dLoss/d(output) per batch row; no averaging is
        applied here, the caller owns normalization.
        """
        activations, pre = cache
        grad_w = [np.zeros_like(w) for w in self.weights]
        grad_b = [np.zeros_like(b) for b in self.biases]
        delta = np.asarray(grad_output, dtype=np.float64)
        for layer in reversed(range(len(self.weights))):
            delta = delta * (pre[layer] > 0.0)
            grad_w[layer] = delta.T @ activations[layer]
            grad_b[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = delta @ self.weights[layer]
        grad_input = delta @ self.weights[0]
        return grad_w, grad_b, grad_input

    def sgd_step(self, grad_w, grad_b, lr: float, weight_decay: float = 0.0):
        """In-place step; weight decay applies to weights, not biases."""
        for w, gw in zip(self.weights, grad_w):
            w -= lr * (gw + weight_decay * w)
        for b, gb in zip(self.biases, grad_b):
            b -= lr * gb

    def flatten_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray) -> None:
        pos = 0
        for i, w in enumerate(self.weights):
            size = w.size
            self.weights[i] = flat[pos : pos + size].reshape(w.shape).copy()
            pos += size
            bsize = self.biases[i].size
            self.biases[i] = flat[pos : pos + bsize].copy()
            pos += bsize
        if pos != flat.size:
            raise ValueError("parameter vector has the wrong length")


def save_mlp(net: Mlp, path, magic: bytes) -> None:
    w = Writer()
    w.magic(magic)
    sizes = net.layer_sizes
    w.u32(len(sizes))
    for s in sizes:
        w.u32(s)
    for weight, bias in zip(net.weights, net.biases):
        w.f32_array(weight)
        w.f32_array(bias)
    Path(path).write_bytes(w.getvalue())


def load_mlp(path, magic: bytes) -> Mlp:
    r = Reader(Path(path).read_bytes(), "network checkpoint")
    r.expect_magic(magic)
    n_sizes = r.u32("layer count")
    if not 2 <= n_sizes <= 64:
        raise StoreParseError(4, f"implausible layer count {n_sizes}")
    sizes = [r.u32(f"layer size {i}") for i in range(n_sizes)]
    if any(s < 1 for s in sizes):
        raise StoreParseError(8, "zero layer size")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(
            r.f32_array(fan_out * fan_in, "weights")
            .reshape(fan_out, fan_in)
            .astype(np.float64)
        )
        biases.append(r.f32_array(fan_out, "biases").astype(np.float64))
    r.expect_end()
    return Mlp(weights, biases)
