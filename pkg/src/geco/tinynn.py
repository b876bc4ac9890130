"""Minimal trainable-network substrate: dense MLPs, reverse-mode gradients,
Adam, softmax, and a binary checkpoint format.

Everything runs on float64 numpy so analytic gradients can be checked against
central finite differences to tight tolerances, and so training is bitwise
reproducible given (seed, config) on a single thread.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FileFormatError, NumericError, ShapeError

_ACTIVATIONS = ("relu", "tanh", "identity")

CHECKPOINT_MAGIC = b"GSRT"
CHECKPOINT_VERSION = 1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, h):
    # h is the cached activation output for z
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(z)


class Mlp:
    """Fully connected network: affine layers with an elementwise activation
    on every hidden layer and a linear output layer.

    Parameters
    ----------
    widths : sequence of int
        Layer widths including input and output, e.g. (3, 32, 32).
    activation : str or sequence of str
        "relu", "tanh" or "identity"; either one name for all hidden layers
        or one per hidden layer.
    rng : numpy Generator
        Source for the scaled-uniform fan-in weight init.
    """

    def __init__(self, widths, activation="relu", rng=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ShapeError(f"invalid layer widths {widths}")
        n_hidden = len(widths) - 2
        if isinstance(activation, str):
            acts = [activation] * n_hidden
        else:
            acts = list(activation)
        if len(acts) != n_hidden or any(a not in _ACTIVATIONS for a in acts):
            raise ShapeError(f"invalid activations {acts} for {n_hidden} hidden layers")
        if rng is None:
            rng = np.random.default_rng(0)
        self.widths = widths
        self.activations = acts
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    def _layer_act(self, i):
        # hidden layers use the configured activation, the last layer is linear
        if i < len(self.activations):
            return self.activations[i]
        return "identity"

    def forward(self, x):
        """Apply the network to a vector (in,) or a batch (B, in)."""
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x):
        """Forward pass that also returns the cache needed by backward()."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.in_width:
            raise ShapeError(f"input width {x.shape} does not match {self.in_width}")
        inputs = [h]
        pre = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = _act(self._layer_act(i), z)
            inputs.append(h)
        out = h[0] if single else h
        return out, (single, inputs, pre)

    def backward(self, cache, grad_out):
        """Reverse-mode gradients.

        Returns (param_grads, grad_in) where param_grads is a flat list
        [dW0, db0, dW1, db1, ...] matching params(), summed over the batch,
        and grad_in has the same shape as the forward input.
        """
        single, inputs, pre = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != (inputs[-1].shape[0], self.out_width):
            raise ShapeError(f"upstream gradient shape {grad_out.shape} mismatch")
        grads = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            gz = g * _act_grad(self._layer_act(i), pre[i], inputs[i + 1])
            grads[2 * i] = inputs[i].T @ gz
            grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ self.weights[i].T
        return grads, (g[0] if single else g)

    def params(self):
        """Flat parameter list [W0, b0, W1, b1, ...] of live arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def state_dict(self, prefix=""):
        d = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            d[f"{prefix}w{i}"] = w
            d[f"{prefix}b{i}"] = b
        return d

    def load_state_dict(self, d, prefix=""):
        for i in range(len(self.weights)):
            w = d[f"{prefix}w{i}"]
            b = d[f"{prefix}b{i}"]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ShapeError(f"checkpoint tensor shape mismatch at layer {i}")
            self.weights[i][...] = w
            self.biases[i][...] = b


class Adam:
    """Bias-corrected Adam over a flat list of parameter arrays."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        """One in-place update. grads must align with params."""
        if len(grads) != len(params):
            raise ShapeError("gradient list does not match parameter list")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient in Adam step")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def softmax(z):
    """Numerically stabilized softmax along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def save_checkpoint(path, tensors):
    """Write named float64 tensors in the versioned binary format:
    magic "GSRT", u32 version, u32 tensor count, then per tensor
    u32 name length, utf-8 name, u32 rank, u64 dims, little-endian
    float64 payload.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint. Returns name -> array."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise FileFormatError(f"{path}: bad magic, not a checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            tensors[name] = data.astype(np.float64)
        return tensors
