"""Minimal dense-network substrate with reverse-mode gradients.

Networks are flat stacks of layers ending in exactly one head (softmax over K
classes, or an identity "gaussian" head that exposes an m-dimensional mean).
Everything is float64; forward passes cache activations only when the
training flag is set, and ``Network.backward`` consumes upstream gradients
taken with respect to the *head input* (logits for a softmax head), which is
where all the loss functions in this package hand their gradients back.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np


class NumericalError(RuntimeError):
    """A non-finite value turned up where the math requires finite numbers."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax via max shift; rows sum to 1 within 1e-12."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Dense:
    """Affine map x @ W + b with weights of shape (n_in, n_out)."""

    def __init__(self, n_in: int, n_out: int):
        if n_in < 1 or n_out < 1:
            raise ValueError("dense dimensions must be positive")
        self.n_in = n_in
        self.n_out = n_out
        self.W = np.zeros((n_in, n_out))
        self.b = np.zeros(n_out)
        self._x = None

    in_width = property(lambda self: self.n_in)
    out_width = property(lambda self: self.n_out)

    def forward(self, x, training, rng):
        self._x = x if training else None
        return x @ self.W + self.b

    def backward(self, g):
        dW = self._x.T @ g
        db = g.sum(axis=0)
        return g @ self.W.T, [dW, db]

    def params(self):
        return [self.W, self.b]

    def set_params(self, arrays):
        self.W, self.b = arrays

    def spec(self):
        return {"kind": "dense", "in": self.n_in, "out": self.n_out}


class _Activation:
    """Shape-preserving elementwise layer; subclasses fill in the math."""

    in_width = out_width = None

    def params(self):
        return []

    def set_params(self, arrays):
        pass


class Relu(_Activation):
    def forward(self, x, training, rng):
        self._mask = (x > 0) if training else None
        return np.maximum(x, 0.0)

    def backward(self, g):
        return g * self._mask, []

    def spec(self):
        return {"kind": "relu"}


class LeakyRelu(_Activation):
    def __init__(self, slope: float = 0.2):
        self.slope = float(slope)

    def forward(self, x, training, rng):
        self._mask = (x > 0) if training else None
        return np.where(x > 0, x, self.slope * x)

    def backward(self, g):
        return g * np.where(self._mask, 1.0, self.slope), []

    def spec(self):
        return {"kind": "leaky_relu", "slope": self.slope}


class Tanh(_Activation):
    def forward(self, x, training, rng):
        out = np.tanh(x)
        self._out = out if training else None
        return out

    def backward(self, g):
        return g * (1.0 - self._out**2), []

    def spec(self):
        return {"kind": "tanh"}


class Sigmoid(_Activation):
    def forward(self, x, training, rng):
        out = 1.0 / (1.0 + np.exp(-x))
        self._out = out if training else None
        return out

    def backward(self, g):
        return g * self._out * (1.0 - self._out), []

    def spec(self):
        return {"kind": "sigmoid"}


class Dropout(_Activation):
    """Inverted dropout: scaling happens at train time, eval is identity."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, training, rng):
        if not training or self.rate == 0.0:
            self._mask = np.float64(1.0) if training else None
            return x
        if rng is None:
            raise ValueError("dropout layer needs an rng when training")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, g):
        return g * self._mask, []

    def spec(self):
        return {"kind": "dropout", "rate": self.rate}


class SoftmaxHead:
    """Terminal softmax over K incoming logits."""

    def __init__(self, classes: int):
        if classes < 1:
            raise ValueError("softmax head needs at least one class")
        self.classes = classes

    in_width = property(lambda self: self.classes)
    out_width = property(lambda self: self.classes)

    def forward(self, x, training, rng):
        out = softmax(x)
        self._out = out if training else None
        return out

    def backward(self, g):
        # Jacobian-vector product of softmax; rarely used since losses hand
        # back gradients w.r.t. the logits directly.
        p = self._out
        return p * (g - (g * p).sum(axis=-1, keepdims=True)), []

    def params(self):
        return []

    def set_params(self, arrays):
        pass

    def spec(self):
        return {"kind": "softmax", "classes": self.classes}


class GaussianHead:
    """Identity head exposing the incoming m-vector as the encoding mean."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("gaussian head dimension must be positive")
        self.dim = dim

    in_width = property(lambda self: self.dim)
    out_width = property(lambda self: self.dim)

    def forward(self, x, training, rng):
        return x

    def backward(self, g):
        return g, []

    def params(self):
        return []

    def set_params(self, arrays):
        pass

    def spec(self):
        return {"kind": "gaussian", "dim": self.dim}


_HEADS = (SoftmaxHead, GaussianHead)

_KINDS = {
    "dense": lambda s: Dense(s["in"], s["out"]),
    "relu": lambda s: Relu(),
    "leaky_relu": lambda s: LeakyRelu(s["slope"]),
    "tanh": lambda s: Tanh(),
    "sigmoid": lambda s: Sigmoid(),
    "dropout": lambda s: Dropout(s["rate"]),
    "softmax": lambda s: SoftmaxHead(s["classes"]),
    "gaussian": lambda s: GaussianHead(s["dim"]),
}


class Network:
    """Ordered layer stack with exactly one head layer, which must be last."""

    def __init__(self, layers):
        if not layers:
            raise ValueError("network needs at least a head layer")
        heads = [i for i, lay in enumerate(layers) if isinstance(lay, _HEADS)]
        if heads != [len(layers) - 1]:
            raise ValueError("network must have exactly one head layer, and it must be last")
        width = None
        for lay in layers:
            w_in = lay.in_width
            if w_in is not None:
                if width is not None and width != w_in:
                    raise ValueError(
                        f"layer {lay.spec()['kind']} expects width {w_in}, got {width}"
                    )
                width = lay.out_width
        self.layers = list(layers)
        self._recorded = False

    @property
    def head(self):
        return self.layers[-1]

    @property
    def in_dim(self):
        for lay in self.layers:
            if lay.in_width is not None:
                return lay.in_width
        raise AssertionError("unreachable: head always has a width")

    @property
    def out_dim(self):
        return self.head.out_width

    def forward(self, x, training=False, rng=None):
        """Run the stack; returns (head_output, penultimate).

        The penultimate value is the head layer's input: logits for a softmax
        head, the mean vector itself for a gaussian head.  Only a forward with
        ``training=True`` records the state ``backward`` needs.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"expected a 2-d batch, got shape {x.shape}")
        if x.shape[1] != self.in_dim:
            raise ValueError(f"batch width {x.shape[1]} does not match input width {self.in_dim}")
        for lay in self.layers[:-1]:
            x = lay.forward(x, training, rng)
        penult = x
        out = self.head.forward(penult, training, rng)
        self._recorded = bool(training)
        return out, penult

    def backward(self, grad_head_input):
        """Backpropagate a gradient taken w.r.t. the head input.

        Returns (param_grads, input_grad); param_grads aligns with
        ``parameters()``.  Requires a preceding forward with training=True.
        """
        if not self._recorded:
            raise RuntimeError("backward called without a recorded training forward pass")
        g = np.asarray(grad_head_input, dtype=np.float64)
        param_grads = []
        for lay in reversed(self.layers[:-1]):
            g, pg = lay.backward(g)
            param_grads = pg + param_grads
        return param_grads, g

    def parameters(self):
        out = []
        for lay in self.layers:
            out.extend(lay.params())
        return out

    def spec(self):
        return [lay.spec() for lay in self.layers]

    def copy(self):
        net = network_from_spec(self.spec())
        for p_dst, p_src in zip(net.parameters(), self.parameters()):
            p_dst[...] = p_src
        return net


def network_from_spec(spec) -> Network:
    layers = []
    for s in spec:
        if s["kind"] not in _KINDS:
            raise ValueError(f"unknown layer kind {s['kind']!r}")
        layers.append(_KINDS[s["kind"]](s))
    return Network(layers)


def feedforward(in_dim, hidden, out_dim, head="softmax", activation="leaky_relu",
                slope=0.2, dropout=0.0, output_activation=None) -> Network:
    """Build the standard MLP shape used by encoders and generators here."""
    acts = {"relu": Relu, "leaky_relu": lambda: LeakyRelu(slope), "tanh": Tanh, "sigmoid": Sigmoid}
    if activation not in acts:
        raise ValueError(f"unknown activation {activation!r}")
    layers = []
    width = in_dim
    for h in hidden:
        layers.append(Dense(width, h))
        layers.append(acts[activation]())
        if dropout > 0.0:
            layers.append(Dropout(dropout))
        width = h
    layers.append(Dense(width, out_dim))
    if output_activation is not None:
        layers.append(acts[output_activation]())
    if head == "softmax":
        layers.append(SoftmaxHead(out_dim))
    elif head == "gaussian":
        layers.append(GaussianHead(out_dim))
    else:
        raise ValueError(f"unknown head {head!r}")
    return Network(layers)


def init_params(network: Network, seed_or_rng) -> Network:
    """Uniform fan-in init: weights in +/- sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    for lay in network.layers:
        if isinstance(lay, Dense):
            bound = np.sqrt(6.0 / (lay.n_in + lay.n_out))
            lay.W = rng.uniform(-bound, bound, size=(lay.n_in, lay.n_out))
            lay.b = np.zeros(lay.n_out)
    return network


def encode(network: Network, features, batch_size=1024):
    """Eval-mode forward over a whole dataset; returns (head_out, penultimate)."""
    outs, penults = [], []
    n = features.shape[0]
    for start in range(0, n, batch_size):
        rows = features[start:start + batch_size]
        if hasattr(rows, "toarray"):
            rows = rows.toarray()
        out, pen = network.forward(rows, training=False)
        outs.append(out)
        penults.append(pen)
    return np.concatenate(outs), np.concatenate(penults)


class AdamState:
    """Bias-corrected Adam moments for one parameter list."""

    def __init__(self, params, lr=0.0002, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("adam betas must lie in (0, 1)")
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def state_arrays(self):
        arrays = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            arrays[f"m{i}"] = m
            arrays[f"v{i}"] = v
        return arrays

    def load_arrays(self, arrays, step):
        self.m = [np.array(arrays[f"m{i}"]) for i in range(len(self.m))]
        self.v = [np.array(arrays[f"v{i}"]) for i in range(len(self.v))]
        self.step = int(step)


def adam_step(params, grads, state: AdamState):
    """One in-place Adam update; rejects non-finite gradients loudly."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and adam state must align")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericalError(
                f"non-finite gradient for parameter {i} (shape {g.shape}): {bad} bad entries"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


MAGIC = b"DISC1"


def save_network(network: Network, path) -> None:
    """Write magic, length-prefixed JSON manifest, then float64 LE tensors."""
    manifest = json.dumps({"layers": network.spec()}).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for p in network.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        net = network_from_spec(manifest["layers"])
        for lay in net.layers:
            arrays = []
            for p in lay.params():
                raw = fh.read(p.size * 8)
                if len(raw) != p.size * 8:
                    raise ValueError(f"{path}: truncated tensor data")
                arrays.append(np.frombuffer(raw, dtype="<f8").reshape(p.shape).copy())
            lay.set_params(arrays)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after tensor data")
    return net
