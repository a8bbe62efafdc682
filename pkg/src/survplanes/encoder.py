"""Reference encoder: a small tanh MLP with explicit reverse-mode gradients.

Any object with ``embed``, ``forward`` and ``backward`` of the same shapes
can stand in for it; the losses and head only see embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_HIDDEN = (32, 16)


@dataclass(frozen=True)
class EncoderParams:
    """Weights (out x in) and biases of each layer.

    Hidden layers use tanh; the final layer is linear.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float).reshape(-1) for b in self.biases)
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {w.shape[1]} != previous output "
                                 f"{ws[i - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @classmethod
    def initialize(cls, input_dim, hidden=DEFAULT_HIDDEN, rng=None):
        """Glorot-uniform weights and zero biases for ``input_dim -> *hidden``."""
        rng = np.random.default_rng(rng)
        sizes = [int(input_dim), *map(int, hidden)]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(weights), tuple(biases))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"encoder.W{i}"] = w
            out[f"encoder.b{i}"] = b
        return out

    @classmethod
    def from_named(cls, arrays):
        n = sum(1 for k in arrays if k.startswith("encoder.W"))
        return cls(tuple(arrays[f"encoder.W{i}"] for i in range(n)),
                   tuple(arrays[f"encoder.b{i}"] for i in range(n)))

    def embed(self, x):
        return forward(self, x)[0]

    def forward(self, x):
        return forward(self, x)

    def backward(self, tape, grad_embedding):
        return backward(self, tape, grad_embedding)


@dataclass
class GradientTape:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    squeeze: bool
    consumed: bool = field(default=False)


def forward(params: EncoderParams, x):
    """Embed ``x`` of shape ``(d,)`` or ``(n, d)``; returns ``(embedding, tape)``."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    a = np.atleast_2d(x)
    if a.ndim != 2 or a.shape[1] != params.input_dim:
        raise ValueError(f"input shape {x.shape} does not match encoder input "
                         f"dimension {params.input_dim}")
    if not np.all(np.isfinite(a)):
        raise ValueError("encoder input contains non-finite values")
    inputs, preacts = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        preacts.append(z)
        a = z if i == last else np.tanh(z)
    emb = a[0] if squeeze else a
    return emb, GradientTape(inputs, preacts, squeeze)


def backward(params: EncoderParams, tape: GradientTape, grad_embedding):
    """Reverse pass for ``sum(embedding * grad_embedding)``.

    Returns ``(grad_params, grad_input)``; parameter gradients are summed
    over the batch rows. A tape can be consumed only once.
    """
    if tape.consumed:
        raise RuntimeError("gradient tape already consumed by a backward pass")
    g = np.asarray(grad_embedding, dtype=float)
    g = g[None, :] if tape.squeeze and g.ndim == 1 else g
    expected = tape.preacts[-1].shape
    if g.shape != expected:
        raise ValueError(f"cotangent shape {g.shape} does not match embedding {expected}")
    tape.consumed = True
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in reversed(range(n_layers)):
        if i != n_layers - 1:
            g = g * (1.0 - np.tanh(tape.preacts[i]) ** 2)
        gw[i] = g.T @ tape.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    grad_input = g[0] if tape.squeeze else g
    return EncoderParams(tuple(gw), tuple(gb)), grad_input
