"""Dense network engine with manual backprop, partial forward/backward and FLOP counts.

A ``Model`` is a stack of dense layers followed by a linear classifier head.
Layers are the unit of freezing: a frozen boundary ``f`` means layers
``0..f-1`` receive no gradients and never change.

Every matrix product goes through :func:`dot`, which accumulates over the
inner dimension strictly left to right with elementwise numpy ops.  Each
output row therefore depends only on the matching input row, so activations
computed on one batch and cached are bit-identical to activations recomputed
later inside a different batch.

FLOP convention: 2 FLOPs per multiply-accumulate.  A dense layer of shape
``out x in`` on a batch of ``B`` rows costs ``2*B*in*out`` forward FLOPs and
twice that backward (the weight-gradient and input-gradient products).
Bias adds and activations are not counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")


class ShapeError(ValueError):
    """Raised when a matrix does not chain with the layer it is fed to."""


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with a fixed left-to-right accumulation order over the inner index."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    acc = a[:, 0:1] * b[0:1, :]
    for k in range(1, a.shape[1]):
        acc += a[:, k : k + 1] * b[k : k + 1, :]
    return acc


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Layer:
    weights: np.ndarray  # out_dim x in_dim
    bias: np.ndarray  # out_dim
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("weights must be a 2-d matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def pre_activation(self, x: np.ndarray) -> np.ndarray:
        return dot(x, self.weights.T) + self.bias

    def copy(self) -> "Layer":
        return Layer(self.weights, self.bias, self.activation)  # the constructor copies


@dataclass
class Model:
    layers: list[Layer]
    head: Layer

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError("a model needs at least two freezable layers")
        if self.head.activation != "identity":
            raise ValueError("the classifier head must use the identity activation")
        chain = self.layers + [self.head]
        for j in range(1, len(chain)):
            if chain[j].in_dim != chain[j - 1].out_dim:
                name = "head" if j == len(self.layers) else f"layer {j}"
                raise ShapeError(
                    f"{name} expects {chain[j].in_dim} inputs but layer {j - 1} "
                    f"produces {chain[j - 1].out_dim}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    def input_dim(self, depth: int) -> int:
        """Width of the activation entering layer ``depth`` (``depth == L`` is the head)."""
        if depth == self.num_layers:
            return self.head.in_dim
        return self.layers[depth].in_dim

    def copy(self) -> "Model":
        return Model([layer.copy() for layer in self.layers], self.head.copy())

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers + [self.head]:
            out.extend([layer.weights, layer.bias])
        return out


def init_model(rng: np.random.Generator, in_dim: int, widths: list[int], num_classes: int,
               activation: str = "relu") -> Model:
    """Scaled-Gaussian initialisation (He for relu, Xavier otherwise)."""
    layers = []
    prev = in_dim
    for width in widths:
        gain = 2.0 if activation == "relu" else 1.0
        w = rng.normal(0.0, np.sqrt(gain / prev), size=(width, prev))
        layers.append(Layer(w, np.zeros(width), activation))
        prev = width
    head = Layer(rng.normal(0.0, np.sqrt(1.0 / prev), size=(num_classes, prev)),
                 np.zeros(num_classes), "identity")
    return Model(layers, head)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    per_layer_outputs: list[np.ndarray]  # layers start_depth..L-1, then logits
    pre_activations: list[np.ndarray]
    start_depth: int

    @property
    def logits(self) -> np.ndarray:
        return self.per_layer_outputs[-1]

    def layer_input(self, j: int) -> np.ndarray:
        """Activation entering layer ``j`` (``j == L`` for the head)."""
        if j == self.start_depth:
            return self.inputs
        return self.per_layer_outputs[j - 1 - self.start_depth]


@dataclass
class GradientSet:
    """Weight and bias gradients for layers at or above ``frozen_boundary`` plus the head."""

    frozen_boundary: int
    layers: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    head: tuple[np.ndarray, np.ndarray] | None = None

    def layer_indices(self) -> list[int]:
        return sorted(self.layers)


def _check_matrix(x: np.ndarray, width: int, where: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{where} expects a (batch x {width}) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values entering {where}")
    return x


def forward(model: Model, x: np.ndarray, start_depth: int = 0) -> ForwardTrace:
    """Run layers ``start_depth..L-1`` and the head.

    With ``start_depth > 0`` the input is the activation produced by layer
    ``start_depth - 1`` (typically read back from the activation cache).
    """
    L = model.num_layers
    if not 0 <= start_depth < L:
        raise ValueError(f"start_depth must be in [0, {L}), got {start_depth}")
    x = _check_matrix(x, model.input_dim(start_depth), f"layer {start_depth}")
    outputs, pre = [], []
    h = x
    for j in range(start_depth, L):
        layer = model.layers[j]
        z = layer.pre_activation(h)
        h = _activate(z, layer.activation)
        pre.append(z)
        outputs.append(h)
    logits = model.head.pre_activation(h)
    pre.append(logits)
    outputs.append(logits)
    return ForwardTrace(x, outputs, pre, start_depth)


def forward_prefix(model: Model, x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Activation after layer ``stop - 1`` given the activation entering layer ``start``.

    No trace is kept; this is the cheap path for frozen layers.
    """
    if not 0 <= start <= stop <= model.num_layers:
        raise ValueError(f"bad layer range [{start}, {stop})")
    h = _check_matrix(x, model.input_dim(start), f"layer {start}")
    for j in range(start, stop):
        layer = model.layers[j]
        h = _activate(layer.pre_activation(h), layer.activation)
    return h


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, x).logits, axis=1)


def loss_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n


def _dense_backward(layer: Layer, a_in: np.ndarray, z: np.ndarray, a_out: np.ndarray,
                    d_out: np.ndarray, need_input_grad: bool):
    dz = d_out * _activate_grad(z, a_out, layer.activation)
    dw = dot(dz.T, a_in)
    db = dz.sum(axis=0)
    dx = dot(dz, layer.weights) if need_input_grad else None
    return dw, db, dx


def backward(model: Model, trace: ForwardTrace, dlogits: np.ndarray,
             frozen_boundary: int) -> GradientSet:
    """Backpropagate from the logits down to ``frozen_boundary`` and stop there."""
    L = model.num_layers
    if frozen_boundary > L:
        raise ValueError(f"frozen_boundary {frozen_boundary} exceeds {L} layers")
    if frozen_boundary < trace.start_depth:
        raise ValueError(
            f"frozen_boundary {frozen_boundary} is below the trace start depth "
            f"{trace.start_depth}; those activations were never computed"
        )
    dlogits = _check_matrix(dlogits, model.num_classes, "head gradient")
    grads = GradientSet(frozen_boundary)
    dw, db, d = _dense_backward(model.head, trace.layer_input(L), trace.pre_activations[-1],
                                trace.logits, dlogits, frozen_boundary < L)
    grads.head = (dw, db)
    for j in range(L - 1, frozen_boundary - 1, -1):
        k = j - trace.start_depth
        dw, db, d = _dense_backward(model.layers[j], trace.layer_input(j), trace.pre_activations[k],
                                    trace.per_layer_outputs[k], d, j > frozen_boundary)
        grads.layers[j] = (dw, db)
    return grads


def sgd_step(model: Model, grads: GradientSet, lr: float) -> Model:
    """In-place ``w <- w - lr * g`` for every layer present in ``grads``; returns the model."""
    for j, (dw, db) in grads.layers.items():
        layer = model.layers[j]
        layer.weights -= lr * dw
        layer.bias -= lr * db
    if grads.head is not None:
        dw, db = grads.head
        model.head.weights -= lr * dw
        model.head.bias -= lr * db
    return model


def layer_forward_flops(layer: Layer, rows: int) -> int:
    return 2 * rows * layer.in_dim * layer.out_dim


def flop_count(model: Model, batch: int, frozen_boundary: int = 0,
               start_depth: int = 0) -> tuple[int, int]:
    """(forward, backward) FLOPs for one step that resumes at ``start_depth``
    and stops backprop at ``frozen_boundary``."""
    L = model.num_layers
    if not 0 <= start_depth <= frozen_boundary <= L:
        raise ValueError("need 0 <= start_depth <= frozen_boundary <= num_layers")
    fwd = sum(layer_forward_flops(model.layers[j], batch) for j in range(start_depth, L))
    fwd += layer_forward_flops(model.head, batch)
    bwd = sum(2 * layer_forward_flops(model.layers[j], batch) for j in range(frozen_boundary, L))
    bwd += 2 * layer_forward_flops(model.head, batch)
    return fwd, bwd
