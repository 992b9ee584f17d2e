"""Small dense classifier with explicit forward/backward passes.

The model is a chain of fully connected layers (optionally ReLU-activated)
ending in a softmax cross-entropy output. Gradients are computed by hand so
that (a) they can be checked against finite differences and (b) the attack
engine can differentiate *through* the gradient computation without an
autodiff framework.

All functions are pure: parameters in, new values out.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, UndeterminedLabel

KIND_DENSE = "dense"
KIND_RELU = "dense-relu"
KIND_OUTPUT = "dense-softmax-output"
_KIND_CODES = {KIND_DENSE: 0, KIND_RELU: 1, KIND_OUTPUT: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

MODEL_MAGIC = b"SVDLAB-MODEL-v1\n"


@dataclass
class Example:
    """One labeled flattened image, pixel values in [0, 1]."""

    input: np.ndarray
    label: int


@dataclass
class LayerParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    kind: str

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ModelParams:
    layers: list[LayerParams]

    def __post_init__(self):
        if not self.layers:
            raise InvalidInput("model needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise InvalidInput(
                    f"layer dims do not chain: {prev.out_dim} -> {cur.in_dim}"
                )
        if self.layers[-1].kind != KIND_OUTPUT:
            raise InvalidInput("final layer must be the softmax output layer")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "ModelParams":
        return ModelParams(
            [
                LayerParams(l.weight.copy(), l.bias.copy(), l.kind)
                for l in self.layers
            ]
        )

    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


@dataclass
class GradSet:
    """Per-layer weight/bias gradients, shapes mirroring the model."""

    layers: list["LayerGrads"]

    def copy(self) -> "GradSet":
        return GradSet(
            [LayerGrads(g.weight_grad.copy(), g.bias_grad.copy()) for g in self.layers]
        )

    def tensors(self) -> list[np.ndarray]:
        """Flat tensor list: weight then bias per layer."""
        out = []
        for g in self.layers:
            out.append(g.weight_grad)
            out.append(g.bias_grad)
        return out


@dataclass
class LayerGrads:
    weight_grad: np.ndarray
    bias_grad: np.ndarray


def init_model(input_dim: int, hidden_dims, num_classes: int, seed: int = 0) -> ModelParams:
    """Default architecture: dense+ReLU hidden layers, softmax output.

    Weights are Gaussian with std 1/sqrt(fan_in); biases start at zero.
    """
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden_dims, num_classes]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        kind = KIND_OUTPUT if i == len(dims) - 2 else KIND_RELU
        layers.append(LayerParams(w, b, kind))
    return ModelParams(layers)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward_batch(params: ModelParams, x: np.ndarray):
    """Run a (n, D) batch through the network.

    Returns (logits, activations, preacts) where activations[l] is the input
    to layer l (activations[0] is the batch itself) and preacts[l] is layer
    l's affine output. Both caches are what the backward pass consumes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise InvalidInput(
            f"batch shape {x.shape} does not match input dim {params.input_dim}"
        )
    activations = [x]
    preacts = []
    cur = x
    for layer in params.layers:
        z = cur @ layer.weight.T + layer.bias
        preacts.append(z)
        if layer.kind == KIND_RELU:
            cur = np.maximum(z, 0.0)
        else:
            cur = z
        if layer is not params.layers[-1]:
            activations.append(cur)
    return preacts[-1], activations, preacts


def forward(params: ModelParams, input_vec):
    """Single-input forward pass; returns (logits, cache)."""
    x = np.asarray(input_vec, dtype=np.float64).reshape(1, -1)
    logits, activations, preacts = forward_batch(params, x)
    return logits[0], (activations, preacts)


def deltas_from_forward(params: ModelParams, preacts, probs: np.ndarray, y: np.ndarray):
    """Backpropagated error signals per layer for soft targets `y` (n, C)."""
    n_layers = len(params.layers)
    deltas = [None] * n_layers
    deltas[-1] = probs - y
    for l in range(n_layers - 2, -1, -1):
        back = deltas[l + 1] @ params.layers[l + 1].weight
        if params.layers[l].kind == KIND_RELU:
            back = back * (preacts[l] > 0.0)
        deltas[l] = back
    return deltas


def grads_from_deltas(activations, deltas, n: int) -> GradSet:
    layers = []
    for a, d in zip(activations, deltas):
        layers.append(LayerGrads(weight_grad=d.T @ a / n, bias_grad=d.mean(axis=0)))
    return GradSet(layers)


def loss_and_grad(params: ModelParams, batch: list[Example]):
    """Mean softmax cross-entropy and mean parameter gradients over a batch."""
    if not batch:
        raise InvalidInput("batch must be non-empty")
    x = np.stack([np.asarray(ex.input, dtype=np.float64) for ex in batch])
    labels = np.array([ex.label for ex in batch], dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= params.num_classes):
        raise InvalidInput("label out of range")
    y = np.zeros((len(batch), params.num_classes))
    y[np.arange(len(batch)), labels] = 1.0

    logits, activations, preacts = forward_batch(params, x)
    probs = _softmax(logits)
    picked = probs[np.arange(len(batch)), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))

    deltas = deltas_from_forward(params, preacts, probs, y)
    grads = grads_from_deltas(activations, deltas, len(batch))
    return loss, grads


def sgd_step(params: ModelParams, grads: GradSet, lr: float) -> ModelParams:
    if lr <= 0.0:
        raise InvalidInput("learning rate must be positive")
    layers = []
    for lp, lg in zip(params.layers, grads.layers):
        layers.append(
            LayerParams(
                weight=lp.weight - lr * lg.weight_grad,
                bias=lp.bias - lr * lg.bias_grad,
                kind=lp.kind,
            )
        )
    return ModelParams(layers)


def infer_label_from_grads(grads: GradSet) -> int:
    """Recover a single example's label from the output-layer bias gradient.

    For softmax cross-entropy on one example the bias gradient is
    softmax(z) - onehot(label), negative exactly at the true class. Anything
    other than exactly one strictly negative entry (multi-example batches,
    defended gradients) is undecidable.
    """
    bias_grad = grads.layers[-1].bias_grad
    negatives = np.flatnonzero(bias_grad < 0.0)
    if len(negatives) != 1:
        raise UndeterminedLabel(
            f"expected exactly one negative output-bias gradient, found {len(negatives)}"
        )
    return int(negatives[0])


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    logits, _, _ = forward_batch(params, np.atleast_2d(x))
    return np.argmax(logits, axis=1)


def accuracy(params: ModelParams, examples: list[Example]) -> float:
    if not examples:
        raise InvalidInput("empty evaluation set")
    x = np.stack([ex.input for ex in examples])
    labels = np.array([ex.label for ex in examples])
    return float(np.mean(predict(params, x) == labels))


def save_model(params: ModelParams, path) -> None:
    """Binary checkpoint: magic header, layer table, row-major f64 arrays."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(params.layers)))
        for layer in params.layers:
            fh.write(
                struct.pack(
                    "<BII", _KIND_CODES[layer.kind], layer.out_dim, layer.in_dim
                )
            )
            fh.write(layer.weight.astype("<f8").tobytes())
            fh.write(layer.bias.astype("<f8").tobytes())


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise InvalidInput(f"{path}: not a model checkpoint (bad magic)")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        layers = []
        for _ in range(n_layers):
            code, out_dim, in_dim = struct.unpack("<BII", fh.read(9))
            w = np.frombuffer(fh.read(8 * out_dim * in_dim), dtype="<f8").reshape(
                out_dim, in_dim
            )
            b = np.frombuffer(fh.read(8 * out_dim), dtype="<f8").copy()
            layers.append(LayerParams(w.astype(np.float64).copy(), b, _CODE_KINDS[code]))
    return ModelParams(layers)
