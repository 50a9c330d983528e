"""ANN representation, forward pass with activation capture, and a toy MLP trainer.

A model is an ordered list of layers.  Conversion relies on a fixed
structure: every dense/conv layer is followed, possibly after avgpool or
flatten, by exactly one relu, except the final classifier layer, which ends
the model.  The layers between two relus (or up to the end) form a *block*;
each block holds exactly one parameterized layer and maps onto one layer of
integrate-and-fire neurons after conversion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .data import LabeledDataset
from .errors import ConfigurationError, DimensionError, InputError

log = logging.getLogger(__name__)

KINDS = ("dense", "conv2d", "relu", "avgpool", "flatten")
PARAMETERIZED = ("dense", "conv2d")


@dataclass(frozen=True, eq=False)
class Layer:
    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    window: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAMETERIZED:
            if self.weights is None or self.bias is None:
                raise ConfigurationError(f"{self.kind} layer needs weights and bias")
            object.__setattr__(self, "weights", tensor.as_tensor(self.weights))
            object.__setattr__(self, "bias", tensor.as_tensor(self.bias))
            want_ndim = 2 if self.kind == "dense" else 4
            if self.weights.ndim != want_ndim:
                raise DimensionError(f"{self.kind} weights must be {want_ndim}-D, got shape {self.weights.shape}")
            if self.bias.shape != (self.weights.shape[0],):
                raise DimensionError(f"{self.kind} bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        elif self.weights is not None or self.bias is not None:
            raise ConfigurationError(f"{self.kind} layer carries no parameters")

    @classmethod
    def dense(cls, weights, bias=None) -> "Layer":
        weights = tensor.as_tensor(weights)
        if bias is None:
            bias = np.zeros(weights.shape[0])
        return cls("dense", weights, bias)

    @classmethod
    def conv2d(cls, kernels, bias=None, stride: int = 1, padding: int = 0) -> "Layer":
        kernels = tensor.as_tensor(kernels)
        if bias is None:
            bias = np.zeros(kernels.shape[0])
        return cls("conv2d", kernels, bias, stride=stride, padding=padding)

    @classmethod
    def relu(cls) -> "Layer":
        return cls("relu")

    @classmethod
    def avgpool(cls, window: int) -> "Layer":
        return cls("avgpool", window=window)

    @classmethod
    def flatten(cls) -> "Layer":
        return cls("flatten")

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAMETERIZED

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "dense":
            if in_shape != (self.weights.shape[1],):
                raise DimensionError(f"dense expects input ({self.weights.shape[1]},), got {in_shape}")
            return (self.weights.shape[0],)
        if self.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.weights.shape[1]:
                raise DimensionError(f"conv2d expects {self.weights.shape[1]} x h x w input, got {in_shape}")
            _, h, w = in_shape
            kh, kw = self.weights.shape[2:]
            if h + 2 * self.padding < kh or w + 2 * self.padding < kw:
                raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {in_shape}")
            return tensor.conv2d_output_shape(in_shape, self.weights.shape, self.stride, self.padding)
        if self.kind == "avgpool":
            if len(in_shape) != 3 or in_shape[1] % self.window or in_shape[2] % self.window:
                raise DimensionError(f"avgpool window {self.window} does not tile input {in_shape}")
            c, h, w = in_shape
            return (c, h // self.window, w // self.window)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape

    def apply(self, x: np.ndarray, with_bias: bool = True) -> np.ndarray:
        """Apply the layer to a batch ``x`` of shape ``(n, *in_shape)``."""
        if self.kind == "dense":
            out = tensor.rowwise_matmul(x, self.weights.T)
            return out + self.bias if with_bias else out
        if self.kind == "conv2d":
            out = tensor.conv2d(x, self.weights, self.stride, self.padding)
            return out + self.bias[None, :, None, None] if with_bias else out
        if self.kind == "relu":
            return tensor.relu(x)
        if self.kind == "avgpool":
            return tensor.avgpool2d(x, self.window)
        return x.reshape(x.shape[0], -1)

    def macs(self, in_shape: tuple[int, ...]) -> int:
        """Multiply-accumulates of one forward pass through this layer."""
        if self.kind == "dense":
            return int(self.weights.size)
        if self.kind == "conv2d":
            c_out, h_out, w_out = self.output_shape(in_shape)
            return int(c_out * h_out * w_out * np.prod(self.weights.shape[1:]))
        return 0


@dataclass(frozen=True)
class Block:
    """Layers feeding one neuron layer: linear ops around exactly one dense/conv."""

    layer_indices: tuple[int, ...]
    param_index: int
    in_shape: tuple[int, ...]
    shape: tuple[int, ...]  # neuron (pre-ReLU) shape
    final: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class AnnModel:
    """Immutable feed-forward ANN; validates layer ordering and shapes on construction."""

    def __init__(self, layers, input_shape):
        self.layers: tuple[Layer, ...] = tuple(layers)
        self.input_shape: tuple[int, ...] = tuple(int(d) for d in input_shape)
        if not self.layers:
            raise ConfigurationError("model has no layers")
        if any(d < 1 for d in self.input_shape):
            raise DimensionError(f"input shape must be positive, got {self.input_shape}")
        self.shapes: list[tuple[int, ...]] = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except DimensionError as exc:
                raise DimensionError(f"layer {i} ({layer.kind}): {exc}") from None
            self.shapes.append(shape)
        self.blocks: tuple[Block, ...] = tuple(self._split_blocks())

    def _split_blocks(self):
        blocks = []
        pending: list[int] = []
        in_shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind != "relu":
                pending.append(i)
                continue
            params = [j for j in pending if self.layers[j].parameterized]
            if len(params) != 1:
                raise ConfigurationError(
                    f"relu at layer {i} must follow exactly one dense/conv layer since the previous relu, found {len(params)}")
            blocks.append(Block(tuple(pending), params[0], in_shape, self.shapes[pending[-1]], False))
            in_shape = self.shapes[i]
            pending = []
        params = [j for j in pending if self.layers[j].parameterized]
        if len(params) != 1 or not self.layers[pending[-1]].parameterized:
            raise ConfigurationError("model must end with a single dense/conv classifier layer without relu")
        blocks.append(Block(tuple(pending), params[0], in_shape, self.shapes[pending[-1]], True))
        return blocks

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def output_size(self) -> int:
        return self.blocks[-1].size

    def apply_block(self, index: int, x: np.ndarray, with_bias: bool = True) -> np.ndarray:
        """Run the linear layers of block ``index`` on a batch (no relu)."""
        for j in self.blocks[index].layer_indices:
            x = self.layers[j].apply(x, with_bias)
        return x

    def batch_inputs(self, features) -> np.ndarray:
        """Reshape flat feature rows ``(N, d)`` to ``(N, *input_shape)``."""
        x = tensor.as_tensor(features)
        want = int(np.prod(self.input_shape))
        if x.ndim != 2 or x.shape[1] != want:
            raise DimensionError(f"expected feature rows of length {want} for input shape {self.input_shape}, got {x.shape}")
        return x.reshape((x.shape[0],) + self.input_shape)

    def total_macs(self) -> int:
        return sum(layer.macs(shape) for layer, shape in zip(self.layers, [self.input_shape] + self.shapes[:-1]))

    def block_macs(self, index: int) -> int:
        total = 0
        for j in self.blocks[index].layer_indices:
            in_shape = self.input_shape if j == 0 else self.shapes[j - 1]
            total += self.layers[j].macs(in_shape)
        return total


@dataclass
class Activations:
    pre: list[np.ndarray]
    post: list[np.ndarray]


def _split_input(model: AnnModel, x) -> tuple[np.ndarray, bool]:
    x = tensor.as_tensor(x)
    if x.shape == model.input_shape:
        return x[None], True
    if x.shape[1:] == model.input_shape:
        return x, False
    raise DimensionError(f"layer 0: input shape {x.shape} does not match model input {model.input_shape}")


def forward(model: AnnModel, x, capture: bool = False) -> tuple[np.ndarray, Activations | None]:
    """Forward pass on one sample or a batch.

    With ``capture`` the pre- and post-ReLU values of every block are returned
    too; for the final block the post value is ``relu(logits)``.
    """
    h, single = _split_input(model, x)
    pre, post = [], []
    for b, block in enumerate(model.blocks):
        for j in block.layer_indices:
            try:
                h = model.layers[j].apply(h)
            except DimensionError as exc:
                raise DimensionError(f"layer {j}: {exc}") from None
        if capture:
            pre.append(h)
            post.append(tensor.relu(h))
        if not block.final:
            h = post[-1] if capture else tensor.relu(h)
    if single:
        h = h[0]
        pre = [p[0] for p in pre]
        post = [p[0] for p in post]
    return h, (Activations(pre, post) if capture else None)


def predict(model: AnnModel, features) -> np.ndarray:
    out, _ = forward(model, model.batch_inputs(features))
    return np.argmax(out.reshape(out.shape[0], -1), axis=1)


def accuracy(model: AnnModel, dataset: LabeledDataset) -> float:
    return float(np.mean(predict(model, dataset.features) == dataset.labels))


@dataclass
class ActivationProfile:
    """Per-block calibration statistics.

    ``max_post_relu[l]`` is the largest post-ReLU activation of block ``l`` over
    the calibration set; it becomes that layer's base firing threshold.
    ``pre_relu`` optionally keeps the per-sample pre-ReLU tensors ``(N, *shape)``.
    """

    max_post_relu: list[float]
    num_samples: int
    pre_relu: list[np.ndarray] | None = None
    data_fingerprint: str = ""
    layer_shapes: list[tuple[int, ...]] = field(default_factory=list)


def record_profile(model: AnnModel, calib_set: LabeledDataset, store_pre_relu: bool = False,
                   batch_size: int = 512) -> ActivationProfile:
    if len(calib_set) == 0:
        raise InputError("calibration set is empty")
    x = model.batch_inputs(calib_set.features)
    maxima = [0.0] * model.L
    stored: list[list[np.ndarray]] = [[] for _ in range(model.L)]
    for start in range(0, x.shape[0], batch_size):
        _, acts = forward(model, x[start:start + batch_size], capture=True)
        for l in range(model.L):
            maxima[l] = max(maxima[l], float(acts.post[l].max()))
            if store_pre_relu:
                stored[l].append(acts.pre[l])
    return ActivationProfile(
        max_post_relu=maxima,
        num_samples=len(calib_set),
        pre_relu=[np.concatenate(s) for s in stored] if store_pre_relu else None,
        data_fingerprint=calib_set.fingerprint(),
        layer_shapes=[b.shape for b in model.blocks],
    )


def init_mlp(arch, seed: int) -> AnnModel:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
    arch = [int(w) for w in arch]
    if len(arch) < 2 or min(arch) < 1:
        raise InputError(f"arch needs at least two positive widths, got {arch}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer.dense(w, b))
        if i < len(arch) - 2:
            layers.append(Layer.relu())
    return AnnModel(layers, (arch[0],))


def train_toy_mlp(dataset: LabeledDataset, arch, epochs: int, lr: float, seed: int,
                  batch_size: int = 32) -> AnnModel:
    """Mini-batch SGD on softmax cross-entropy for a dense+relu MLP.

    Deterministic for a given seed: the same generator drives initialisation
    and the per-epoch shuffles.
    """
    if len(dataset) == 0:
        raise InputError("training set is empty")
    arch = [int(w) for w in arch]
    if arch and arch[0] != dataset.num_features:
        raise InputError(f"arch input width {arch[0]} != dataset feature count {dataset.num_features}")
    if arch and arch[-1] < dataset.num_classes:
        raise InputError(f"arch output width {arch[-1]} < number of classes {dataset.num_classes}")
    if epochs < 0 or batch_size < 1:
        raise InputError("epochs must be >= 0 and batch_size >= 1")
    model = init_mlp(arch, seed)
    if epochs == 0:
        return model
    W = [l.weights.copy() for l in model.layers if l.parameterized]
    B = [l.bias.copy() for l in model.layers if l.parameterized]
    rng = np.random.default_rng([seed, 1])
    X, y = dataset.features, dataset.labels
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            hs = [X[idx]]
            for k in range(len(W)):
                z = hs[-1] @ W[k].T + B[k]
                hs.append(np.maximum(z, 0.0) if k < len(W) - 1 else z)
            logits = hs[-1]
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), y[idx]] -= 1.0
            grad = p / len(idx)
            for k in range(len(W) - 1, -1, -1):
                gw = grad.T @ hs[k]
                gb = grad.sum(axis=0)
                if k > 0:
                    grad = (grad @ W[k]) * (hs[k] > 0)
                W[k] -= lr * gw
                B[k] -= lr * gb
    layers = []
    for k in range(len(W)):
        layers.append(Layer.dense(W[k], B[k]))
        if k < len(W) - 1:
            layers.append(Layer.relu())
    trained = AnnModel(layers, model.input_shape)
    log.info("trained %s for %d epochs: train accuracy %.4f", arch, epochs, accuracy(trained, dataset))
    return trained
