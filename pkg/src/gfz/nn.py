"""Layer and model abstractions for the fine-tuning engine.

A "layer" is one parameter-bearing module (a conv or dense layer together
with its bias); activations and pooling carry no layer index. Layers are
grouped into functional blocks (stem, residual blocks, classifier) that the
block-wise freezing strategies operate on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, parameter


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


@dataclass
class LayerHandle:
    """One parameter-bearing layer: params, freeze flag, per-layer rates."""

    index: int  # 1-based position in the model
    name: str
    params: list[Tensor]
    frozen: bool = False
    base_lr: float = 1e-4
    effective_lr: float = 1e-4

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def flat_weights(self) -> np.ndarray:
        """All parameters of the layer concatenated and flattened."""
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    def flat_grads(self) -> np.ndarray | None:
        if any(p.grad is None for p in self.params):
            return None
        return np.concatenate([p.grad.reshape(-1) for p in self.params])


@dataclass
class BlockPartition:
    """Ordered disjoint blocks of layer indices covering the whole model."""

    blocks: list[list[int]]
    names: list[str]

    def validate(self, n_layers: int) -> None:
        seen: set[int] = set()
        for block in self.blocks:
            if not block:
                raise ConfigError("partition: empty block")
            for i in block:
                if i < 1 or i > n_layers or i in seen:
                    raise ConfigError(f"partition: bad or duplicate layer index {i}")
                seen.add(i)
        if len(seen) != n_layers:
            raise ConfigError("partition: blocks do not cover all layers")
        if len(self.blocks) > n_layers:
            raise ConfigError("partition: more blocks than layers")
        if len(self.names) != len(self.blocks):
            raise ConfigError("partition: names/blocks length mismatch")

    def block_of(self, layer_index: int) -> int:
        for j, block in enumerate(self.blocks):
            if layer_index in block:
                return j
        raise ConfigError(f"partition: layer {layer_index} not in any block")


@dataclass
class Model:
    """Ordered layers plus a block partition; the classifier is last."""

    arch: str  # "mini-resnet" | "mlp"
    layers: list[LayerHandle]
    partition: BlockPartition
    class_count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.partition.validate(len(self.layers))
        if self.classifier_index not in self.partition.blocks[-1]:
            raise ConfigError("model: classifier must belong to the last block")

    @property
    def classifier_index(self) -> int:
        return len(self.layers)

    @property
    def classifier(self) -> LayerHandle:
        return self.layers[-1]

    def layer(self, index: int) -> LayerHandle:
        if index < 1 or index > len(self.layers):
            raise ConfigError(f"model: unknown layer index {index}")
        return self.layers[index - 1]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def trainable_indices(self) -> list[int]:
        return [l.index for l in self.layers if not l.frozen]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        if self.arch == "mini-resnet":
            return _forward_mini_resnet(self, tape, x)
        if self.arch == "mlp":
            return _forward_mlp(self, tape, x)
        raise ConfigError(f"model: unknown architecture '{self.arch}'")

    def clone(self) -> "Model":
        copy = Model(
            arch=self.arch,
            layers=[
                LayerHandle(
                    index=l.index,
                    name=l.name,
                    params=[Tensor(p.data.copy(), requires_grad=p.requires_grad, name=p.name)
                            for p in l.params],
                    frozen=l.frozen,
                    base_lr=l.base_lr,
                    effective_lr=l.effective_lr,
                )
                for l in self.layers
            ],
            partition=BlockPartition([list(b) for b in self.partition.blocks], list(self.partition.names)),
            class_count=self.class_count,
            meta=dict(self.meta),
        )
        return copy


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_layer(rng, index, name, c_in, c_out, k=3) -> LayerHandle:
    w = parameter(_he_uniform(rng, (c_out, c_in, k, k), c_in * k * k), name=f"{name}.w")
    b = parameter(np.zeros(c_out, dtype=np.float32), name=f"{name}.b")
    return LayerHandle(index=index, name=name, params=[w, b])


def _dense_layer(rng, index, name, n_in, n_out) -> LayerHandle:
    w = parameter(_he_uniform(rng, (n_in, n_out), n_in), name=f"{name}.w")
    b = parameter(np.zeros(n_out, dtype=np.float32), name=f"{name}.b")
    return LayerHandle(index=index, name=name, params=[w, b])


def build_mini_resnet(class_count: int, channel_widths, seed: int, in_channels: int = 3) -> Model:
    """Stem conv, residual blocks (2 convs each, parameter-free shortcut),
    global average pool, dense classifier.

    Block j runs at width[j]; when a block widens the network the shortcut
    zero-pads the channel axis instead of adding projection parameters, so
    widths must be non-decreasing. 2x2 max pools sit after the stem and
    after every block except the last.
    """
    widths = list(channel_widths)
    if class_count < 1:
        raise ConfigError("build_mini_resnet: class_count must be >= 1")
    if not widths or any(w < 1 for w in widths):
        raise ConfigError("build_mini_resnet: channel_widths must be non-empty positive ints")
    if any(widths[i] > widths[i + 1] for i in range(len(widths) - 1)):
        raise ConfigError("build_mini_resnet: channel_widths must be non-decreasing")

    rng = np.random.default_rng(np.random.PCG64(seed))
    layers: list[LayerHandle] = []
    blocks: list[list[int]] = []
    names: list[str] = []

    layers.append(_conv_layer(rng, 1, "stem", in_channels, widths[0]))
    blocks.append([1])
    names.append("stem")

    idx = 2
    for j, w_out in enumerate(widths):
        w_in = widths[j - 1] if j > 0 else widths[0]
        layers.append(_conv_layer(rng, idx, f"block{j + 1}_conv1", w_in, w_out))
        layers.append(_conv_layer(rng, idx + 1, f"block{j + 1}_conv2", w_out, w_out))
        blocks.append([idx, idx + 1])
        names.append(f"block{j + 1}")
        idx += 2

    layers.append(_dense_layer(rng, idx, "classifier", widths[-1], class_count))
    blocks.append([idx])
    names.append("classifier")

    return Model(
        arch="mini-resnet",
        layers=layers,
        partition=BlockPartition(blocks, names),
        class_count=class_count,
        meta={"widths": widths, "in_channels": in_channels},
    )


def build_mlp(class_count: int, hidden_widths, input_dim: int, seed: int) -> Model:
    """Flatten, dense+relu hidden layers, dense classifier; one block per layer."""
    widths = list(hidden_widths)
    if class_count < 1:
        raise ConfigError("build_mlp: class_count must be >= 1")
    if input_dim < 1:
        raise ConfigError("build_mlp: input_dim must be >= 1")
    rng = np.random.default_rng(np.random.PCG64(seed))
    layers = []
    n_in = input_dim
    for i, w in enumerate(widths):
        layers.append(_dense_layer(rng, i + 1, f"hidden{i + 1}", n_in, w))
        n_in = w
    layers.append(_dense_layer(rng, len(widths) + 1, "classifier", n_in, class_count))
    blocks = [[l.index] for l in layers]
    names = [l.name for l in layers]
    return Model(
        arch="mlp",
        layers=layers,
        partition=BlockPartition(blocks, names),
        class_count=class_count,
        meta={"widths": widths, "input_dim": input_dim},
    )


def _forward_mini_resnet(model: Model, tape: Tape, x: Tensor) -> Tensor:
    widths = model.meta["widths"]
    it = iter(model.layers)
    stem = next(it)
    h = tape.relu(tape.bias_add(tape.conv2d(x, stem.params[0], padding=1), stem.params[1]))
    h = tape.max_pool2d(h)
    for j, w_out in enumerate(widths):
        conv1 = next(it)
        conv2 = next(it)
        a = tape.relu(tape.bias_add(tape.conv2d(h, conv1.params[0], padding=1), conv1.params[1]))
        z = tape.bias_add(tape.conv2d(a, conv2.params[0], padding=1), conv2.params[1])
        shortcut = h if h.shape[1] == w_out else tape.pad_channels(h, w_out)
        h = tape.relu(tape.add(z, shortcut))
        if j < len(widths) - 1:
            h = tape.max_pool2d(h)
    pooled = tape.global_avg_pool(h)
    fc = next(it)
    return tape.bias_add(tape.matmul(pooled, fc.params[0]), fc.params[1])


def _forward_mlp(model: Model, tape: Tape, x: Tensor) -> Tensor:
    n = x.shape[0]
    h = tape.reshape(x, (n, x.size // n)) if x.data.ndim != 2 else x
    for layer in model.layers[:-1]:
        h = tape.relu(tape.bias_add(tape.matmul(h, layer.params[0]), layer.params[1]))
    fc = model.layers[-1]
    return tape.bias_add(tape.matmul(h, fc.params[0]), fc.params[1])


def replace_classifier(model: Model, n_out: int, seed: int) -> Model:
    """Swap in a fresh seeded classifier for n_out classes and freeze the rest.

    The new head is always re-initialized, even when n_out matches the old
    class count; all other layers keep their parameters bit-exact, are
    frozen, and get effective_lr 0 until something unfreezes them.
    """
    if n_out < 1:
        raise ConfigError("replace_classifier: n_out must be >= 1")
    old = model.classifier
    if model.arch == "mini-resnet":
        n_in = model.meta["widths"][-1]
    else:
        n_in = old.params[0].shape[0]
    rng = np.random.default_rng(np.random.PCG64(seed))
    fresh = _dense_layer(rng, old.index, "classifier", n_in, n_out)
    fresh.base_lr = old.base_lr
    model.layers[-1] = fresh
    model.class_count = n_out
    set_frozen(model, [l.index for l in model.layers[:-1]], True)
    set_frozen(model, [fresh.index], False)
    return model


def set_frozen(model: Model, layer_indices, flag: bool) -> None:
    """Set freeze flags; frozen layers are excluded from optimizer updates
    and their effective learning rate is pinned to 0."""
    for i in layer_indices:
        layer = model.layer(i)
        layer.frozen = flag
        for p in layer.params:
            p.requires_grad = not flag
        layer.effective_lr = 0.0 if flag else layer.base_lr


def set_base_lr(model: Model, lr: float) -> None:
    if lr < 0:
        raise ConfigError("set_base_lr: lr must be >= 0")
    for layer in model.layers:
        layer.base_lr = lr
        layer.effective_lr = 0.0 if layer.frozen else lr


def multilabel_bce(tape: Tape, logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over batch and classes of the stable binary cross-entropy."""
    return tape.bce_with_logits(logits, targets)


def predict_scores(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Forward without recording; returns post-sigmoid scores (N, classes)."""
    outs = []
    for start in range(0, x.shape[0], batch_size):
        xb = Tensor(x[start:start + batch_size])
        tape = Tape(record=False)
        logits = model.forward(tape, xb)
        outs.append(1.0 / (1.0 + np.exp(-logits.data.astype(np.float64))))
    return np.concatenate(outs, axis=0)
