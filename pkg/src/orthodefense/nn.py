"""Layers, models, Xavier initialization, cross-entropy loss and SGD."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Variable

__all__ = [
    "LayerSpec",
    "InitSpec",
    "OptimizerSpec",
    "Model",
    "ArchitectureError",
    "dense",
    "conv",
    "RELU",
    "FLATTEN",
    "mlp_arch",
    "cnn_arch",
    "build_model",
    "forward",
    "loss",
    "predict",
    "accuracy",
    "SGD",
    "sgd_step",
]


class ArchitectureError(ValueError):
    """A layer list whose shapes do not chain."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: tuple[int, ...] = ()

    def __post_init__(self):
        arity = {"dense": 2, "conv2d": 5, "relu": 0, "flatten": 0}
        if self.kind not in arity:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        if len(self.args) != arity[self.kind]:
            raise ArchitectureError(f"{self.kind} takes {arity[self.kind]} arguments, got {self.args}")
        if self.kind == "conv2d":
            bad = any(a <= 0 for a in self.args[:4]) or self.args[4] < 0
        else:
            bad = any(a <= 0 for a in self.args)
        if bad:
            raise ArchitectureError(f"{self.kind}{self.args}: extents must be positive")

    def describe(self) -> str:
        return " ".join([self.kind, *map(str, self.args)])

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        kind, *args = text.split()
        return cls(kind, tuple(int(a) for a in args))


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out))


def conv(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", (in_ch, out_ch, kernel, stride, padding))


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


def mlp_arch(input_shape, classes: int, hidden: int = 128) -> list[LayerSpec]:
    d = int(np.prod(input_shape))
    return [FLATTEN, dense(d, hidden), RELU, dense(hidden, classes)]


def cnn_arch(input_shape, classes: int) -> list[LayerSpec]:
    c, h, w = input_shape
    return [conv(c, 8), RELU, conv(8, 16), RELU, FLATTEN, dense(16 * h * w, classes)]


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "xavier-uniform"
    seed: int = 0

    def __post_init__(self):
        if self.scheme != "xavier-uniform":
            raise ValueError(f"unsupported init scheme {self.scheme!r}")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    lr: float = 0.002
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self):
        if self.kind != "sgd":
            raise ValueError(f"unsupported optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")


def _chain(layers, input_shape):
    """Walk the layer list, returning per-layer output shapes (excluding batch)."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            n_in, n_out = layer.args
            if shape != (n_in,):
                raise ArchitectureError(
                    f"layer {i} ({layer.describe()}) expects input ({n_in},), previous output is {shape}"
                )
            shape = (n_out,)
        elif layer.kind == "conv2d":
            c_in, c_out, k, s, p = layer.args
            if len(shape) != 3 or shape[0] != c_in:
                raise ArchitectureError(
                    f"layer {i} ({layer.describe()}) expects {c_in} input channels, previous output is {shape}"
                )
            h = (shape[1] + 2 * p - k) // s + 1
            w = (shape[2] + 2 * p - k) // s + 1
            if h <= 0 or w <= 0:
                raise ArchitectureError(f"layer {i} ({layer.describe()}) shrinks {shape} to nothing")
            shape = (c_out, h, w)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    return shapes


@dataclass
class Model:
    """An ordered layer stack and its parameters.

    ``params`` maps ``"layer{i}.weight"`` / ``"layer{i}.bias"`` to float64
    arrays.  Dense weights are (in, out); conv weights are (out, in, k, k).
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = _chain(self.layers, self.input_shape)
        if not shapes or len(shapes[-1]) != 1:
            raise ArchitectureError("the last layer must produce a flat logit vector")
        expected = dict(_param_shapes(self.layers))
        if set(expected) != set(self.params):
            raise ArchitectureError(
                f"parameters {sorted(self.params)} do not match architecture {sorted(expected)}"
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ArchitectureError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def num_classes(self) -> int:
        return _chain(self.layers, self.input_shape)[-1][0]

    @property
    def descriptor(self) -> str:
        lines = ["input " + " ".join(map(str, self.input_shape))]
        lines += [layer.describe() for layer in self.layers]
        return "\n".join(lines)

    @property
    def arch_id(self) -> str:
        return hashlib.sha256(self.descriptor.encode()).hexdigest()[:16]

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def param_names(self) -> list[str]:
        return [name for name, _ in _param_shapes(self.layers)]

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        return Model(self.layers, self.input_shape, {k: np.array(v, dtype=np.float64) for k, v in params.items()})

    def bind(self, graph: Graph) -> dict[str, Variable]:
        """Register every parameter as a leaf of ``graph``."""
        return {name: graph.leaf(self.params[name]) for name in self.param_names()}

    @classmethod
    def from_descriptor(cls, text: str, params: Mapping[str, np.ndarray]) -> "Model":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("input "):
            raise ArchitectureError("architecture descriptor must start with an 'input' line")
        input_shape = tuple(int(s) for s in lines[0].split()[1:])
        layers = [LayerSpec.parse(ln) for ln in lines[1:]]
        return cls(layers, input_shape, dict(params))


def _param_shapes(layers):
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            n_in, n_out = layer.args
            yield f"layer{i}.weight", (n_in, n_out)
            yield f"layer{i}.bias", (n_out,)
        elif layer.kind == "conv2d":
            c_in, c_out, k, _, _ = layer.args
            yield f"layer{i}.weight", (c_out, c_in, k, k)
            yield f"layer{i}.bias", (c_out,)


def build_model(layers, init: InitSpec = InitSpec(), input_shape=None) -> Model:
    """Assemble a model with Xavier-uniform weights and zero biases.

    ``input_shape`` (excluding the batch axis) defaults to ``(in,)`` when the
    first layer is dense.
    """
    layers = list(layers)
    if input_shape is None:
        if not layers or layers[0].kind != "dense":
            raise ArchitectureError("input_shape is required unless the first layer is dense")
        input_shape = (layers[0].args[0],)
    rng = np.random.default_rng(init.seed)
    params = {}
    for name, shape in _param_shapes(layers):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            field_size = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * field_size, shape[0] * field_size
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape)
    model = Model(layers, input_shape, params)
    if model.num_classes < 2:
        raise ArchitectureError("a classifier needs at least two output classes")
    return model


def forward(model: Model, batch, params: Mapping[str, Variable] | None = None) -> Variable:
    """Logits of shape (batch, K).

    ``batch`` may be an array or a Variable.  When neither the batch nor
    ``params`` is on a graph, a fresh graph is created with the batch and all
    parameters as leaves.
    """
    if params is None:
        if isinstance(batch, Variable) and batch.graph is not None:
            params = {k: ad.constant(v) for k, v in model.params.items()}
        else:
            graph = Graph()
            batch = graph.leaf(batch.value if isinstance(batch, Variable) else batch)
            params = model.bind(graph)
    x = ad.as_variable(batch)
    expected = model.input_shape
    if x.shape[1:] != expected:
        raise ad.ShapeError(f"forward: input shape {x.shape[1:]} does not match model input {expected}")
    for i, layer in enumerate(model.layers):
        if layer.kind == "dense":
            x = ad.add(ad.matmul(x, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        elif layer.kind == "conv2d":
            _, _, _, stride, padding = layer.args
            x = ad.conv2d(x, params[f"layer{i}.weight"], params[f"layer{i}.bias"], stride, padding)
        elif layer.kind == "relu":
            x = ad.relu(x)
        elif layer.kind == "flatten":
            x = ad.reshape(x, (x.shape[0], -1))
    return x


def loss(logits: Variable, labels) -> Variable:
    """Mean softmax cross-entropy over the batch."""
    return ad.softmax_cross_entropy(logits, labels, reduction="mean")


def predict(model: Model, images, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per image; ties resolve to the lowest index."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    with ad.no_record():
        for start in range(0, len(images), batch_size):
            logits = forward(model, ad.constant(images[start : start + batch_size]), _const_params(model))
            out.append(np.argmax(logits.value, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _const_params(model):
    return {k: ad.constant(v) for k, v in model.params.items()}


def accuracy(model: Model, dataset) -> float:
    """Fraction of argmax-correct predictions on ``dataset`` (images, labels)."""
    images, labels = _unpack(dataset)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, images) == labels))


def _unpack(dataset):
    if hasattr(dataset, "images"):
        return dataset.images, np.asarray(dataset.labels)
    images, labels = dataset
    return images, np.asarray(labels)


class SGD:
    """Mini-batch gradient descent with heavy-ball momentum.

    ``v <- momentum * v + grad``; ``theta <- theta - lr * v`` with ``v`` starting at zero.
    """

    def __init__(self, spec: OptimizerSpec):
        self.spec = spec
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model: Model, grads: Mapping[str, np.ndarray]) -> Model:
        if set(grads) != set(model.params):
            raise KeyError(f"gradient keys {sorted(grads)} do not match parameters {sorted(model.params)}")
        new = {}
        for name, theta in model.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if self.spec.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.spec.momentum * v + g
                self.velocity[name] = v
            else:
                v = g
            new[name] = theta - self.spec.lr * v
        return Model(model.layers, model.input_shape, new)


def sgd_step(model: Model, grads: Mapping[str, np.ndarray], opt: OptimizerSpec, state: SGD | None = None):
    """One optimizer step; pass the returned state back in to keep momentum."""
    state = state or SGD(opt)
    return state.step(model, grads), state
