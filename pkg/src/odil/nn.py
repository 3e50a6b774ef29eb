"""A small numpy network library: layers, loss, SGD with momentum, cosine LR.

Activations use NHWC layout for 2-D data and ``(N, F)`` for flat data, in the
model's dtype (float64 unless asked otherwise). Every layer keeps whatever it
needs for the backward pass only when the forward pass is asked to retain it.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .batchnorm import (
    BNState,
    bn_backward_train,
    bn_forward_eval,
    bn_forward_train,
    check_finite,
)
from .errors import ConfigError, NumericError, ShapeError

LAYER_KINDS = ("dense", "conv2d", "batchnorm", "relu", "gap", "classifier")


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor.

    ``size`` is the output width for dense/conv2d/classifier and the channel
    count for batchnorm; relu and gap take no size.
    """

    kind: str
    size: int | None = None
    kernel: int = 3

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.size is not None:
            d["size"] = self.size
        if self.kind == "conv2d":
            d["kernel"] = self.kernel
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], d.get("size"), d.get("kernel", 3))


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    num_classes: int
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shapes()

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without batch dim); validates the stack."""
        if not self.layers or self.layers[-1].kind != "classifier":
            raise ConfigError("the last layer must be the classifier")
        if sum(spec.kind == "classifier" for spec in self.layers) != 1:
            raise ConfigError("exactly one classifier layer is allowed")
        shape = self.input_shape
        if any(s < 1 for s in shape):
            raise ConfigError(f"invalid input shape {shape}")
        shapes = []
        for i, spec in enumerate(self.layers):
            name = f"{i}:{spec.kind}"
            if spec.kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
            if spec.kind in ("dense", "classifier"):
                if len(shape) != 1:
                    raise ShapeError(f"needs flat input, got {shape}", name)
                shape = (self._positive(spec, name),)
            elif spec.kind == "conv2d":
                if len(shape) != 3:
                    raise ShapeError(f"needs HWC input, got {shape}", name)
                k = spec.kernel
                h, w, _ = shape
                if h < k or w < k:
                    raise ShapeError(f"input {shape} smaller than kernel {k}", name)
                shape = (h - k + 1, w - k + 1, self._positive(spec, name))
            elif spec.kind == "batchnorm":
                if spec.size != shape[-1]:
                    raise ShapeError(f"records {spec.size} channels but receives {shape[-1]}", name)
            elif spec.kind == "gap":
                if len(shape) != 3:
                    raise ShapeError(f"needs HWC input, got {shape}", name)
                shape = (shape[-1],)
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"classifier outputs {shape}, expected ({self.num_classes},)", "classifier")
        return shapes

    @staticmethod
    def _positive(spec, name):
        if spec.size is None or spec.size < 1:
            raise ConfigError(f"layer {name} needs a positive size")
        return spec.size

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [s.to_dict() for s in self.layers],
            "num_classes": self.num_classes,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            tuple(d["input_shape"]),
            tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            d["num_classes"],
            d.get("bn_eps", 1e-5),
            d.get("bn_momentum", 0.1),
        )


def reference_config(widths=(16, 32), input_shape=(16, 16, 1), num_classes=10, kernel=3) -> ModelConfig:
    """``len(widths)`` x [conv -> batchnorm -> relu] -> global average pool -> classifier."""
    layers = []
    for w in widths:
        layers += [LayerSpec("conv2d", w, kernel), LayerSpec("batchnorm", w), LayerSpec("relu")]
    layers += [LayerSpec("gap"), LayerSpec("classifier", num_classes)]
    return ModelConfig(tuple(input_shape), tuple(layers), num_classes)


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = ""
    trainable = ()

    def __init__(self, name):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train, retain):
        raise NotImplementedError

    def backward(self, dy, need_input_grad=True):
        """Returns (input gradient or None, {param key: gradient})."""
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"layer {self.name}: backward called without a retained forward pass")
        cache, self._cache = self._cache, None
        return cache


class Dense(Layer):
    kind = "dense"
    trainable = ("weight", "bias")

    def __init__(self, name, fan_in, units, rng, gain=6.0):
        super().__init__(name)
        bound = math.sqrt(gain / fan_in)
        self.params["weight"] = rng.uniform(-bound, bound, size=(fan_in, units))
        self.params["bias"] = np.zeros(units)

    def forward(self, x, train, retain):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"expects (N, {w.shape[0]}), got {x.shape}", self.name)
        if retain:
            self._cache = x
        return x @ w + self.params["bias"]

    def backward(self, dy, need_input_grad=True):
        x = self._take_cache()
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        dx = dy @ self.params["weight"].T if need_input_grad else None
        return dx, grads


class Classifier(Dense):
    kind = "classifier"

    def __init__(self, name, fan_in, units, rng):
        super().__init__(name, fan_in, units, rng, gain=1.0)


class Conv2D(Layer):
    """'Valid' (unpadded) stride-1 convolution on NHWC input via im2col."""

    kind = "conv2d"
    trainable = ("weight", "bias")

    def __init__(self, name, in_channels, out_channels, kernel, rng):
        super().__init__(name)
        fan_in = kernel * kernel * in_channels
        bound = math.sqrt(6.0 / fan_in)
        self.kernel = kernel
        self.params["weight"] = rng.uniform(-bound, bound, size=(kernel, kernel, in_channels, out_channels))
        self.params["bias"] = np.zeros(out_channels)

    def _cols(self, x):
        k = self.kernel
        n, h, w, c = x.shape
        win = sliding_window_view(x, (k, k), axis=(1, 2))  # (N, Ho, Wo, C, k, k)
        ho, wo = h - k + 1, w - k + 1
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c), (n, ho, wo)

    def forward(self, x, train, retain):
        w = self.params["weight"]
        k, _, cin, cout = w.shape
        if x.ndim != 4 or x.shape[3] != cin or x.shape[1] < k or x.shape[2] < k:
            raise ShapeError(f"expects (N, H>={k}, W>={k}, {cin}), got {x.shape}", self.name)
        cols, (n, ho, wo) = self._cols(x)
        out = cols @ w.reshape(-1, cout) + self.params["bias"]
        if retain:
            self._cache = (cols, x.shape)
        return out.reshape(n, ho, wo, cout)

    def backward(self, dy, need_input_grad=True):
        cols, xshape = self._take_cache()
        w = self.params["weight"]
        k, _, cin, cout = w.shape
        g = dy.reshape(-1, cout)
        grads = {"weight": (cols.T @ g).reshape(w.shape), "bias": g.sum(axis=0)}
        if not need_input_grad:
            return None, grads
        n, h, wd, _ = xshape
        ho, wo = h - k + 1, wd - k + 1
        dx = np.zeros(xshape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + ho, j : j + wo, :] += (g @ w[i, j].T).reshape(n, ho, wo, cin)
        return dx, grads


class BatchNorm(Layer):
    kind = "batchnorm"
    trainable = ("gamma", "beta")

    def __init__(self, name, channels, eps, momentum):
        super().__init__(name)
        self.state = BNState.fresh(channels, eps, momentum)

    # gamma/beta live in the BNState; expose them through ``params`` so the
    # optimizer and checkpoints see them like any other parameter.
    @property
    def params(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    @params.setter
    def params(self, value):
        if value:
            self.state.gamma, self.state.beta = value["gamma"], value["beta"]

    def forward(self, x, train, retain):
        try:
            if train:
                y, cache = bn_forward_train(self.state, x, return_cache=True)
                if retain:
                    self._cache = cache
                return y
            return bn_forward_eval(self.state, x)
        except ShapeError as err:
            raise ShapeError(str(err), self.name) from None

    def backward(self, dy, need_input_grad=True):
        cache = self._take_cache()
        dx, dgamma, dbeta = bn_backward_train(self.state, cache, dy)
        return dx, {"gamma": dgamma, "beta": dbeta}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, retain):
        mask = x > 0
        if retain:
            self._cache = mask
        return x * mask

    def backward(self, dy, need_input_grad=True):
        return dy * self._take_cache(), {}


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, train, retain):
        if x.ndim != 4:
            raise ShapeError(f"expects NHWC input, got {x.shape}", self.name)
        if retain:
            self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy, need_input_grad=True):
        n, h, w, c = self._take_cache()
        return np.broadcast_to(dy[:, None, None, :] / (h * w), (n, h, w, c)).copy(), {}


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype="float64"):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ConfigError(f"unsupported dtype {dtype}")
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        shape = config.input_shape
        for i, (spec, out_shape) in enumerate(zip(config.layers, config.output_shapes())):
            name = f"{i}:{spec.kind}"
            if spec.kind == "dense":
                layer = Dense(name, shape[0], spec.size, rng)
            elif spec.kind == "classifier":
                layer = Classifier(name, shape[0], spec.size, rng)
            elif spec.kind == "conv2d":
                layer = Conv2D(name, shape[-1], spec.size, spec.kernel, rng)
            elif spec.kind == "batchnorm":
                layer = BatchNorm(name, spec.size, config.bn_eps, config.bn_momentum)
            elif spec.kind == "relu":
                layer = ReLU(name)
            else:
                layer = GlobalAvgPool(name)
            self.layers.append(layer)
            shape = out_shape
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                st = layer.state
                for key in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(st, key, getattr(st, key).astype(self.dtype))
            else:
                layer.params = {k: v.astype(self.dtype) for k, v in layer.params.items()}

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable parameters keyed ``"<index>:<kind>.<key>"`` (live references)."""
        return {f"{layer.name}.{k}": layer.params[k] for layer in self.layers for k in layer.trainable}

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        layer_name, key = name.rsplit(".", 1)
        layer = next(l for l in self.layers if l.name == layer_name)
        if isinstance(layer, BatchNorm):
            setattr(layer.state, key, value)
        else:
            layer.params[key] = value

    def bn_states(self) -> list[BNState]:
        return [layer.state for layer in self.layers if isinstance(layer, BatchNorm)]

    @property
    def classifier_index(self) -> int:
        return len(self.layers) - 1

    def classifier_parameter_names(self) -> list[str]:
        prefix = self.layers[self.classifier_index].name + "."
        return [n for n in self.parameters() if n.startswith(prefix)]

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            layer._cache = None
        return clone

    # -- passes -------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval", retain: bool | None = None) -> np.ndarray:
        """Logits for a batch. ``mode='train'`` uses batch moments in BN and
        updates running statistics; ``retain`` (default: train mode) keeps the
        intermediates ``backward`` needs."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        retain = train if retain is None else retain
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != len(self.config.input_shape) + 1 or x.shape[1:] != self.config.input_shape or x.shape[0] < 1:
            raise ShapeError(f"expected (N>=1, {', '.join(map(str, self.config.input_shape))}), got {x.shape}", "input")
        for layer in self.layers:
            x = layer.forward(x, train, retain)
        return check_finite(x, "logits")

    def backward(self, dlogits: np.ndarray, stop_at: int = 0) -> dict[str, np.ndarray]:
        """Parameter gradients for layers ``stop_at`` .. end from the last retained forward."""
        grads = {}
        g = np.asarray(dlogits, dtype=self.dtype)
        for idx in range(len(self.layers) - 1, stop_at - 1, -1):
            layer = self.layers[idx]
            g, pgrads = layer.backward(g, need_input_grad=idx > stop_at)
            for k, v in pgrads.items():
                grads[f"{layer.name}.{k}"] = v
        for layer in self.layers[:stop_at]:
            layer._cache = None
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size], "eval").argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# loss, optimizer, schedule


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptimizerState) -> dict[str, np.ndarray]:
    """Classical momentum: v <- m v + g; p <- p - lr v. Returns new arrays."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape}", name)
    updated = {}
    for name, g in grads.items():
        if opt.momentum > 0:
            v = opt.momentum * opt.velocity.get(name, np.zeros_like(g)) + g
            opt.velocity[name] = v
            updated[name] = params[name] - opt.lr * v
        else:
            updated[name] = params[name] - opt.lr * g
    return updated


def apply_sgd(model: Model, grads: dict[str, np.ndarray], opt: OptimizerState) -> None:
    for name, value in sgd_update(model.parameters(), grads, opt).items():
        model.set_parameter(name, value)


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "cosine"
    lr_max: float = 1e-4
    lr_min: float = 0.0
    total_epochs: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max and lr_max > 0")


def cosine_lr(epoch: int, schedule: LRSchedule) -> float:
    if schedule.total_epochs <= 0:
        raise ConfigError("total_epochs must be positive")
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if schedule.kind == "constant":
        return schedule.lr_max
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (
        1.0 + math.cos(math.pi * epoch / schedule.total_epochs)
    )
