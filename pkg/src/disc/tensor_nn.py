"""A small deterministic CNN core: conv, batch norm, ReLU, max-pool, GAP, linear.

Tensors are plain numpy arrays in NCHW layout. Experiments run in float32;
``Model.astype(np.float64)`` gives a copy for gradient checking.

Parameters live in ``Model.params`` (trainable) and ``Model.buffers``
(batch-norm running statistics), both keyed ``"<layer>.<name>"`` and ordered
by topology.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import batchnorm as bn
from .binio import Reader, Writer, fnv1a_64
from .errors import (
    ConfigError,
    DegenerateBatchError,
    FormatError,
    LabelError,
    NumericError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"DISCMODL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: bool = True


def _default_blocks() -> tuple[ConvBlock, ...]:
    return (ConvBlock(16), ConvBlock(32), ConvBlock(64))


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    height: int = 32
    width: int = 32
    blocks: tuple[ConvBlock, ...] = field(default_factory=_default_blocks)
    head_width: int = 0  # > 0 inserts a hidden linear + ReLU before the classifier
    n_classes: int = 8
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        d = json.loads(text)
        d["blocks"] = tuple(ConvBlock(**b) for b in d["blocks"])
        return cls(**d)


# ---------------------------------------------------------------- layers


class Layer:
    kind = ""
    params: tuple[str, ...] = ()
    buffers: tuple[str, ...] = ()

    def __init__(self, key: str):
        self.key = key

    def pkey(self, name: str) -> str:
        return f"{self.key}.{name}"

    def forward(self, x, model: Model, training: bool):
        """Return ``(y, cache)``; cache is whatever ``backward`` needs."""
        raise NotImplementedError

    def backward(self, dy, cache, model: Model, need_dx: bool = True):
        """Return ``(dx, {param_key: grad})``."""
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv"
    params = ("weight",)

    def __init__(self, key, in_channels, out_channels, kernel, stride, padding):
        super().__init__(key)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def _cols(self, x):
        # channel-major columns (C*k*k, N*OH*OW), filled by k*k slice copies
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        n, c, hp, wp = xp.shape
        oh, ow = (hp - k) // s + 1, (wp - k) // s + 1
        cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
        xt = xp.transpose(1, 0, 2, 3)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xt[:, :, i : i + s * oh : s, j : j + s * ow : s]
        return cols.reshape(c * k * k, n * oh * ow), (n, oh, ow, xp.shape)

    def forward(self, x, model, training):
        w = model.params[self.pkey("weight")]
        cols, (n, oh, ow, xp_shape) = self._cols(x)
        out = w.reshape(self.out_channels, -1) @ cols
        y = np.ascontiguousarray(out.reshape(self.out_channels, n, oh, ow).transpose(1, 0, 2, 3))
        return y, (cols, n, oh, ow, xp_shape)

    def backward(self, dy, cache, model, need_dx=True):
        cols, n, oh, ow, xp_shape = cache
        w = model.params[self.pkey("weight")]
        dyr = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(self.out_channels, -1)
        grads = {self.pkey("weight"): (dyr @ cols.T).reshape(w.shape)}
        if not need_dx:
            return None, grads
        k, s, p = self.kernel, self.stride, self.padding
        dcols = (w.reshape(self.out_channels, -1).T @ dyr).reshape(self.in_channels, k, k, n, oh, ow)
        dxp = np.zeros((xp_shape[1], xp_shape[0], xp_shape[2], xp_shape[3]), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, i, j]
        dx = dxp.transpose(1, 0, 2, 3)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dx), grads


class BatchNorm2d(Layer):
    kind = "bn"
    params = ("gamma", "beta")
    buffers = ("running_mean", "running_var")

    def __init__(self, key, channels, eps=bn.DEFAULT_EPS, momentum=bn.DEFAULT_MOMENTUM):
        super().__init__(key)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum

    def state(self, model: Model) -> bn.BatchNormState:
        return bn.BatchNormState(
            gamma=model.params[self.pkey("gamma")],
            beta=model.params[self.pkey("beta")],
            running_mean=model.buffers[self.pkey("running_mean")],
            running_var=model.buffers[self.pkey("running_var")],
            eps=self.eps,
            momentum=self.momentum,
        )

    def forward(self, x, model, training):
        state = self.state(model)
        if not training:
            return bn.bn_forward_eval(x, state), ("eval", x)
        y, updated, _, _, cache = bn._train_forward(x, state)
        model.buffers[self.pkey("running_mean")] = updated.running_mean
        model.buffers[self.pkey("running_var")] = updated.running_var
        return y, ("train", cache)

    def backward(self, dy, cache, model, need_dx=True):
        mode, c = cache
        if mode == "train":
            dx, dgamma, dbeta = bn.bn_backward_train(dy, c)
        else:
            dx, dgamma, dbeta = bn.bn_backward_eval(dy, self.state(model), c)
        return dx, {self.pkey("gamma"): dgamma, self.pkey("beta"): dbeta}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, model, training):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, model, need_dx=True):
        return dy * cache, {}


class MaxPool2d(Layer):
    """2x2 window, stride 2. Odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximal element in row-major order.
    """

    kind = "pool"

    @staticmethod
    def _quads(x):
        h2, w2 = x.shape[2] // 2, x.shape[3] // 2
        return [x[:, :, a : 2 * h2 : 2, b : 2 * w2 : 2] for a in (0, 1) for b in (0, 1)]

    def forward(self, x, model, training):
        q = self._quads(x)
        y = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        return y, (x, y)

    def backward(self, dy, cache, model, need_dx=True):
        x, y = cache
        dx = np.zeros_like(x)
        taken = np.zeros(y.shape, dtype=bool)
        for qx, qdx in zip(self._quads(x), self._quads(dx)):
            hit = (qx == y) & ~taken
            qdx[...] = dy * hit
            taken |= hit
        return dx, {}


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, model, training):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache, model, need_dx=True):
        n, c, h, w = cache
        dx = np.broadcast_to((dy / dy.dtype.type(h * w))[:, :, None, None], cache)
        return np.ascontiguousarray(dx), {}


class Linear(Layer):
    kind = "linear"
    params = ("weight", "bias")

    def __init__(self, key, in_features, out_features):
        super().__init__(key)
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x, model, training):
        y = x @ model.params[self.pkey("weight")].T + model.params[self.pkey("bias")]
        return y, x

    def backward(self, dy, cache, model, need_dx=True):
        grads = {self.pkey("weight"): dy.T @ cache, self.pkey("bias"): dy.sum(axis=0)}
        dx = dy @ model.params[self.pkey("weight")] if need_dx else None
        return dx, grads


# ---------------------------------------------------------------- model


class Model:
    def __init__(self, config: ModelConfig, layers: list[Layer], params: dict, buffers: dict):
        self.config = config
        self.layers = layers
        self.params = params
        self.buffers = buffers
        self.training = True

    def train(self) -> Model:
        self.training = True
        return self

    def eval(self) -> Model:
        self.training = False
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def layer(self, key: str) -> Layer:
        for layer in self.layers:
            if layer.key == key:
                return layer
        raise KeyError(key)

    @property
    def bn_layers(self) -> list[BatchNorm2d]:
        return [l for l in self.layers if isinstance(l, BatchNorm2d)]

    @property
    def head_key(self) -> str:
        return self.layers[-1].key

    def set_bn_momentum(self, rho: float) -> None:
        if not 0.0 < rho <= 1.0:
            raise ConfigError(f"momentum must lie in (0, 1], got {rho}")
        for layer in self.bn_layers:
            layer.momentum = rho

    def state_items(self) -> Iterable[tuple[str, np.ndarray]]:
        """All parameters and buffers in layer order (checkpoint order)."""
        for layer in self.layers:
            for name in layer.params:
                yield layer.pkey(name), self.params[layer.pkey(name)]
            for name in layer.buffers:
                yield layer.pkey(name), self.buffers[layer.pkey(name)]

    def parameter_fingerprint(self) -> int:
        """FNV-1a 64 over every trainable parameter; BN running stats excluded."""
        h = 0xCBF29CE484222325
        for key, a in self.params.items():
            h = fnv1a_64(key.encode("utf-8"), h)
            h = fnv1a_64(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes(), h)
        return h

    def state_fingerprint(self) -> int:
        h = 0xCBF29CE484222325
        for key, a in self.state_items():
            h = fnv1a_64(key.encode("utf-8"), h)
            h = fnv1a_64(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes(), h)
        return h

    def copy(self) -> Model:
        new = copy.copy(self)
        new.layers = copy.deepcopy(self.layers)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return new

    def astype(self, dtype) -> Model:
        new = self.copy()
        new.params = {k: v.astype(dtype) for k, v in new.params.items()}
        new.buffers = {k: v.astype(dtype) for k, v in new.buffers.items()}
        return new

    def load_state(self, other: Model) -> None:
        """Copy all parameters and buffers of ``other`` into this model."""
        self.params = {k: v.copy() for k, v in other.params.items()}
        self.buffers = {k: v.copy() for k, v in other.buffers.items()}

    def run(
        self,
        x: np.ndarray,
        *,
        start: int = 0,
        stop: int | None = None,
        frozen: frozenset[str] = frozenset(),
        caches: list | None = None,
        check_finite: bool = False,
    ) -> np.ndarray:
        """Forward through ``layers[start:stop]``.

        BN layers named in ``frozen`` behave as in eval mode even when the
        model is training. If ``caches`` is given, per-layer caches are
        appended for ``backward``.
        """
        for layer in self.layers[start:stop]:
            training = self.training and layer.key not in frozen
            if check_finite:
                with np.errstate(invalid="ignore", over="ignore"):
                    x, cache = layer.forward(x, self, training)
            else:
                x, cache = layer.forward(x, self, training)
            if caches is not None:
                caches.append(cache)
            if check_finite and not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activations after layer {layer.key!r}")
        return x

    def backward(self, dy: np.ndarray, caches: list, *, start: int = 0, needed: Callable[[str], bool] | None = None):
        """Backpropagate through ``layers[start:start + len(caches)]``.

        Stops early once no earlier layer has a parameter selected by ``needed``.
        """
        grads: dict[str, np.ndarray] = {}
        layers = self.layers[start : start + len(caches)]
        has_params = [bool(l.params) and (needed is None or needed(l.key)) for l in layers]
        for i in range(len(layers) - 1, -1, -1):
            if not any(has_params[: i + 1]):
                break
            need_dx = any(has_params[:i])
            dy, g = layers[i].backward(dy, caches[i], self, need_dx=need_dx)
            grads.update(g)
        return grads


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def validate_config(config: ModelConfig) -> None:
    if not config.blocks:
        raise ConfigError("model needs at least one conv block")
    if config.n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {config.n_classes}")
    for name in ("in_channels", "height", "width"):
        if getattr(config, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    if config.head_width < 0:
        raise ConfigError("head_width must be >= 0")
    h, w = config.height, config.width
    for i, b in enumerate(config.blocks, 1):
        if b.out_channels <= 0 or b.kernel <= 0 or b.stride <= 0 or b.padding < 0:
            raise ConfigError(f"block {i}: channels, kernel and stride must be positive")
        if b.kernel > h + 2 * b.padding or b.kernel > w + 2 * b.padding:
            raise ConfigError(f"block {i}: kernel {b.kernel} larger than padded input {h}x{w}")
        h = (h + 2 * b.padding - b.kernel) // b.stride + 1
        w = (w + 2 * b.padding - b.kernel) // b.stride + 1
        if b.pool:
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ConfigError(f"block {i}: spatial size collapses to {h}x{w}")


def build_model(config: ModelConfig) -> Model:
    """He-normal conv/linear weights, zero biases, identity batch norm."""
    validate_config(config)
    rng = np.random.default_rng(config.seed)
    layers: list[Layer] = []
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    c = config.in_channels
    for i, b in enumerate(config.blocks, 1):
        conv = Conv2d(f"conv{i}", c, b.out_channels, b.kernel, b.stride, b.padding)
        params[conv.pkey("weight")] = _he_normal(rng, (b.out_channels, c, b.kernel, b.kernel), c * b.kernel**2)
        norm = BatchNorm2d(f"bn{i}", b.out_channels)
        params[norm.pkey("gamma")] = np.ones(b.out_channels, np.float32)
        params[norm.pkey("beta")] = np.zeros(b.out_channels, np.float32)
        buffers[norm.pkey("running_mean")] = np.zeros(b.out_channels, np.float32)
        buffers[norm.pkey("running_var")] = np.ones(b.out_channels, np.float32)
        layers += [conv, norm, ReLU(f"relu{i}")]
        if b.pool:
            layers.append(MaxPool2d(f"pool{i}"))
        c = b.out_channels
    layers.append(GlobalAvgPool("gap"))
    if config.head_width:
        hidden = Linear("fc", c, config.head_width)
        params[hidden.pkey("weight")] = _he_normal(rng, (config.head_width, c), c)
        params[hidden.pkey("bias")] = np.zeros(config.head_width, np.float32)
        layers += [hidden, ReLU("relu_fc")]
        c = config.head_width
    head = Linear("head", c, config.n_classes)
    params[head.pkey("weight")] = _he_normal(rng, (config.n_classes, c), c)
    params[head.pkey("bias")] = np.zeros(config.n_classes, np.float32)
    layers.append(head)
    # dict order must follow layer order for checkpoints and fingerprints
    model = Model(config, layers, {}, {})
    for layer in layers:
        for name in layer.params:
            model.params[layer.pkey(name)] = params[layer.pkey(name)]
        for name in layer.buffers:
            model.buffers[layer.pkey(name)] = buffers[layer.pkey(name)]
    return model.train()


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    cfg = model.config
    expected = (cfg.in_channels, cfg.height, cfg.width)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"batch shape {batch.shape} does not match (N, {expected[0]}, {expected[1]}, {expected[2]})")
    if model.training and batch.shape[0] < 2:
        raise DegenerateBatchError("train-mode forward needs a batch of at least 2")
    return np.asarray(batch, dtype=model.dtype)


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits for ``batch``. Train mode updates BN running statistics."""
    return model.run(_check_batch(model, batch))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(sum_exp[:, 0]) - shifted[rows, labels]))
    dlogits = exp / sum_exp
    dlogits[rows, labels] -= 1
    return loss, dlogits / logits.dtype.type(n)


def loss_and_backward(
    model: Model,
    batch: np.ndarray,
    labels: np.ndarray,
    *,
    trainable_filter: Callable[[str], bool] | None = None,
    frozen: frozenset[str] = frozenset(),
):
    """Mean softmax cross-entropy and gradients for every trainable parameter.

    With ``trainable_filter`` only gradients for selected layers are computed
    (backpropagation stops at the earliest selected layer).
    """
    if not model.training:
        raise ConfigError("loss_and_backward requires a model in train mode")
    x = _check_batch(model, batch)
    caches: list = []
    logits = model.run(x, caches=caches, frozen=frozen)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return loss, model.backward(dlogits, caches, needed=trainable_filter)


def layer_of(param_key: str) -> str:
    return param_key.rsplit(".", 1)[0]


def sgd_step(
    model: Model,
    gradients: dict[str, np.ndarray],
    lr: float,
    trainable_filter: Callable[[str], bool] | None = None,
) -> Model:
    """In-place ``theta -= lr * g`` for parameters whose layer passes the filter."""
    # lr == 0 is accepted as a no-op
    if not lr >= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for key, g in gradients.items():
        if key not in model.params:
            raise ShapeError(f"gradient for unknown parameter {key!r}")
        p = model.params[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key} has shape {g.shape}, parameter has {p.shape}")
        if trainable_filter is not None and not trainable_filter(layer_of(key)):
            continue
        if lr == 0:
            continue
        p -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)
    return model


# ---------------------------------------------------------------- checkpoints


def model_to_bytes(model: Model) -> bytes:
    w = Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.u16(CHECKPOINT_VERSION)
    cfg = model.config.to_json().encode("utf-8")
    w.u32(len(cfg))
    w.raw(cfg)
    items = list(model.state_items())
    w.u32(len(items))
    for key, a in items:
        w.text(key)
        w.u64(a.size)
        w.f32_array(a)
    return w.getvalue()


def model_from_bytes(data: bytes) -> Model:
    r = Reader(data)
    r.expect_magic(CHECKPOINT_MAGIC)
    at = r.offset
    if (v := r.u16()) != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {v}", at)
    at = r.offset
    n = r.u32()
    try:
        config = ModelConfig.from_json(bytes(r.take(n)).decode("utf-8"))
    except (ValueError, TypeError, KeyError) as e:
        raise FormatError(f"invalid config block: {e}", at) from None
    model = build_model(config)
    expected = list(model.state_items())
    at = r.offset
    if (count := r.u32()) != len(expected):
        raise FormatError(f"checkpoint has {count} entries, model expects {len(expected)}", at)
    for key, ref in expected:
        at = r.offset
        got = r.text()
        if got != key:
            raise FormatError(f"expected entry {key!r}, found {got!r}", at)
        at = r.offset
        size = r.u64()
        if size != ref.size:
            raise FormatError(f"entry {key!r} has {size} elements, expected {ref.size}", at)
        arr = r.f32_array(size).reshape(ref.shape)
        target = model.params if key in model.params else model.buffers
        target[key] = arr
    r.expect_end()
    return model


def save_model(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


__all__ = [
    "ConvBlock",
    "ModelConfig",
    "Model",
    "build_model",
    "forward",
    "loss_and_backward",
    "softmax_cross_entropy",
    "sgd_step",
    "save_model",
    "load_model",
    "model_to_bytes",
    "model_from_bytes",
]
