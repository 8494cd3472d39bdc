"""Small deterministic feedforward training engine on numpy float64 arrays.

Networks are flat lists of :class:`LayerSpec`.  Parameters live in a
:class:`ParameterStore`, which keeps trainable tensors, their momentum
buffers and the batch-norm running statistics.  ``forward`` returns logits
together with a cache that ``backward`` consumes to produce exact gradients
of the mean softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NonFiniteError

DTYPE = np.float64

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "batchnorm")
ROLES = ("weight", "bias", "bn_gamma", "bn_beta")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    padding: int = 0
    num_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for key in ("in_features", "out_features", "in_channels", "out_channels",
                    "kernel_size", "padding", "num_features"):
            if getattr(self, key):
                d[key] = getattr(self, key)
        return d


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def conv2d(in_channels: int, out_channels: int, kernel_size: int, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def batchnorm(num_features: int) -> LayerSpec:
    return LayerSpec("batchnorm", num_features=num_features)


def layer_from_dict(d: dict) -> LayerSpec:
    try:
        return LayerSpec(**d)
    except TypeError as exc:
        raise ConfigError(f"bad layer entry {d!r}: {exc}") from None


def infer_shapes(network: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Propagate a per-sample input shape through the network.

    Returns the output shape of every layer. Raises ConfigError on the first
    inconsistent link in the dimension chain.
    """
    shape = tuple(int(s) for s in input_shape)
    out = []
    for i, layer in enumerate(network):
        if layer.kind == "dense":
            if shape != (layer.in_features,):
                raise ConfigError(f"layer {i} (dense) expects ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        elif layer.kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ConfigError(f"layer {i} (conv2d) expects {layer.in_channels} input channels, got {shape}")
            k, p = layer.kernel_size, layer.padding
            h, w = shape[1] + 2 * p - k + 1, shape[2] + 2 * p - k + 1
            if h < 1 or w < 1:
                raise ConfigError(f"layer {i} (conv2d) kernel {k} larger than padded input {shape}")
            shape = (layer.out_channels, h, w)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "batchnorm":
            if shape[0] != layer.num_features:
                raise ConfigError(f"layer {i} (batchnorm) expects {layer.num_features} features, got {shape}")
        out.append(shape)
    return out


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, num_features: int) -> "BatchNormState":
        return cls(np.zeros(num_features, dtype=DTYPE), np.ones(num_features, dtype=DTYPE))


@dataclass
class ParamGroup:
    name: str
    role: str
    layer: int
    value: np.ndarray

    @property
    def prunable(self) -> bool:
        return self.role == "weight"


@dataclass
class ParameterStore:
    groups: list[ParamGroup]
    momentum: list[np.ndarray]
    bn_states: dict[int, BatchNormState] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.momentum) != len(self.groups):
            raise ConfigError("momentum buffers must align with parameter groups")
        for g, v in zip(self.groups, self.momentum):
            if v.shape != g.value.shape:
                raise ConfigError(f"momentum buffer shape mismatch for {g.name}")

    def find(self, layer: int, role: str) -> ParamGroup | None:
        for g in self.groups:
            if g.layer == layer and g.role == role:
                return g
        return None

    def values(self) -> list[np.ndarray]:
        return [g.value for g in self.groups]

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            [ParamGroup(g.name, g.role, g.layer, g.value.copy()) for g in self.groups],
            [v.copy() for v in self.momentum],
            {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.eps, s.momentum)
             for k, s in self.bn_states.items()},
        )

    @property
    def num_prunable(self) -> int:
        return sum(g.value.size for g in self.groups if g.prunable)


def init_params(network: Sequence[LayerSpec], rng: np.random.Generator,
                bn_eps: float = 1e-5, bn_momentum: float = 0.1) -> ParameterStore:
    """Kaiming-uniform weights (fan-in), zero biases, gamma=1, beta=0."""
    groups: list[ParamGroup] = []
    bn_states: dict[int, BatchNormState] = {}
    for i, layer in enumerate(network):
        if layer.kind == "dense":
            bound = np.sqrt(6.0 / layer.in_features)
            w = rng.uniform(-bound, bound, size=(layer.in_features, layer.out_features))
            groups.append(ParamGroup(f"{i}.dense.weight", "weight", i, w.astype(DTYPE)))
            groups.append(ParamGroup(f"{i}.dense.bias", "bias", i, np.zeros(layer.out_features, DTYPE)))
        elif layer.kind == "conv2d":
            fan_in = layer.in_channels * layer.kernel_size ** 2
            bound = np.sqrt(6.0 / fan_in)
            shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            w = rng.uniform(-bound, bound, size=shape)
            groups.append(ParamGroup(f"{i}.conv2d.weight", "weight", i, w.astype(DTYPE)))
            groups.append(ParamGroup(f"{i}.conv2d.bias", "bias", i, np.zeros(layer.out_channels, DTYPE)))
        elif layer.kind == "batchnorm":
            n = layer.num_features
            groups.append(ParamGroup(f"{i}.batchnorm.gamma", "bn_gamma", i, np.ones(n, DTYPE)))
            groups.append(ParamGroup(f"{i}.batchnorm.beta", "bn_beta", i, np.zeros(n, DTYPE)))
            bn_states[i] = BatchNormState(np.zeros(n, DTYPE), np.ones(n, DTYPE), bn_eps, bn_momentum)
    return ParameterStore(groups, [np.zeros_like(g.value) for g in groups], bn_states)


# ---------------------------------------------------------------------------
# layer primitives


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ConfigError(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if ndim == 2 else v.reshape(1, -1, 1, 1)


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      state: BatchNormState, mode: str = "train"):
    """Normalize per feature (per channel for 4-D input), then scale and shift.

    Train mode uses batch statistics and updates the running estimates in
    ``state``; eval mode reads the running estimates only.  Returns
    ``(y, cache)``; the cache is None in eval mode.
    """
    axes = _bn_axes(x)
    if x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ConfigError(f"batchnorm feature mismatch: input {x.shape}, gamma {gamma.shape}")
    g, b = _bn_view(gamma, x.ndim), _bn_view(beta, x.ndim)
    if mode == "eval":
        mean = _bn_view(state.running_mean, x.ndim)
        var = _bn_view(state.running_var, x.ndim)
        return g * (x - mean) / np.sqrt(var + state.eps) + b, None

    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    denom = var + state.eps
    if np.any(denom <= 0):
        raise NonFiniteError("batchnorm variance + eps is not positive")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = (x - mean) * inv_std
    count = x.size // x.shape[1]
    # running variance tracks the unbiased estimate
    unbiased = var.reshape(-1) * (count / max(count - 1, 1))
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mean.reshape(-1)
    state.running_var = (1 - m) * state.running_var + m * unbiased
    return g * xhat + b, (xhat, inv_std, gamma)


def batchnorm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma = cache
    axes = _bn_axes(dy)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * _bn_view(gamma, dy.ndim)
    dx = inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


def _im2col(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int):
    n = x.shape[0]
    co, ci, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, padding)
    out = cols @ w.reshape(co, -1).T + b
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return out, (cols, x.shape)


def conv2d_backward(dout: np.ndarray, w: np.ndarray, padding: int, cache, need_dx: bool = True):
    cols, x_shape = cache
    n, ci, h, wd = x_shape
    co, _, k, _ = w.shape
    ho, wo = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(co, -1)).reshape(n, ho, wo, ci, k, k)
    dxp = np.zeros((n, ci, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


# ---------------------------------------------------------------------------
# network passes


def forward(network: Sequence[LayerSpec], params: ParameterStore, batch: np.ndarray,
            mode: str = "train") -> tuple[np.ndarray, list]:
    """Run the network on ``batch``; returns ``(logits, cache)``."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=DTYPE)
    cache: list = []
    for i, layer in enumerate(network):
        kind = layer.kind
        if kind == "dense":
            if x.ndim != 2 or x.shape[1] != layer.in_features:
                raise ConfigError(f"layer {i} (dense) got input of shape {x.shape}")
            w, b = params.find(i, "weight").value, params.find(i, "bias").value
            cache.append(x)
            x = x @ w + b
        elif kind == "conv2d":
            if x.ndim != 4 or x.shape[1] != layer.in_channels:
                raise ConfigError(f"layer {i} (conv2d) got input of shape {x.shape}")
            w, b = params.find(i, "weight").value, params.find(i, "bias").value
            x, c = conv2d_forward(x, w, b, layer.padding)
            cache.append(c)
        elif kind == "relu":
            mask = x > 0
            cache.append(mask)
            x = x * mask
        elif kind == "flatten":
            cache.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif kind == "batchnorm":
            gamma, beta = params.find(i, "bn_gamma").value, params.find(i, "bn_beta").value
            x, c = batchnorm_forward(x, gamma, beta, params.bn_states[i], mode)
            cache.append(c)
    return x, cache


def backward(network: Sequence[LayerSpec], params: ParameterStore, cache: list,
             dlogits: np.ndarray) -> list[np.ndarray]:
    """Backpropagate ``dlogits`` through a train-mode cache.

    Returns one gradient array per parameter group, in store order.
    """
    index = {(g.layer, g.role): k for k, g in enumerate(params.groups)}
    grads: list[np.ndarray | None] = [None] * len(params.groups)
    d = dlogits
    for i in range(len(network) - 1, -1, -1):
        layer, c = network[i], cache[i]
        kind = layer.kind
        if kind == "dense":
            w = params.groups[index[i, "weight"]].value
            grads[index[i, "weight"]] = c.T @ d
            grads[index[i, "bias"]] = d.sum(axis=0)
            d = d @ w.T
        elif kind == "conv2d":
            w = params.groups[index[i, "weight"]].value
            d, dw, db = conv2d_backward(d, w, layer.padding, c, need_dx=i > 0)
            grads[index[i, "weight"]] = dw
            grads[index[i, "bias"]] = db
        elif kind == "relu":
            d = d * c
        elif kind == "flatten":
            d = d.reshape(c)
        elif kind == "batchnorm":
            if c is None:
                raise ConfigError("backward needs a train-mode cache")
            d, dg, db = batchnorm_backward(d, c)
            grads[index[i, "bn_gamma"]] = dg
            grads[index[i, "bn_beta"]] = db
    return grads


def loss_and_grads(network, params, batch, labels):
    """Forward in train mode plus backward; returns ``(loss, grads, logits)``."""
    logits, cache = forward(network, params, batch, "train")
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return loss, backward(network, params, cache, dlogits), logits


def predict(network, params, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = [forward(network, params, x[s:s + batch_size], "eval")[0].argmax(axis=1)
           for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(network, params, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float((predict(network, params, x) == y).mean())


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 10.0
    lr_decay_epochs: tuple[int, ...] = (150, 250)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be positive")
        epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if list(epochs) != sorted(epochs):
            raise ConfigError("lr_decay_epochs must be sorted")
        object.__setattr__(self, "lr_decay_epochs", epochs)


def lr_at(opt: OptimizerConfig, epoch: int) -> float:
    n = sum(1 for e in opt.lr_decay_epochs if e <= epoch)
    return opt.learning_rate / opt.lr_decay_factor ** n


def sgd_step(params: ParameterStore, grads: Sequence[np.ndarray], opt: OptimizerConfig,
             epoch: int) -> None:
    """One momentum-SGD update in place.

    ``v <- mu*v + (g + wd*theta)``; ``theta <- theta - lr*v``.
    """
    lr = lr_at(opt, epoch)
    if len(grads) != len(params.groups):
        raise ConfigError("gradients must align with parameter groups")
    updates = []
    for g, v, grad in zip(params.groups, params.momentum, grads):
        step = grad + opt.weight_decay * g.value if opt.weight_decay else grad
        v *= opt.momentum
        v += step
        upd = g.value - lr * v
        if not np.all(np.isfinite(upd)):
            raise NonFiniteError(f"non-finite update in {g.name} at epoch {epoch}")
        updates.append(upd)
    for g, upd in zip(params.groups, updates):
        g.value[...] = upd
