"""Feed-forward networks with batch normalisation and exact backpropagation.

Layout of one network with ``l`` hidden layers of width ``m``::

    bn -> (dense -> bn -> rho) * l -> dense -> bn

The output layer has identity activation. Training mode normalises with
batch statistics and moves the running statistics by an exponential moving
average; inference mode normalises with the running statistics and leaves
them untouched.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from deep_ppde.errors import (
    ERR_CHECKPOINT,
    ERR_INVALID_PARAM,
    ERR_IO,
    ERR_NUMERIC,
    ERR_SHAPE_MISMATCH,
    PPDEError,
)
from deep_ppde.tensor_core import RngStream

logger = logging.getLogger(__name__)

ACTIVATION_RELU = "relu"
ACTIVATION_TANH = "tanh"
ACTIVATION_IDENTITY = "identity"
ACTIVATIONS = (ACTIVATION_RELU, ACTIVATION_TANH, ACTIVATION_IDENTITY)

MODE_TRAINING = "training"
MODE_INFERENCE = "inference"

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BatchNormConfig:
    """``epsilon`` of the normalisation and ``momentum`` of the running statistics."""

    epsilon: float = 1e-6
    momentum: float = 0.99

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise PPDEError(ERR_INVALID_PARAM, f"batch-norm epsilon must be positive, got {self.epsilon}")
        if not 0 <= self.momentum < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"batch-norm momentum must be in [0, 1), got {self.momentum}")


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def identity(cls, size: int, dtype: type = np.float64) -> BatchNormParams:
        return cls(
            scale=np.ones(size, dtype=dtype),
            shift=np.zeros(size, dtype=dtype),
            running_mean=np.zeros(size, dtype=dtype),
            running_var=np.ones(size, dtype=dtype),
        )

    @property
    def size(self) -> int:
        return self.scale.shape[0]

    def to_dict(self) -> dict:
        return {
            "scale": self.scale.tolist(),
            "shift": self.shift.tolist(),
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, dtype: type) -> BatchNormParams:
        return cls(
            scale=np.asarray(data["scale"], dtype=dtype),
            shift=np.asarray(data["shift"], dtype=dtype),
            running_mean=np.asarray(data["running_mean"], dtype=dtype),
            running_var=np.asarray(data["running_var"], dtype=dtype),
        )


@dataclass
class LayerParams:
    """Dense weights ``(d_out, d_in)``, bias and the batch norm that follows."""

    weight: np.ndarray
    bias: np.ndarray
    bn: BatchNormParams

    def to_dict(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist(), "bn": self.bn.to_dict()}

    @classmethod
    def from_dict(cls, data: dict, dtype: type) -> LayerParams:
        return cls(
            weight=np.asarray(data["weight"], dtype=dtype),
            bias=np.asarray(data["bias"], dtype=dtype),
            bn=BatchNormParams.from_dict(data["bn"], dtype),
        )


@dataclass
class NetworkParams:
    """All parameters of one network: input batch norm then ``l + 1`` layers."""

    input_bn: BatchNormParams
    layers: List[LayerParams]
    activation: str = ACTIVATION_RELU

    @property
    def input_dim(self) -> int:
        return self.input_bn.size

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def hidden_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def width(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weight.dtype

    def trainable(self) -> List[np.ndarray]:
        """Trainable arrays in order: input scale/shift, then W, b, scale, shift per layer."""
        arrays = [self.input_bn.scale, self.input_bn.shift]
        for layer in self.layers:
            arrays.extend([layer.weight, layer.bias, layer.bn.scale, layer.bn.shift])
        return arrays

    def with_trainable(self, arrays: List[np.ndarray]) -> NetworkParams:
        """Copy of these parameters with the trainable arrays replaced."""
        expected = 2 + 4 * len(self.layers)
        if len(arrays) != expected:
            raise PPDEError(ERR_SHAPE_MISMATCH, f"expected {expected} arrays, got {len(arrays)}")
        for old, new in zip(self.trainable(), arrays):
            if old.shape != new.shape:
                raise PPDEError(ERR_SHAPE_MISMATCH, f"array shape {new.shape} != {old.shape}")
        input_bn = BatchNormParams(
            arrays[0], arrays[1],
            self.input_bn.running_mean.copy(), self.input_bn.running_var.copy(),
        )
        layers = []
        for k, layer in enumerate(self.layers):
            w, b, scale, shift = arrays[2 + 4 * k: 6 + 4 * k]
            layers.append(LayerParams(
                weight=w, bias=b,
                bn=BatchNormParams(scale, shift, layer.bn.running_mean.copy(), layer.bn.running_var.copy()),
            ))
        return NetworkParams(input_bn=input_bn, layers=layers, activation=self.activation)

    def copy(self) -> NetworkParams:
        return NetworkParams.from_dict(self.to_dict())

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for array in self._all_arrays():
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def _all_arrays(self) -> List[np.ndarray]:
        arrays = self.trainable() + [self.input_bn.running_mean, self.input_bn.running_var]
        for layer in self.layers:
            arrays.extend([layer.bn.running_mean, layer.bn.running_var])
        return arrays

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "dtype": np.dtype(self.dtype).name,
            "activation": self.activation,
            "input_bn": self.input_bn.to_dict(),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> NetworkParams:
        if data.get("version") != CHECKPOINT_VERSION:
            raise PPDEError(
                ERR_CHECKPOINT,
                f"unsupported checkpoint version {data.get('version')!r}, expected {CHECKPOINT_VERSION}",
            )
        try:
            dtype = np.dtype(data["dtype"]).type
            return cls(
                input_bn=BatchNormParams.from_dict(data["input_bn"], dtype),
                layers=[LayerParams.from_dict(layer, dtype) for layer in data["layers"]],
                activation=data["activation"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PPDEError(ERR_CHECKPOINT, f"malformed checkpoint: {exc}") from exc


def save_checkpoint(params: NetworkParams, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(params.to_dict(), handle)
    except OSError as exc:
        raise PPDEError(ERR_IO, f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str) -> NetworkParams:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise PPDEError(ERR_IO, f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise PPDEError(ERR_CHECKPOINT, f"checkpoint {path} is not valid JSON: {exc}") from exc
    return NetworkParams.from_dict(data)


def param_count(d0: int, d1: int, l: int, m: int, include_bn: bool = False) -> int:
    """Number of dense parameters; with ``include_bn`` also scale/shift pairs."""
    if min(d0, d1, l, m) < 1:
        raise PPDEError(ERR_INVALID_PARAM, "network dimensions must be at least 1")
    count = (d0 + 1) * m + (l - 1) * (m + 1) * m + (m + 1) * d1
    if include_bn:
        count += 2 * (d0 + l * m + d1)
    return count


def xavier_init(
    rng: RngStream,
    d0: int,
    d1: int,
    l: int,
    m: int,
    activation: str = ACTIVATION_RELU,
    dtype: type = np.float64,
) -> NetworkParams:
    """Glorot-uniform weights, zero biases, identity batch norms."""
    if min(d0, d1, l, m) < 1:
        raise PPDEError(ERR_INVALID_PARAM, "network dimensions must be at least 1")
    if activation not in ACTIVATIONS:
        raise PPDEError(ERR_INVALID_PARAM, f"unknown activation {activation!r}")
    sizes = [d0] + [m] * l + [d1]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append(LayerParams(
            weight=rng.uniform(-limit, limit, (fan_out, fan_in), dtype=dtype),
            bias=np.zeros(fan_out, dtype=dtype),
            bn=BatchNormParams.identity(fan_out, dtype),
        ))
    return NetworkParams(
        input_bn=BatchNormParams.identity(d0, dtype), layers=layers, activation=activation
    )


@dataclass
class _BatchNormCache:
    normalized: np.ndarray
    inv_std: np.ndarray
    from_batch: bool


@dataclass
class _LayerCache:
    inputs: np.ndarray
    bn: _BatchNormCache
    outputs: np.ndarray
    pre_activation: np.ndarray
    activation: str


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, enough for exact backprop."""

    mode: str
    input_bn: _BatchNormCache
    layers: List[_LayerCache] = field(default_factory=list)


@dataclass
class ForwardResult:
    """Network outputs, the backprop cache and the parameters after the pass.

    In training mode ``params`` carries the updated running statistics; in
    inference mode it is the input object itself.
    """

    outputs: np.ndarray
    cache: ForwardCache
    params: NetworkParams


def _batch_norm(
    x: np.ndarray, p: BatchNormParams, training: bool, config: BatchNormConfig
):
    if training:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        m = config.momentum
        updated = BatchNormParams(
            p.scale, p.shift,
            m * p.running_mean + (1.0 - m) * mean,
            m * p.running_var + (1.0 - m) * var,
        )
    else:
        mean, var, updated = p.running_mean, p.running_var, p
    inv_std = 1.0 / np.sqrt(var + config.epsilon)
    normalized = (x - mean) * inv_std
    return p.scale * normalized + p.shift, _BatchNormCache(normalized, inv_std, training), updated


def _batch_norm_backward(dy: np.ndarray, p: BatchNormParams, cache: _BatchNormCache):
    dscale = np.sum(dy * cache.normalized, axis=0)
    dshift = np.sum(dy, axis=0)
    dnorm = dy * p.scale
    if cache.from_batch:
        n = dy.shape[0]
        dx = (cache.inv_std / n) * (
            n * dnorm
            - dnorm.sum(axis=0)
            - cache.normalized * np.sum(dnorm * cache.normalized, axis=0)
        )
    else:
        dx = dnorm * cache.inv_std
    return dx, dscale, dshift


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == ACTIVATION_RELU:
        return np.maximum(x, 0.0)
    if activation == ACTIVATION_TANH:
        return np.tanh(x)
    return x


def _activation_backward(dy: np.ndarray, cache: _LayerCache) -> np.ndarray:
    if cache.activation == ACTIVATION_RELU:
        # subgradient 0 at the kink
        return dy * (cache.pre_activation > 0)
    if cache.activation == ACTIVATION_TANH:
        return dy * (1.0 - cache.outputs * cache.outputs)
    return dy


def forward(
    params: NetworkParams,
    inputs: np.ndarray,
    mode: str = MODE_INFERENCE,
    bn: BatchNormConfig = BatchNormConfig(),
) -> ForwardResult:
    if mode not in (MODE_TRAINING, MODE_INFERENCE):
        raise PPDEError(ERR_INVALID_PARAM, f"unknown mode {mode!r}")
    if inputs.ndim != 2 or inputs.shape[1] != params.input_dim:
        raise PPDEError(
            ERR_SHAPE_MISMATCH, f"inputs {inputs.shape} do not match input dim {params.input_dim}"
        )
    training = mode == MODE_TRAINING
    if training and inputs.shape[0] < 2:
        raise PPDEError(ERR_INVALID_PARAM, "training mode needs a batch of at least 2 samples")

    x, input_cache, input_bn = _batch_norm(inputs, params.input_bn, training, bn)
    cache = ForwardCache(mode=mode, input_bn=input_cache)
    new_layers = []
    last = len(params.layers) - 1
    for k, layer in enumerate(params.layers):
        dense = x @ layer.weight.T + layer.bias
        normalized, bn_cache, layer_bn = _batch_norm(dense, layer.bn, training, bn)
        activation = params.activation if k < last else ACTIVATION_IDENTITY
        outputs = _activate(normalized, activation)
        if not np.isfinite(outputs).all():
            raise PPDEError(ERR_NUMERIC, f"non-finite activations in layer {k}")
        cache.layers.append(_LayerCache(x, bn_cache, outputs, normalized, activation))
        new_layers.append(LayerParams(layer.weight, layer.bias, layer_bn))
        x = outputs

    updated = NetworkParams(input_bn, new_layers, params.activation) if training else params
    return ForwardResult(outputs=x, cache=cache, params=updated)


def predict(params: NetworkParams, inputs: np.ndarray, bn: BatchNormConfig = BatchNormConfig()) -> np.ndarray:
    """Inference-mode outputs."""
    return forward(params, inputs, MODE_INFERENCE, bn).outputs


def backward(
    params: NetworkParams, cache: ForwardCache, output_sensitivity: np.ndarray
) -> List[np.ndarray]:
    """Gradients of the loss, aligned with ``params.trainable()``."""
    if len(cache.layers) != len(params.layers):
        raise PPDEError(
            ERR_INVALID_PARAM,
            f"cache holds {len(cache.layers)} layers, parameters {len(params.layers)}",
        )
    for layer, layer_cache in zip(params.layers, cache.layers):
        if layer_cache.inputs.shape[1] != layer.weight.shape[1]:
            raise PPDEError(ERR_INVALID_PARAM, "cache was produced by different parameters")
    if output_sensitivity.shape != cache.layers[-1].outputs.shape:
        raise PPDEError(
            ERR_SHAPE_MISMATCH,
            f"sensitivity {output_sensitivity.shape} != outputs {cache.layers[-1].outputs.shape}",
        )

    grads: List[List[np.ndarray]] = [None] * len(params.layers)
    upstream = output_sensitivity
    for k in range(len(params.layers) - 1, -1, -1):
        layer, layer_cache = params.layers[k], cache.layers[k]
        d_normalized = _activation_backward(upstream, layer_cache)
        d_dense, d_scale, d_shift = _batch_norm_backward(d_normalized, layer.bn, layer_cache.bn)
        grads[k] = [d_dense.T @ layer_cache.inputs, d_dense.sum(axis=0), d_scale, d_shift]
        upstream = d_dense @ layer.weight

    _, d_in_scale, d_in_shift = _batch_norm_backward(upstream, params.input_bn, cache.input_bn)
    flat = [d_in_scale, d_in_shift]
    for layer_grads in grads:
        flat.extend(layer_grads)
    return flat


def gradient_norm(grads: List[np.ndarray]) -> Optional[float]:
    """Euclidean norm over all arrays (``None`` for an empty list)."""
    if not grads:
        return None
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))
