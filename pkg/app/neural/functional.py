"""Differentiable layers used by the phase classifiers.

Each function takes and returns ``Tensor`` objects and registers its own
vector-Jacobian product. Shapes follow the NCHW convention for images.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.core.exceptions import DomainError, InternalConsistencyError
from .tensor import Parameter, Tensor, add, matmul, mul, transpose

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
SIMPLEX_TOLERANCE = 1e-9


def conv2d_3x3(x: Tensor, weight: Tensor) -> Tensor:
    """Cross-correlation with a 3x3 kernel, stride 1 and zero padding 1. No bias."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3) or weight.shape[1] != x.shape[1]:
        raise DomainError(f"conv2d_3x3 cannot combine input {x.shape} with weight {weight.shape}")
    N, C, H, W = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # [N, C, H, W, 3, 3]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                contribution = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                grad_padded[:, :, i:i + H, j:j + W] += contribution.transpose(0, 3, 1, 2)
        return grad_padded[:, :, 1:H + 1, 1:W + 1], grad_w

    return Tensor(np.ascontiguousarray(out), (x, weight), backward, 'conv2d_3x3')


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""
    scale: Parameter
    shift: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, prefix: str, momentum: float = 0.1, eps: float = 1e-5) -> 'BatchNormState':
        return cls(
            scale=Parameter(np.ones(channels), f"{prefix}.scale"),
            shift=Parameter(np.zeros(channels), f"{prefix}.shift"),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def _normalized_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes, count: int):
    """Gradient through x_hat = (x - mean) / std with batch mean and biased variance."""
    sum_g = g_hat.sum(axis=axes, keepdims=True)
    sum_gx = (g_hat * x_hat).sum(axis=axes, keepdims=True)
    return inv_std * (g_hat - sum_g / count - x_hat * sum_gx / count)


def batch_norm2d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise DomainError(f"batch_norm2d expects [N, {state.channels}, H, W], got {x.shape}")
    N, C, H, W = x.shape
    axes = (0, 2, 3)
    scale = state.scale.data.reshape(1, C, 1, 1)
    shift = state.shift.data.reshape(1, C, 1, 1)

    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(1, C, 1, 1) + state.eps)
        x_hat = (x.data - state.running_mean.reshape(1, C, 1, 1)) * inv_std

        def backward(g):
            return g * scale * inv_std, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

        return Tensor(x_hat * scale + shift, (x, state.scale, state.shift), backward, 'batch_norm2d')

    count = N * H * W
    if count < 2:
        raise DomainError(f"train-mode batch norm needs at least two values per channel, got {count}")
    batch_mean = x.data.mean(axis=axes, keepdims=True)
    batch_var = ((x.data - batch_mean) ** 2).mean(axis=axes, keepdims=True)
    if np.any(batch_var < 0):
        raise InternalConsistencyError(f"negative batch variance {batch_var.min()!r}")
    inv_std = 1.0 / np.sqrt(batch_var + state.eps)
    x_hat = (x.data - batch_mean) * inv_std

    state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * batch_mean.reshape(C)
    state.running_var = (1 - state.momentum) * state.running_var + state.momentum * batch_var.reshape(C)

    def backward(g):
        grad_x = _normalized_backward(g * scale, x_hat, inv_std, axes, count)
        return grad_x, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    return Tensor(x_hat * scale + shift, (x, state.scale, state.shift), backward, 'batch_norm2d')


def layer_norm(x: Tensor, scale: Parameter, shift: Parameter, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the per-feature affine map."""
    F = x.shape[-1]
    if F < 1 or scale.shape != (F,) or shift.shape != (F,):
        raise DomainError(f"layer_norm over {F} features got affine shapes {scale.shape}, {shift.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    leading = tuple(range(x.ndim - 1))

    def backward(g):
        grad_x = _normalized_backward(g * scale.data, x_hat, inv_std, -1, F)
        return grad_x, (g * x_hat).sum(axis=leading), g.sum(axis=leading)

    return Tensor(x_hat * scale.data + shift.data, (x, scale, shift), backward, 'layer_norm')


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W + b over the last axis of x."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DomainError(f"linear cannot map {x.shape} through {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DomainError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    F_in, F_out = weight.shape
    flat = x.data.reshape(-1, F_in)
    out = (flat @ weight.data).reshape(x.shape[:-1] + (F_out,))
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g_flat = g.reshape(-1, F_out)
        grads = [(g_flat @ weight.data.T).reshape(x.shape), flat.T @ g_flat]
        if bias is not None:
            grads.append(g_flat.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, parents, backward, 'linear')


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), 'relu')


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor(y, (x,), backward, 'softmax')


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the sampled mask is replayed in the backward pass."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise DomainError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor(x.data * mask, (x,), lambda g: (g * mask,), 'dropout')


def global_avg_pool_spatial(x: Tensor) -> Tensor:
    """Mean over the last axis: [N, C, Ht, W] -> [N, C, Ht]."""
    if x.ndim != 4 or x.shape[-1] < 1:
        raise DomainError(f"spatial pooling needs [N, C, Ht, W] with W >= 1, got {x.shape}")
    W = x.shape[-1]

    def backward(g):
        return (np.repeat(g[..., None] / W, W, axis=-1),)

    return Tensor(x.data.mean(axis=-1), (x,), backward, 'global_avg_pool_spatial')


def attention_pool(Z: Tensor, O: Tensor, W_K: Tensor, W_V: Tensor) -> Tensor:
    """Single learnable query O attending over the N rows of Z.

    q = O + softmax(O K^T / sqrt(F)) V with K = Z W_K, V = Z W_V; the softmax
    runs over the N axis.
    """
    F = Z.shape[1]
    if O.shape != (1, F) or W_K.shape != (F, F) or W_V.shape != (F, F):
        raise DomainError(f"attention_pool shapes disagree: Z {Z.shape}, O {O.shape}, W_K {W_K.shape}, W_V {W_V.shape}")
    K = matmul(Z, W_K)
    V = matmul(Z, W_V)
    scores = mul(matmul(O, transpose(K)), 1.0 / math.sqrt(F))
    weights = softmax(scores, axis=-1)
    return add(O, matmul(weights, V))


def cross_entropy_loss(pred: Tensor, label: int) -> Tensor:
    """-log(pred[label]) for a probability vector, with pred clamped at 1e-12."""
    if pred.ndim != 1 or not 0 <= label < pred.shape[0]:
        raise DomainError(f"cross entropy needs a probability vector and a class index, got {pred.shape}, {label}")
    if abs(pred.data.sum() - 1.0) > SIMPLEX_TOLERANCE or pred.data.min() < -SIMPLEX_TOLERANCE:
        raise DomainError(f"prediction {pred.data} is not a probability vector")
    value = pred.data[label]
    clamped = value < PROBABILITY_FLOOR
    loss = -math.log(max(value, PROBABILITY_FLOOR))

    def backward(g):
        grad = np.zeros_like(pred.data)
        if not clamped:
            grad[label] = -g / value
        return (grad,)

    return Tensor(np.array(loss), (pred,), backward, 'cross_entropy')


def mean_cross_entropy(pred: Tensor, label: int) -> Tensor:
    """Mean of -log(pred[i, label]) over the rows of an [N, C] probability matrix."""
    if pred.ndim != 2 or not 0 <= label < pred.shape[1]:
        raise DomainError(f"mean cross entropy needs [N, C] probabilities and a class index, got {pred.shape}, {label}")
    N = pred.shape[0]
    values = pred.data[:, label]
    live = values >= PROBABILITY_FLOOR
    loss = -np.log(np.maximum(values, PROBABILITY_FLOOR)).mean()

    def backward(g):
        grad = np.zeros_like(pred.data)
        grad[live, label] = -g / (N * values[live])
        return (grad,)

    return Tensor(np.array(loss), (pred,), backward, 'mean_cross_entropy')
