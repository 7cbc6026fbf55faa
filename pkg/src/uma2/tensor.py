"""Dense numeric kernel for the towers.

Everything works on float64 numpy arrays. Layer functions accept either a
single vector of shape ``(in,)`` or a batch of shape ``(n, in)``; weights are
stored ``(out, in)`` so ``out[j] = sum_k W[j, k] * x[k] + b[j]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BCE_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


@dataclass
class AffineCache:
    x: np.ndarray
    weights: np.ndarray
    pre: np.ndarray
    relu: bool


def _check_affine(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> None:
    if weights.ndim != 2:
        raise ShapeError(f"weights must be 2-D, got shape {weights.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(
            f"input length {x.shape[-1]} does not match weights.cols {weights.shape[1]}"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"bias shape {bias.shape} does not match weights.rows {weights.shape[0]}"
        )


def affine_forward(x, weights, bias, relu: bool = True):
    """Affine map optionally followed by ReLU. Returns ``(output, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_affine(x, weights, bias)
    pre = x @ weights.T + bias
    out = np.maximum(pre, 0.0) if relu else pre
    return out, AffineCache(x, weights, pre, relu)


def affine_relu_forward(x, weights, bias):
    return affine_forward(x, weights, bias, relu=True)


def affine_backward(grad_output, cache: AffineCache):
    """Exact gradients of :func:`affine_forward`.

    The ReLU sub-gradient at exactly zero is taken as zero.
    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != cache.pre.shape:
        raise ShapeError(
            f"grad_output shape {grad_output.shape} does not match layer output {cache.pre.shape}"
        )
    g = grad_output * (cache.pre > 0.0) if cache.relu else grad_output
    grad_input = g @ cache.weights
    if g.ndim == 1:
        grad_weights = np.outer(g, cache.x)
        grad_bias = g.copy()
    else:
        grad_weights = g.T @ cache.x
        grad_bias = g.sum(axis=0)
    return grad_input, grad_weights, grad_bias


def affine_relu_backward(grad_output, cache: AffineCache):
    return affine_backward(grad_output, cache)


def sigmoid(x):
    """Numerically stable logistic function (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def bce(y, y_hat):
    """Binary cross-entropy with ``y_hat`` clamped to ``[eps, 1 - eps]``."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(y_hat, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    out = -y * np.log(p) - (1.0 - y) * np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


def bce_logits(y, logits):
    """BCE of ``sigmoid(logits)`` and its gradient with respect to the logits.

    Consistent with :func:`bce`: where the clamp is active the gradient is 0.
    """
    y = np.asarray(y, dtype=np.float64)
    p = sigmoid(np.asarray(logits, dtype=np.float64))
    loss = bce(y, p)
    active = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    grad = np.where(active, p - y, 0.0)
    return loss, grad


def glorot_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 0.001

    @classmethod
    def like(cls, params: np.ndarray, **kwargs) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kwargs)


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam step. Mutates ``params`` and ``state`` in place."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"adam shapes differ: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}/{state.v.shape}"
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
