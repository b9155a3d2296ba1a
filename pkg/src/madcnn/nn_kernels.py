"""Numerical building blocks with matching analytic backward passes.

Everything is float64 numpy. Feature maps are laid out (channels, length);
every operation also accepts a leading batch axis (batch, channels, length)
and applies the same arithmetic per batch element. Backward functions take
the gradient of a scalar loss with respect to their output and return
gradients with respect to inputs and parameters; when the input carried a
batch axis, parameter gradients are summed over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

KERNEL_SIZE = 3
ALLOWED_DILATIONS = (1, 4, 8)

# Adam defaults used throughout training.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-7
ADAM_LEARNING_RATE = 1e-3

# Predictions are clamped into [BCE_CLAMP, 1 - BCE_CLAMP] before the log.
BCE_CLAMP = 1e-7

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_batched(x: np.ndarray, core_ndim: int) -> tuple[np.ndarray, bool]:
    """Promote an array to exactly one leading batch axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == core_ndim:
        return x[None], False
    if x.ndim == core_ndim + 1:
        return x, True
    raise ShapeError(f"expected {core_ndim} or {core_ndim + 1} axes, got {x.ndim}")


# ---------------------------------------------------------------------------
# dilated 1-D convolution


@dataclass
class ConvParams:
    """Weights of one dilated 1-D convolution layer.

    weights: (out_channels, in_channels, KERNEL_SIZE)
    bias:    (out_channels,)
    Stride is fixed to 1; zero same-padding keeps the output length equal
    to the input length.
    """

    weights: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[2] != KERNEL_SIZE:
            raise ShapeError(
                f"conv weights must be (out, in, {KERNEL_SIZE}), got {self.weights.shape}"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias must be ({self.weights.shape[0]},), got {self.bias.shape}"
            )
        if self.stride != 1:
            raise ShapeError("stride is fixed to 1")
        if self.dilation not in ALLOWED_DILATIONS:
            raise ShapeError(f"dilation must be one of {ALLOWED_DILATIONS}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise NumericError("conv parameters must be finite")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def _padded(x: np.ndarray, dilation: int) -> np.ndarray:
    batch, channels, length = x.shape
    pad = dilation  # (KERNEL_SIZE - 1) // 2 taps on each side
    out = np.zeros((batch, channels, length + 2 * pad))
    out[:, :, pad:pad + length] = x
    return out


def conv1d_dilated(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Same-padded dilated convolution along the last axis.

    out[c, t] = bias[c] + sum_{i,k} weights[c, i, k] * x_padded[i, t + k*dilation]
    """
    x, batched = _as_batched(x, 2)
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, conv expects {params.in_channels}"
        )
    if not np.isfinite(x).all():
        raise NumericError("conv input must be finite")
    length = x.shape[2]
    d = params.dilation
    xp = _padded(x, d)
    out = np.empty((x.shape[0], params.out_channels, length))
    out[:] = params.bias[:, None]
    for k in range(KERNEL_SIZE):
        out += np.einsum("oi,bil->bol", params.weights[:, :, k], xp[:, :, k * d:k * d + length])
    return out if batched else out[0]


def conv1d_dilated_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv1d_dilated: returns (grad_x, grad_weights, grad_bias)."""
    x, batched = _as_batched(x, 2)
    grad_out, _ = _as_batched(grad_out, 2)
    if grad_out.shape != (x.shape[0], params.out_channels, x.shape[2]):
        raise ShapeError("grad_out shape does not match the conv output")
    length = x.shape[2]
    d = params.dilation
    xp = _padded(x, d)
    grad_bias = grad_out.sum(axis=(0, 2))
    grad_weights = np.empty_like(params.weights)
    grad_xp = np.zeros_like(xp)
    for k in range(KERNEL_SIZE):
        seg = slice(k * d, k * d + length)
        grad_weights[:, :, k] = np.einsum("bol,bil->oi", grad_out, xp[:, :, seg])
        grad_xp[:, :, seg] += np.einsum("oi,bol->bil", params.weights[:, :, k], grad_out)
    grad_x = grad_xp[:, :, d:d + length]
    return (grad_x if batched else grad_x[0]), grad_weights, grad_bias


# ---------------------------------------------------------------------------
# max pooling, window 2 / stride 2, floor truncation


def maxpool1d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool adjacent pairs along the last axis; ties pick the earlier index.

    Returns (pooled, source_index) where source_index holds, per output
    element, the absolute input position of the selected maximum.
    """
    x, batched = _as_batched(x, 2)
    length = x.shape[2]
    if length < 2:
        raise ShapeError("maxpool needs input length >= 2")
    pooled_len = length // 2
    pairs = x[:, :, :2 * pooled_len].reshape(x.shape[0], x.shape[1], pooled_len, 2)
    local = np.argmax(pairs, axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(pairs, local[..., None], axis=-1)[..., 0]
    source_index = 2 * np.arange(pooled_len)[None, None, :] + local
    if not batched:
        return out[0], source_index[0]
    return out, source_index


def maxpool1d_backward(
    source_index: np.ndarray, input_length: int, grad_out: np.ndarray
) -> np.ndarray:
    """Scatter pooled gradients back onto the selected input positions."""
    grad_out, batched = _as_batched(grad_out, 2)
    source_index = np.asarray(source_index, dtype=np.int64)
    if source_index.ndim == 2:
        source_index = source_index[None]
    if source_index.shape != grad_out.shape:
        raise ShapeError("source_index shape does not match grad_out")
    grad_x = np.zeros((grad_out.shape[0], grad_out.shape[1], input_length))
    np.put_along_axis(grad_x, source_index, grad_out, axis=-1)
    return grad_x if batched else grad_x[0]


# ---------------------------------------------------------------------------
# activations and losses


def gelu(x: np.ndarray | float) -> np.ndarray | float:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError("gelu input must be finite")
    out = x * 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return out if out.ndim else float(out)


def gelu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad_out * (cdf + x * pdf)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax; outputs are strictly positive and sum to 1."""
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("softmax input must be finite")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Jacobian-vector product of softmax given its output probabilities."""
    inner = (grad_out * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_out - inner)


def bce_loss(y_hat: np.ndarray | float, y: np.ndarray | int) -> np.ndarray | float:
    """Binary cross-entropy -(y log yh + (1-y) log(1-yh)) with clamped yh."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    clamped = np.clip(y_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    out = -(y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped))
    return out if out.ndim else float(out)


def bce_loss_backward(y_hat: np.ndarray | float, y: np.ndarray | int) -> np.ndarray:
    """Gradient w.r.t. the prediction, evaluated at the clamped value.

    Using the clamped prediction in the denominators keeps the gradient
    finite (magnitude <= 1/BCE_CLAMP) at saturated predictions.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    clamped = np.clip(y_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(y / clamped - (1.0 - y) / (1.0 - clamped))


# ---------------------------------------------------------------------------
# linear map


@dataclass
class LinearParams:
    """Dense layer weights: weights (out_dim, in_dim), bias (out_dim,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"linear weights must be 2-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"linear bias must be ({self.weights.shape[0]},), got {self.bias.shape}"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise NumericError("linear parameters must be finite")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


def linear(x: np.ndarray, params: LinearParams) -> np.ndarray:
    """W @ x + b applied to the last axis; accepts any leading axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != expected {params.in_dim}")
    return x @ params.weights.T + params.bias


def linear_backward(
    x: np.ndarray, params: LinearParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of linear: returns (grad_x, grad_weights, grad_bias)."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != x.shape[:-1] + (params.out_dim,):
        raise ShapeError("grad_out shape does not match the linear output")
    grad_weights = np.einsum("...o,...i->oi", grad_out, x)
    grad_bias = np.einsum("...o->o", grad_out)
    grad_x = grad_out @ params.weights
    return grad_x, grad_weights, grad_bias


# ---------------------------------------------------------------------------
# single-head scaled dot-product self-attention


@dataclass
class AttentionParams:
    """Projection matrices for one attention head.

    w_query, w_key: (key_dim, token_dim); w_value: (value_dim, token_dim).
    Scores are scaled by 1/sqrt(key_dim).
    """

    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray

    def __post_init__(self):
        self.w_query = np.asarray(self.w_query, dtype=np.float64)
        self.w_key = np.asarray(self.w_key, dtype=np.float64)
        self.w_value = np.asarray(self.w_value, dtype=np.float64)
        if self.w_query.shape != self.w_key.shape:
            raise ShapeError("query and key projections must share a shape")
        if self.w_value.shape[1] != self.w_query.shape[1]:
            raise ShapeError("value projection must accept the same token dim")
        for m in (self.w_query, self.w_key, self.w_value):
            if m.ndim != 2:
                raise ShapeError("attention projections must be 2-D")
            if not np.isfinite(m).all():
                raise NumericError("attention parameters must be finite")

    @property
    def key_dim(self) -> int:
        return self.w_query.shape[0]

    @property
    def token_dim(self) -> int:
        return self.w_query.shape[1]


@dataclass
class AttentionCache:
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    weights: np.ndarray  # (..., n_tokens, n_tokens), rows sum to 1


def self_attention_forward(
    tokens: np.ndarray, params: AttentionParams
) -> tuple[np.ndarray, AttentionCache]:
    """Tokens are columns: input (..., token_dim, n_tokens).

    Output column j is sum_k softmax_j(q_j . k_k / sqrt(key_dim)) * value_k,
    a convex combination of the projected value tokens.
    """
    tokens, batched = _as_batched(tokens, 2)
    if tokens.shape[1] != params.token_dim:
        raise ShapeError(
            f"tokens have dim {tokens.shape[1]}, projections expect {params.token_dim}"
        )
    if tokens.shape[2] < 1:
        raise ShapeError("need at least one token")
    query = np.einsum("qd,bdn->bqn", params.w_query, tokens)
    key = np.einsum("qd,bdn->bqn", params.w_key, tokens)
    value = np.einsum("sd,bdn->bsn", params.w_value, tokens)
    scores = np.einsum("bqi,bqj->bij", query, key) / math.sqrt(params.key_dim)
    weights = softmax(scores, axis=-1)
    out = np.einsum("bij,bsj->bsi", weights, value)
    cache = AttentionCache(query, key, value, weights)
    if not batched:
        return out[0], cache
    return out, cache


def self_attention(tokens: np.ndarray, params: AttentionParams) -> np.ndarray:
    return self_attention_forward(tokens, params)[0]


def self_attention_backward(
    tokens: np.ndarray,
    params: AttentionParams,
    cache: AttentionCache,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_tokens, grad_w_query, grad_w_key, grad_w_value)."""
    tokens, batched = _as_batched(tokens, 2)
    grad_out, _ = _as_batched(grad_out, 2)
    query, key, value, weights = cache.query, cache.key, cache.value, cache.weights
    if query.ndim == 2:  # cache produced from an unbatched call
        query, key, value, weights = (a[None] for a in (query, key, value, weights))
    scale = 1.0 / math.sqrt(params.key_dim)
    grad_value = np.einsum("bsi,bij->bsj", grad_out, weights)
    grad_weights = np.einsum("bsi,bsj->bij", grad_out, value)
    grad_scores = softmax_backward(weights, grad_weights, axis=-1)
    grad_query = np.einsum("bij,bqj->bqi", grad_scores, key) * scale
    grad_key = np.einsum("bij,bqi->bqj", grad_scores, query) * scale
    grad_wq = np.einsum("bqn,bdn->qd", grad_query, tokens)
    grad_wk = np.einsum("bqn,bdn->qd", grad_key, tokens)
    grad_wv = np.einsum("bsn,bdn->sd", grad_value, tokens)
    grad_tokens = (
        np.einsum("qd,bqn->bdn", params.w_query, grad_query)
        + np.einsum("qd,bqn->bdn", params.w_key, grad_key)
        + np.einsum("sd,bsn->bdn", params.w_value, grad_value)
    )
    return (grad_tokens if batched else grad_tokens[0]), grad_wq, grad_wk, grad_wv


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter moment accumulators; owned by exactly one trainer."""

    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def for_parameters(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in tensors.items()},
            second_moment={k: np.zeros_like(v) for k, v in tensors.items()},
        )


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = ADAM_LEARNING_RATE,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to the tensors in place."""
    if set(grads) != set(tensors):
        raise ShapeError("gradient names do not match parameter names")
    state.step_count += 1
    t = state.step_count
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for name, p in tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + epsilon)
    return tensors, state


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradient_check(
    fn,
    tensors: dict[str, np.ndarray],
    eps: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    fn(tensors) must return (scalar_loss, {name: gradient}). Every tensor
    coordinate is checked unless max_coords_per_tensor caps the count, in
    which case a random subset per tensor is probed (rng required). The
    relative error of coordinate g is |analytic - numeric| normalized by
    max(|analytic|, |numeric|, 1); the worst coordinate is returned.
    """
    loss, analytic = fn(tensors)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    worst = 0.0
    for name, p in tensors.items():
        grad = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        if max_coords_per_tensor is None or p.size <= max_coords_per_tensor:
            coords = np.arange(p.size)
        else:
            if rng is None:
                raise ValueError("rng required when subsampling coordinates")
            coords = rng.choice(p.size, size=max_coords_per_tensor, replace=False)
        for idx in coords:
            orig = p.flat[idx]
            p.flat[idx] = orig + eps
            loss_plus = fn(tensors)[0]
            p.flat[idx] = orig - eps
            loss_minus = fn(tensors)[0]
            p.flat[idx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NumericError(f"finite difference for {name}[{idx}] is not finite")
            err = abs(grad[idx] - numeric) / max(abs(grad[idx]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
