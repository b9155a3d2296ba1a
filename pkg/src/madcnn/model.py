"""MAD-CNN: per-joint dilated convolution branches, single-head attention
fusion, and a two-class softmax head, plus the ablation variants that drop
modularization, dilation, or attention.

The topology is fixed, so the backward pass is written by hand on top of the
kernels in nn_kernels. All forward/backward entry points accept a batch of
frames; the single-frame API wraps the batched one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn_kernels as nk
from .errors import ConfigError, NumericError, ShapeError

VARIANT_NAMES = ("MAD", "M", "MD", "MA", "AD")

# (use_modularization, use_dilation, use_attention) per ablation variant.
_VARIANT_FLAGS = {
    "MAD": (True, True, True),
    "M": (True, False, False),
    "MD": (True, True, False),
    "MA": (True, False, True),
    "AD": (False, True, True),
}

WEIGHT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    use_modularization: bool = True
    use_dilation: bool = True
    use_attention: bool = True
    joints: int = 2
    window_steps: int = 11
    channels_per_joint: int = 2
    conv_filters: tuple[int, int] = (16, 32)
    joint_fc_dim: int = 32
    head_fc_dim: int = 64
    classes: int = 2

    def __post_init__(self):
        flags = (self.use_modularization, self.use_dilation, self.use_attention)
        if flags not in _VARIANT_FLAGS.values():
            raise ConfigError(f"flag combination {flags} is not an ablation variant")
        if self.joints < 1:
            raise ConfigError("need at least one joint")
        if self.classes != 2:
            raise ConfigError("the head is a two-class classifier")

    @property
    def dilations(self) -> tuple[int, int]:
        return (4, 8) if self.use_dilation else (1, 1)

    @property
    def branch_count(self) -> int:
        return self.joints if self.use_modularization else 1

    @property
    def branch_in_channels(self) -> int:
        if self.use_modularization:
            return self.channels_per_joint
        return self.joints * self.channels_per_joint

    @property
    def fused_dim(self) -> int:
        return self.joints * self.joint_fc_dim

    @property
    def branch_fc_dim(self) -> int:
        # Non-modular: one branch produces the full fused vector.
        return self.joint_fc_dim if self.use_modularization else self.fused_dim

    @property
    def token_count(self) -> int:
        return self.joints

    @property
    def token_dim(self) -> int:
        return self.joint_fc_dim

    @property
    def pooled_lengths(self) -> tuple[int, int]:
        len1 = self.window_steps // 2
        return len1, len1 // 2

    @property
    def branch_flat_dim(self) -> int:
        return self.conv_filters[1] * self.pooled_lengths[1]

    def flags(self) -> tuple[bool, bool, bool]:
        return (self.use_modularization, self.use_dilation, self.use_attention)


def variant_config(name: str) -> ModelConfig:
    """Config for one of the ablation variants MAD, M, MD, MA, AD."""
    if name not in _VARIANT_FLAGS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANT_NAMES}")
    mod, dil, att = _VARIANT_FLAGS[name]
    return ModelConfig(use_modularization=mod, use_dilation=dil, use_attention=att)


def variant_name(config: ModelConfig) -> str:
    for name, flags in _VARIANT_FLAGS.items():
        if flags == config.flags():
            return name
    raise ConfigError("config does not match any variant")  # unreachable


@dataclass
class Prediction:
    p_no_collision: float
    p_collision: float


@dataclass
class BranchParameters:
    conv1: nk.ConvParams
    conv2: nk.ConvParams
    fc: nk.LinearParams


@dataclass
class ModelParameters:
    config: ModelConfig
    seed: int
    branches: list[BranchParameters]
    attention: nk.AttentionParams | None
    head_fc: nk.LinearParams
    out_fc: nk.LinearParams

    def tensors(self) -> dict[str, np.ndarray]:
        """Named views of every learnable array, in a stable order."""
        named: dict[str, np.ndarray] = {}
        for i, br in enumerate(self.branches):
            named[f"branch{i}.conv1.weights"] = br.conv1.weights
            named[f"branch{i}.conv1.bias"] = br.conv1.bias
            named[f"branch{i}.conv2.weights"] = br.conv2.weights
            named[f"branch{i}.conv2.bias"] = br.conv2.bias
            named[f"branch{i}.fc.weights"] = br.fc.weights
            named[f"branch{i}.fc.bias"] = br.fc.bias
        if self.attention is not None:
            named["attention.w_query"] = self.attention.w_query
            named["attention.w_key"] = self.attention.w_key
            named["attention.w_value"] = self.attention.w_value
        named["head_fc.weights"] = self.head_fc.weights
        named["head_fc.bias"] = self.head_fc.bias
        named["out_fc.weights"] = self.out_fc.weights
        named["out_fc.bias"] = self.out_fc.bias
        return named


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(1.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_model(config: ModelConfig, seed: int) -> ModelParameters:
    """Seeded fan-in uniform initialization, biases zero.

    Identical (config, seed) yields bit-identical parameters: the draws
    happen in the fixed order of ModelParameters.tensors().
    """
    rng = np.random.default_rng(seed)
    f1, f2 = config.conv_filters
    d1, d2 = config.dilations
    in_ch = config.branch_in_channels
    branches = []
    for _ in range(config.branch_count):
        conv1 = nk.ConvParams(
            _uniform(rng, in_ch * nk.KERNEL_SIZE, (f1, in_ch, nk.KERNEL_SIZE)),
            np.zeros(f1),
            dilation=d1,
        )
        conv2 = nk.ConvParams(
            _uniform(rng, f1 * nk.KERNEL_SIZE, (f2, f1, nk.KERNEL_SIZE)),
            np.zeros(f2),
            dilation=d2,
        )
        fc = nk.LinearParams(
            _uniform(rng, config.branch_flat_dim, (config.branch_fc_dim, config.branch_flat_dim)),
            np.zeros(config.branch_fc_dim),
        )
        branches.append(BranchParameters(conv1, conv2, fc))
    attention = None
    if config.use_attention:
        dim = config.token_dim
        attention = nk.AttentionParams(
            _uniform(rng, dim, (dim, dim)),
            _uniform(rng, dim, (dim, dim)),
            _uniform(rng, dim, (dim, dim)),
        )
    head_fc = nk.LinearParams(
        _uniform(rng, config.fused_dim, (config.head_fc_dim, config.fused_dim)),
        np.zeros(config.head_fc_dim),
    )
    out_fc = nk.LinearParams(
        _uniform(rng, config.head_fc_dim, (config.classes, config.head_fc_dim)),
        np.zeros(config.classes),
    )
    return ModelParameters(config, seed, branches, attention, head_fc, out_fc)


def count_parameters(config: ModelConfig) -> int:
    """Learnable scalar count from the declared shapes alone."""
    f1, f2 = config.conv_filters
    in_ch = config.branch_in_channels
    per_branch = (
        f1 * in_ch * nk.KERNEL_SIZE + f1
        + f2 * f1 * nk.KERNEL_SIZE + f2
        + config.branch_fc_dim * config.branch_flat_dim + config.branch_fc_dim
    )
    total = config.branch_count * per_branch
    if config.use_attention:
        total += 3 * config.token_dim * config.token_dim
    total += config.head_fc_dim * config.fused_dim + config.head_fc_dim
    total += config.classes * config.head_fc_dim + config.classes
    return total


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class _BranchCache:
    x: np.ndarray            # branch input (B, in_ch, steps)
    pre1: np.ndarray         # conv1 output, gelu input
    pool1_idx: np.ndarray
    pool1_in_len: int
    pooled1: np.ndarray      # conv2 input
    pre2: np.ndarray
    pool2_idx: np.ndarray
    pool2_in_len: int
    flat: np.ndarray         # fc input
    fc_pre: np.ndarray       # fc output, gelu input


@dataclass
class ActivationCache:
    values: np.ndarray
    branch_caches: list[_BranchCache]
    fused: np.ndarray
    tokens: np.ndarray | None
    attn_cache: nk.AttentionCache | None
    flat64: np.ndarray
    head_pre: np.ndarray
    head_act: np.ndarray
    probs: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]


def _branch_inputs(config: ModelConfig, values: np.ndarray) -> list[np.ndarray]:
    batch = values.shape[0]
    if config.use_modularization:
        return [values[:, j] for j in range(config.joints)]
    return [values.reshape(batch, config.joints * config.channels_per_joint, config.window_steps)]


def forward_batch(params: ModelParameters, values: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    """Forward over a batch of frames (B, joints, channels, steps).

    Returns class probabilities (B, 2) with column order
    (no collision, collision), and the cache needed by backward_batch.
    """
    config = params.config
    values = np.asarray(values, dtype=np.float64)
    expected = (config.joints, config.channels_per_joint, config.window_steps)
    if values.ndim != 4 or values.shape[1:] != expected:
        raise ShapeError(f"frame batch must be (B, {expected[0]}, {expected[1]}, {expected[2]})")
    if not np.isfinite(values).all():
        raise NumericError("frame values must be finite")
    batch = values.shape[0]

    branch_caches = []
    branch_outputs = []
    for x, br in zip(_branch_inputs(config, values), params.branches):
        pre1 = nk.conv1d_dilated(x, br.conv1)
        act1 = nk.gelu(pre1)
        pooled1, idx1 = nk.maxpool1d(act1)
        pre2 = nk.conv1d_dilated(pooled1, br.conv2)
        act2 = nk.gelu(pre2)
        pooled2, idx2 = nk.maxpool1d(act2)
        flat = pooled2.reshape(batch, -1)
        fc_pre = nk.linear(flat, br.fc)
        branch_outputs.append(nk.gelu(fc_pre))
        branch_caches.append(
            _BranchCache(
                x, pre1, idx1, act1.shape[-1], pooled1, pre2, idx2, act2.shape[-1], flat, fc_pre
            )
        )

    fused = branch_outputs[0] if len(branch_outputs) == 1 else np.concatenate(branch_outputs, axis=1)

    tokens = None
    attn_cache = None
    if config.use_attention:
        # Token j is the 32-dim feature block of joint j, stored as a column.
        tokens = fused.reshape(batch, config.token_count, config.token_dim).transpose(0, 2, 1)
        attn_out, attn_cache = nk.self_attention_forward(tokens, params.attention)
        flat64 = attn_out.transpose(0, 2, 1).reshape(batch, config.fused_dim)
    else:
        flat64 = fused

    head_pre = nk.linear(flat64, params.head_fc)
    head_act = nk.gelu(head_pre)
    logits = nk.linear(head_act, params.out_fc)
    probs = nk.softmax(logits, axis=-1)
    if not np.isfinite(probs).all():
        raise NumericError("non-finite activation in the output layer")
    cache = ActivationCache(
        values, branch_caches, fused, tokens, attn_cache, flat64, head_pre, head_act, probs
    )
    return probs, cache


def backward_batch(
    params: ModelParameters, cache: ActivationCache, targets: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the mean BCE over the batch w.r.t. every parameter.

    targets: (B,) labels in {0, 1}. Returns (grads keyed like tensors(),
    gradient w.r.t. the input frame values). With a single frame this is
    exactly the per-frame gradient.
    """
    config = params.config
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    batch = cache.batch_size
    if targets.shape[0] != batch:
        raise ShapeError("one target per frame required")
    probs = cache.probs

    grad_probs = np.zeros_like(probs)
    grad_probs[:, 1] = nk.bce_loss_backward(probs[:, 1], targets) / batch
    grad_logits = nk.softmax_backward(probs, grad_probs, axis=-1)

    grad_head_act, g_out_w, g_out_b = nk.linear_backward(cache.head_act, params.out_fc, grad_logits)
    grad_head_pre = nk.gelu_backward(cache.head_pre, grad_head_act)
    grad_flat64, g_head_w, g_head_b = nk.linear_backward(cache.flat64, params.head_fc, grad_head_pre)

    grads: dict[str, np.ndarray] = {}
    if config.use_attention:
        grad_attn_out = grad_flat64.reshape(batch, config.token_count, config.token_dim)
        grad_attn_out = grad_attn_out.transpose(0, 2, 1)
        grad_tokens, g_wq, g_wk, g_wv = nk.self_attention_backward(
            cache.tokens, params.attention, cache.attn_cache, grad_attn_out
        )
        grad_fused = grad_tokens.transpose(0, 2, 1).reshape(batch, config.fused_dim)
        grads["attention.w_query"] = g_wq
        grads["attention.w_key"] = g_wk
        grads["attention.w_value"] = g_wv
    else:
        grad_fused = grad_flat64

    grad_values = np.zeros_like(cache.values)
    offset = 0
    for i, (br, bc) in enumerate(zip(params.branches, cache.branch_caches)):
        width = config.branch_fc_dim
        grad_h = grad_fused[:, offset:offset + width]
        offset += width
        grad_fc_pre = nk.gelu_backward(bc.fc_pre, grad_h)
        grad_flat, g_fc_w, g_fc_b = nk.linear_backward(bc.flat, br.fc, grad_fc_pre)
        grad_pooled2 = grad_flat.reshape(batch, config.conv_filters[1], config.pooled_lengths[1])
        grad_act2 = nk.maxpool1d_backward(bc.pool2_idx, bc.pool2_in_len, grad_pooled2)
        grad_pre2 = nk.gelu_backward(bc.pre2, grad_act2)
        grad_pooled1, g_c2_w, g_c2_b = nk.conv1d_dilated_backward(bc.pooled1, br.conv2, grad_pre2)
        grad_act1 = nk.maxpool1d_backward(bc.pool1_idx, bc.pool1_in_len, grad_pooled1)
        grad_pre1 = nk.gelu_backward(bc.pre1, grad_act1)
        grad_x, g_c1_w, g_c1_b = nk.conv1d_dilated_backward(bc.x, br.conv1, grad_pre1)
        grads[f"branch{i}.conv1.weights"] = g_c1_w
        grads[f"branch{i}.conv1.bias"] = g_c1_b
        grads[f"branch{i}.conv2.weights"] = g_c2_w
        grads[f"branch{i}.conv2.bias"] = g_c2_b
        grads[f"branch{i}.fc.weights"] = g_fc_w
        grads[f"branch{i}.fc.bias"] = g_fc_b
        if config.use_modularization:
            grad_values[:, i] = grad_x
        else:
            grad_values += grad_x.reshape(grad_values.shape)

    grads["head_fc.weights"] = g_head_w
    grads["head_fc.bias"] = g_head_b
    grads["out_fc.weights"] = g_out_w
    grads["out_fc.bias"] = g_out_b
    ordered = {name: grads[name] for name in params.tensors()}
    return ordered, grad_values


def forward(params: ModelParameters, frame) -> tuple[Prediction, ActivationCache]:
    """Single-frame forward; frame is an InputFrame or a (2, 2, 11) array."""
    values = frame.values if hasattr(frame, "values") else np.asarray(frame)
    probs, cache = forward_batch(params, values[None])
    return Prediction(float(probs[0, 0]), float(probs[0, 1])), cache


def backward(
    params: ModelParameters, cache: ActivationCache, target: int
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-frame gradients of bce_loss(p_collision, target)."""
    if cache.batch_size != 1:
        raise ShapeError("backward expects a single-frame cache; use backward_batch")
    return backward_batch(params, cache, np.asarray([target]))


def predict(params: ModelParameters, frame, threshold: float = 0.5) -> int:
    """1 iff the collision probability reaches the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie strictly between 0 and 1")
    prediction, _ = forward(params, frame)
    return int(prediction.p_collision >= threshold)


# ---------------------------------------------------------------------------
# weight file I/O


def save_weights(params: ModelParameters, path, normalization=None) -> None:
    """Versioned JSON weight file; floats round-trip bit-exactly.

    The optional normalization stats travel with the weights so that a
    saved model carries its own input scaling.
    """
    config = params.config
    doc = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "config": {
            "use_modularization": config.use_modularization,
            "use_dilation": config.use_dilation,
            "use_attention": config.use_attention,
            "joints": config.joints,
            "window_steps": config.window_steps,
            "channels_per_joint": config.channels_per_joint,
            "conv_filters": list(config.conv_filters),
            "joint_fc_dim": config.joint_fc_dim,
            "head_fc_dim": config.head_fc_dim,
            "classes": config.classes,
        },
        "seed": params.seed,
        "normalization": None,
        "tensors": {
            name: {"shape": list(t.shape), "values": t.reshape(-1).tolist()}
            for name, t in params.tensors().items()
        },
    }
    if normalization is not None:
        doc["normalization"] = {
            "channel_min": normalization.channel_min.tolist(),
            "channel_max": normalization.channel_max.tolist(),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_weights(path):
    """Returns (ModelParameters, NormalizationStats | None)."""
    from .datapipe import NormalizationStats

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != WEIGHT_FORMAT_VERSION:
        raise ConfigError(f"unsupported weight file version {doc.get('format_version')!r}")
    cfg = doc["config"]
    config = ModelConfig(
        use_modularization=cfg["use_modularization"],
        use_dilation=cfg["use_dilation"],
        use_attention=cfg["use_attention"],
        joints=cfg["joints"],
        window_steps=cfg["window_steps"],
        channels_per_joint=cfg["channels_per_joint"],
        conv_filters=tuple(cfg["conv_filters"]),
        joint_fc_dim=cfg["joint_fc_dim"],
        head_fc_dim=cfg["head_fc_dim"],
        classes=cfg["classes"],
    )
    params = build_model(config, doc["seed"])
    stored = doc["tensors"]
    tensors = params.tensors()
    if set(stored) != set(tensors):
        raise ConfigError("weight file tensors do not match the configuration")
    for name, t in tensors.items():
        entry = stored[name]
        values = np.asarray(entry["values"], dtype=np.float64)
        if tuple(entry["shape"]) != t.shape or values.size != t.size:
            raise ConfigError(f"tensor {name} has unexpected shape in weight file")
        t[...] = values.reshape(t.shape)
    stats = None
    if doc.get("normalization") is not None:
        stats = NormalizationStats(
            np.asarray(doc["normalization"]["channel_min"], dtype=np.float64),
            np.asarray(doc["normalization"]["channel_max"], dtype=np.float64),
        )
    return params, stats
