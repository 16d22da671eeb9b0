"""Image embedding network with channel attention, and label attachment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .config import EmbeddingConfig
from .params import ParameterStore, add_conv, add_linear, add_norm
from .tensor import Tensor

ROLES = ("support", "prototype", "query")


@dataclass
class NodeVector:
    features: Tensor
    role: str
    class_id: Optional[int] = None
    angle_id: Optional[int] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown node role {self.role!r}")


def init_embedding(store: ParameterStore, config: EmbeddingConfig, rng: np.random.Generator, prefix: str = "embed"):
    config.validate()
    add_conv(store, f"{prefix}.stem.conv", rng, 3, 1, config.stem_filters)
    add_norm(store, f"{prefix}.stem.bn", config.stem_filters)
    cin = config.stem_filters
    for s, width in enumerate(config.block_widths):
        for b in range(config.basic_blocks_per_stage):
            p = f"{prefix}.s{s}.b{b}"
            add_conv(store, f"{p}.conv1", rng, 3, cin, width)
            add_norm(store, f"{p}.bn1", width)
            add_conv(store, f"{p}.conv2", rng, 3, width, width)
            add_norm(store, f"{p}.bn2", width)
            add_linear(store, f"{p}.att", rng, width, width)
            if config.residual and (cin != width or _stride(s, b) != 1):
                add_conv(store, f"{p}.proj", rng, 1, cin, width)
            cin = width


def _stride(stage: int, block: int) -> int:
    return 2 if stage > 0 and block == 0 else 1


def norm(x: Tensor, store: ParameterStore, name: str, training: bool, axes, batch_eval: bool = False) -> Tensor:
    """Normalization with statistics over ``axes`` of the current input; eval
    mode uses the running statistics unless ``batch_eval`` is set."""
    gamma, beta = store[f"{name}.gamma"], store[f"{name}.beta"]
    if not training and batch_eval:
        return T.batch_norm(x, gamma, beta, axes, training=True)
    return T.batch_norm(
        x, gamma, beta, axes,
        store.buffers[f"{name}.running_mean"],
        store.buffers[f"{name}.running_var"],
        training=training,
    )


def channel_attention(m: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Gate each channel of ``(..., H, W, C)`` by sigmoid(relu(linear(avg_pool(m))))."""
    c = m.shape[-1]
    if weight.shape != (c, c) or bias.shape != (c,):
        raise ValueError(f"channel_attention: map has {c} channels, weights are {weight.shape}/{bias.shape}")
    z = T.global_avg_pool(m)
    s = T.sigmoid(T.relu(T.linear(z, weight, bias)))
    s = T.reshape(s, s.shape[:-1] + (1, 1, c))
    return T.mul(m, s)


def attention_scores(m: Tensor, weight: Tensor, bias: Tensor) -> np.ndarray:
    with T.no_grad():
        z = T.global_avg_pool(m)
        return T.sigmoid(T.relu(T.linear(z, weight, bias))).data


def embed(images, config: EmbeddingConfig, store: ParameterStore, training: bool = False,
          prefix: str = "embed", batch_eval: bool = False) -> Tensor:
    """Embed ``(H, W, 1)`` or ``(B, H, W, 1)`` images to ``(…, out_dim)``.

    Normalization statistics span the whole image batch (one episode) and
    the spatial extent.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 2:
        x = T.reshape(x, x.shape + (1,))
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[-1] != 1:
        raise ValueError(f"embed: expected single-channel images, got shape {x.shape}")
    if x.shape[1] != x.shape[2]:
        raise ValueError(f"embed: images must be square, got {x.shape[1]}x{x.shape[2]}")
    if x.shape[1] != config.input_size:
        raise ValueError(f"embed: image side {x.shape[1]} does not match config input_size {config.input_size}")
    axes = (0, 1, 2)

    def bn(h, name):
        return norm(h, store, f"{prefix}.{name}", training, axes, batch_eval)

    h = T.conv2d(x, store[f"{prefix}.stem.conv.w"], stride=config.stem_stride, pad=1)
    h = T.relu(bn(h, "stem.bn"))
    for s, _ in enumerate(config.block_widths):
        for b in range(config.basic_blocks_per_stage):
            p = f"s{s}.b{b}"
            stride = _stride(s, b)
            y = T.conv2d(h, store[f"{prefix}.{p}.conv1.w"], stride=stride, pad=1)
            y = T.relu(bn(y, f"{p}.bn1"))
            y = T.conv2d(y, store[f"{prefix}.{p}.conv2.w"], stride=1, pad=1)
            y = bn(y, f"{p}.bn2")
            y = channel_attention(y, store[f"{prefix}.{p}.att.w"], store[f"{prefix}.{p}.att.b"])
            if config.residual:
                skip = h
                if f"{prefix}.{p}.proj.w" in store:
                    skip = T.conv2d(h, store[f"{prefix}.{p}.proj.w"], stride=stride, pad=0)
                y = T.add(y, skip)
            h = T.relu(y)
    out = T.global_avg_pool(h)
    return T.reshape(out, (out.shape[-1],)) if squeeze else out


def label_code(class_id: Optional[int], n_way: int) -> np.ndarray:
    """One-hot for a labeled node; uniform 1/N for the unlabeled query."""
    if class_id is None:
        return np.full(n_way, 1.0 / n_way)
    if not 0 <= class_id < n_way:
        raise ValueError(f"class_id {class_id} out of range for {n_way}-way task")
    code = np.zeros(n_way)
    code[class_id] = 1.0
    return code


def attach_label(v: Tensor, class_id: Optional[int], n_way: int, role: Optional[str] = None,
                 angle_id: Optional[int] = None) -> NodeVector:
    role = role or ("query" if class_id is None else "support")
    feats = T.concat([v, Tensor(label_code(class_id, n_way))], axis=-1)
    return NodeVector(feats, role=role, class_id=class_id, angle_id=angle_id)
