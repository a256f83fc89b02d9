"""Small pre-norm Vision Transformer with an optional MoViT layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import (bank_is_empty, check_bank_compatible, local_attention, merge_heads,
                        movit_block_forward, project_qkv)
from .tensor import DimensionError, Tensor


class ConfigurationError(ValueError):
    pass


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    in_channels: int = 1
    embed_dim: int = 48
    depth: int = 4
    num_heads: int = 3
    mlp_ratio: float = 2.0
    num_classes: int = 4
    movit_layer: int | None = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.movit_layer is not None and not 0 <= self.movit_layer < self.depth:
            raise ConfigurationError(f"movit_layer {self.movit_layer} outside [0, {self.depth})")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return 1 + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ViTConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated-normal(0.02) weights, zero biases, unit LayerNorm gains, zero gate biases."""
    rng = np.random.default_rng(seed)
    D, hid = cfg.embed_dim, cfg.mlp_hidden
    patch_in = cfg.in_channels * cfg.patch_size ** 2

    def w(*shape):
        return Tensor(np.clip(rng.normal(0.0, 0.02, shape), -0.04, 0.04), requires_grad=True, dtype=dtype)

    def const(value, *shape):
        return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)

    params = {
        "patch.w": w(patch_in, D), "patch.b": const(0.0, D),
        "cls": w(1, 1, D), "pos": w(1, cfg.seq_len, D),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        params.update({
            pre + "ln1.g": const(1.0, D), pre + "ln1.b": const(0.0, D),
            pre + "qkv.w": w(D, 3 * D), pre + "qkv.b": const(0.0, 3 * D),
            pre + "proj.w": w(D, D), pre + "proj.b": const(0.0, D),
            pre + "ln2.g": const(1.0, D), pre + "ln2.b": const(0.0, D),
            pre + "fc1.w": w(D, hid), pre + "fc1.b": const(0.0, hid),
            pre + "fc2.w": w(hid, D), pre + "fc2.b": const(0.0, D),
        })
        if i == cfg.movit_layer:
            params[pre + "gate"] = const(0.0, cfg.num_heads)
    params.update({
        "norm.g": const(1.0, D), "norm.b": const(0.0, D),
        "head.w": w(D, cfg.num_classes), "head.b": const(0.0, cfg.num_classes),
    })
    return params


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype) for k, v in params.items()}


def block_params(params: dict[str, Tensor], i: int) -> dict[str, Tensor]:
    pre = f"blocks.{i}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def patchify(images, cfg: ViTConfig, params: dict[str, Tensor]) -> Tensor:
    """Images ``[B, C, H, W]`` -> token sequence ``[B, 1 + patches, D]``."""
    x = images if isinstance(images, Tensor) else Tensor(images, dtype=params["patch.w"].dtype)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"expected images [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}], got {x.shape}")
    B, C = x.shape[:2]
    g, p = cfg.image_size // cfg.patch_size, cfg.patch_size
    x = T.reshape(x, (B, C, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (B, g * g, C * p * p))
    tokens = T.matmul(x, params["patch.w"]) + params["patch.b"]
    cls = T.expand(params["cls"], (B, 1, cfg.embed_dim))
    return T.concat([cls, tokens], axis=1) + params["pos"]


def mhsa_forward(x: Tensor, p: dict[str, Tensor], num_heads: int):
    """Vanilla multi-head self-attention sub-layer: ``(out, (q, k, v))``."""
    q, k, v = project_qkv(x, p, num_heads)
    local, _ = local_attention(q, k, v)
    out = T.matmul(merge_heads(local), p["proj.w"]) + p["proj.b"]
    return out, (q, k, v)


def mlp_forward(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    h = T.gelu(T.matmul(x, p["fc1.w"]) + p["fc1.b"])
    return T.matmul(h, p["fc2.w"]) + p["fc2.b"]


def block_forward(x: Tensor, p: dict[str, Tensor], num_heads: int, movit: bool = False, **movit_kw):
    """Pre-norm transformer block; ``movit`` swaps in the memory-augmented attention."""
    h = T.layer_norm(x, p["ln1.g"], p["ln1.b"])
    facts = []
    if movit:
        attn_out, _, facts = movit_block_forward(h, p, num_heads, **movit_kw)
    else:
        attn_out, _ = mhsa_forward(h, p, num_heads)
    x = x + attn_out
    x = x + mlp_forward(T.layer_norm(x, p["ln2.g"], p["ln2.b"]), p)
    return x, facts


def vit_forward(images, cfg: ViTConfig, params: dict[str, Tensor], bank=None, mode: str = "train",
                sample_ids=None, knn_k: int = 32, knn_mode: str = "exact", cache_token: str = "cls"):
    """Full forward pass: ``(logits [B, num_classes], facts emitted at the MoViT layer)``."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if cfg.movit_layer is not None:
        if mode == "infer" and bank_is_empty(bank):
            raise ConfigurationError("inference with a MoViT layer needs a non-empty memory or prototype bank")
        check_bank_compatible(bank, cfg.num_heads, cfg.head_dim)
    x = patchify(images, cfg, params)
    facts = []
    for i in range(cfg.depth):
        p = block_params(params, i)
        if i == cfg.movit_layer:
            x, facts = block_forward(x, p, cfg.num_heads, movit=True, bank=bank, mode=mode, knn_k=knn_k,
                                     sample_ids=sample_ids, knn_mode=knn_mode, cache_token=cache_token)
        else:
            x, _ = block_forward(x, p, cfg.num_heads)
    cls = T.layer_norm(x[:, 0], params["norm.g"], params["norm.b"])
    logits = T.matmul(cls, params["head.w"]) + params["head.b"]
    return logits, facts
