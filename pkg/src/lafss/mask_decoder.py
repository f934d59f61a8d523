"""Prototype/query matching and per-pixel class logits."""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig
from .nn import MLP, Conv2d, ConfigError, ConvTranspose2d, LayerNorm2d, Module, Parameter, trunc_normal
from .prompt_encoder import RandomFourierPE, TwoWayTransformer
from .tensor import Tensor, concat, get_default_dtype, matmul, resize_bilinear, where

# logit assigned to padded class channels; exp() of it underflows to 0 in float32
MASKED_LOGIT = -1e4


def class_logits(features: Tensor, prototypes: Tensor) -> Tensor:
    """Dot product of every pixel feature with every prototype.

    ``features`` (B, C, h, w), ``prototypes`` (B, K, C) -> (B, K, h, w).
    """
    B, C, h, w = features.shape
    return matmul(prototypes, features.reshape(B, C, h * w)).reshape(B, prototypes.shape[1], h, w)


class MaskDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.embed_dim
        if d % 8:
            raise ConfigError("embedding width must be divisible by 8")
        self.cfg = cfg
        self.pe = RandomFourierPE(d, rng, cfg.pe_sigma)
        self.background = Parameter(trunc_normal(rng, (1, d)).astype(get_default_dtype()))
        self.two_way = TwoWayTransformer(cfg.decoder_depth, d, cfg.num_heads, cfg.mlp_dim, rng)

        # H/patch -> H/4 with stride-2 transposed convs, channels narrowing to D/8
        n_up = int(round(math.log2(cfg.encoder.patch_size // 4)))
        widths = [d // 4] * (n_up - 1) + [d // 8] if n_up else []
        self.upsample = []
        self.up_norms = []
        c_in = d
        for i, c_out in enumerate(widths):
            self.upsample.append(ConvTranspose2d(c_in, c_out, 2, rng, stride=2))
            if i < n_up - 1:
                self.up_norms.append(LayerNorm2d(c_out))
            c_in = c_out
        self.out_dim = c_in
        self.spatial = [Conv2d(c_in, c_in, 3, rng, padding=1) for _ in range(3)] if cfg.spatial_convs else []
        self.proto_mlp = MLP([d, d, d, self.out_dim], rng)

    def upscale(self, dense: Tensor) -> Tensor:
        x = dense
        for i, up in enumerate(self.upsample):
            x = up(x)
            if i < len(self.up_norms):
                x = self.up_norms[i](x)
            x = x.gelu()
        for i, conv in enumerate(self.spatial):
            x = conv(x)
            if i < len(self.spatial) - 1:
                x = x.gelu()
        return x

    def forward(self, query_feats: Tensor, prototypes: Tensor, valid: np.ndarray) -> Tensor:
        """Query features (B, D, H_d, W_d), foreground prototypes (B, K, D) with
        validity (B, K) -> logits (B, K + 1, H/4, W/4); channel 0 is background."""
        B, d, g, _ = query_feats.shape
        bg = self.background.reshape(1, 1, d).broadcast_to((B, 1, d))
        tokens = concat([bg, prototypes], axis=1)
        token_valid = np.concatenate([np.ones((B, 1), dtype=bool), valid], axis=1)
        tokens = where(token_valid[..., None], tokens, 0.0)
        dense = query_feats.reshape(B, d, g * g).transpose(0, 2, 1)
        tokens, dense = self.two_way(tokens, token_valid, dense, self.pe.grid(g, g))
        feats = self.upscale(dense.transpose(0, 2, 1).reshape(B, d, g, g))
        logits = class_logits(feats, self.proto_mlp(tokens))
        return where(token_valid[:, :, None, None], logits, MASKED_LOGIT)


def predict_mask(logits: Tensor | np.ndarray, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Bilinearly upsample (…, K, h, w) logits and take the arg-max class.

    ``np.argmax`` returns the first maximum, so ties go to the lower index
    (background first).
    """
    x = logits if isinstance(logits, Tensor) else Tensor(logits, dtype=np.asarray(logits).dtype)
    if out_size is not None and tuple(x.shape[-2:]) != tuple(out_size):
        x = resize_bilinear(x, out_size)
    return np.argmax(x.data, axis=-3)
