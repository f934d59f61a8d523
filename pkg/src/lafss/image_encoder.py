"""Patch transformer backbone plus convolutional neck producing feature maps."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .config import EncoderConfig
from .nn import (
    MLP,
    AttentionConfig,
    Conv2d,
    LayerNorm,
    LayerNorm2d,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    trunc_normal,
)
from .tensor import ShapeError, Tensor, get_default_dtype

# inputs are [0, 1] RGB; centring them keeps the patch embedding from
# adding one large shared vector to every token
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B, 3, H, W) -> (B, H/p * W/p, 3 * p * p), row-major patches, channel-first."""
    if images.ndim == 3:
        return patchify(images.reshape(1, *images.shape), patch).reshape(-1, 3 * patch * patch)
    B, C, H, W = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} is not divisible into {patch}px patches")
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, C * patch * patch)


def unpatchify(patches: np.ndarray, patch: int, size: tuple[int, int]) -> np.ndarray:
    B = patches.shape[0]
    gh, gw = size[0] // patch, size[1] // patch
    x = patches.reshape(B, gh, gw, 3, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(B, 3, size[0], size[1])


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(AttentionConfig(dim, heads), rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, dim * mlp_ratio, dim], rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))


class ViT(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        g = cfg.grid
        self.patch_embed = Linear(3 * cfg.patch_size**2, cfg.vit_dim, rng)
        self.pos_embed = Parameter(trunc_normal(rng, (g * g, cfg.vit_dim)).astype(get_default_dtype()))
        self.blocks = [Block(cfg.vit_dim, cfg.vit_heads, cfg.vit_mlp_ratio, rng) for _ in range(cfg.vit_layers)]

    def forward(self, patches: Tensor) -> Tensor:
        """(B, T, 3p^2) -> (B, D_vit, H_d, W_d)."""
        g = self.cfg.grid
        if patches.shape[1] != g * g:
            raise ShapeError(f"expected {g * g} patches, got {patches.shape[1]}")
        x = self.patch_embed(patches) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        B = x.shape[0]
        return x.transpose(0, 2, 1).reshape(B, self.cfg.vit_dim, g, g)


class ConvNeck(Module):
    """1x1 conv to the prompt width, channel norm, 3x3 conv, channel norm."""

    def __init__(self, d_in: int, d_out: int, rng):
        self.proj = Conv2d(d_in, d_out, 1, rng)
        self.norm1 = LayerNorm2d(d_out)
        self.conv = Conv2d(d_out, d_out, 3, rng, padding=1)
        self.norm2 = LayerNorm2d(d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm2(self.conv(self.norm1(self.proj(x))))


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.vit = ViT(cfg, rng)
        self.neck = ConvNeck(cfg.vit_dim, cfg.neck_out_dim, rng)

    def forward(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, D, H_d, W_d)."""
        size = self.cfg.input_size
        if images.shape[-2:] != (size, size):
            raise ShapeError(f"expected {size}x{size} images, got {images.shape[-2:]}")
        x = (images - PIXEL_MEAN) * (1.0 / PIXEL_STD)
        return self.neck(self.vit(patchify(x, self.cfg.patch_size)))

    def trainable_parameters(self) -> list[Parameter]:
        return [] if self.cfg.frozen else self.parameters()


def load_image(path, size: int) -> np.ndarray:
    """Read an 8-bit RGB image as (3, size, size) floats in [0, 1].

    The longer side is resized bilinearly to ``size``; the remainder is padded
    with zeros at the bottom/right so the aspect ratio is preserved.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        scale = size / max(w, h)
        nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
        if (nw, nh) != (w, h):
            im = im.resize((nw, nh), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    out = np.zeros((3, size, size), dtype=np.float32)
    out[:, :nh, :nw] = arr.transpose(2, 0, 1)
    return out


def load_mask(path, size: int | None = None) -> np.ndarray:
    """Read a 0/255 PNG mask as a boolean grid, resized (nearest) and padded like :func:`load_image`."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None:
            w, h = im.size
            scale = size / max(w, h)
            nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
            if (nw, nh) != (w, h):
                im = im.resize((nw, nh), Image.NEAREST)
        arr = np.asarray(im) > 127
    if size is None:
        return arr
    out = np.zeros((size, size), dtype=bool)
    out[: arr.shape[0], : arr.shape[1]] = arr
    return out
