"""Turns support images plus visual prompts into one prototype per class.

Pipeline per support example: sparse tokens (points / box corners) and dense
mask embeddings are built, sparse tokens attend to each other, each class gets
a token-pool row added, dense embeddings are merged with the support image
features, a two-way transformer mixes the sparse and dense streams, the dense
stream is average-pooled into one embedding per (class, example), examples of
the same class attend to each other, and finally a masked mean gives the
class prototype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .nn import (
    MLP,
    AttentionConfig,
    ConfigError,
    Conv2d,
    LayerNorm,
    LayerNorm2d,
    Module,
    MultiHeadAttention,
    Parameter,
    trunc_normal,
)
from .tensor import ShapeError, Tensor, concat, get_default_dtype, where

POINT, BOX_TOP_LEFT, BOX_BOTTOM_RIGHT = 0, 1, 2


class PromptError(ValueError):
    pass


@dataclass
class PromptAnnotation:
    """Prompts for one class in one support image.

    ``mask`` is a boolean grid at the prompt-mask resolution (or ``None``);
    points are ``(x, y)`` and boxes ``((x1, y1), (x2, y2))``, normalised to [0, 1].
    """

    mask: np.ndarray | None = None
    points: list = None
    boxes: list = None
    class_present: bool = True

    def __post_init__(self):
        self.points = list(self.points or [])
        self.boxes = list(self.boxes or [])
        if not self.class_present:
            return
        for (x1, y1), (x2, y2) in self.boxes:
            if not (x1 < x2 and y1 < y2):
                raise PromptError(f"box corners out of order: {((x1, y1), (x2, y2))}")

    def sparse_tokens(self) -> tuple[list, list]:
        coords, types = [], []
        for p in self.points:
            coords.append(tuple(p))
            types.append(POINT)
        for tl, br in self.boxes:
            coords += [tuple(tl), tuple(br)]
            types += [BOX_TOP_LEFT, BOX_BOTTOM_RIGHT]
        return coords, types


@dataclass
class PromptBatch:
    """Padded prompt arrays for a batch of episodes.

    Shapes: ``masks`` (B, L, N, S, S); ``mask_valid``/``presence`` (B, L, N);
    ``coords`` (B, L, N, M, 2); ``types``/``sparse_valid`` (B, L, N, M);
    ``class_valid`` (B, N); ``pool_rows`` (B, N).
    """

    masks: np.ndarray
    mask_valid: np.ndarray
    coords: np.ndarray
    types: np.ndarray
    sparse_valid: np.ndarray
    presence: np.ndarray
    class_valid: np.ndarray
    pool_rows: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int, int]:
        B, L, N, M = self.types.shape
        return B, L, N, M

    def check(self) -> None:
        if (self.presence.sum(axis=1)[self.class_valid] == 0).any():
            raise PromptError("a class has no support example with prompts")


def collate_prompts(
    annotations: list[list[list[PromptAnnotation]]],
    pool_rows: list[list[int]],
    mask_size: int,
) -> PromptBatch:
    """Pad ``annotations[b][l][n]`` to rectangular arrays.

    Missing examples or classes are filled with absent-class padding.
    """
    B = len(annotations)
    L = max(len(a) for a in annotations)
    N = max(len(r) for r in pool_rows)
    M = 1
    for ep in annotations:
        for ex in ep:
            for ann in ex:
                if ann.class_present:
                    M = max(M, len(ann.points) + 2 * len(ann.boxes))
    masks = np.zeros((B, L, N, mask_size, mask_size), dtype=np.float32)
    mask_valid = np.zeros((B, L, N), dtype=bool)
    coords = np.zeros((B, L, N, M, 2), dtype=np.float32)
    types = np.zeros((B, L, N, M), dtype=np.int64)
    sparse_valid = np.zeros((B, L, N, M), dtype=bool)
    presence = np.zeros((B, L, N), dtype=bool)
    class_valid = np.zeros((B, N), dtype=bool)
    rows = np.zeros((B, N), dtype=np.int64)
    for b, ep in enumerate(annotations):
        n_cls = len(pool_rows[b])
        class_valid[b, :n_cls] = True
        rows[b, :n_cls] = pool_rows[b]
        for l, ex in enumerate(ep):
            for n, ann in enumerate(ex):
                if not ann.class_present:
                    continue
                c, t = ann.sparse_tokens()
                has_mask = ann.mask is not None and bool(np.any(ann.mask))
                if not c and not has_mask:
                    continue
                presence[b, l, n] = True
                if has_mask:
                    if ann.mask.shape != (mask_size, mask_size):
                        raise ShapeError(f"prompt mask must be {mask_size}x{mask_size}, got {ann.mask.shape}")
                    masks[b, l, n] = ann.mask
                    mask_valid[b, l, n] = True
                if c:
                    coords[b, l, n, : len(c)] = c
                    types[b, l, n, : len(t)] = t
                    sparse_valid[b, l, n, : len(c)] = True
    return PromptBatch(masks, mask_valid, coords, types, sparse_valid, presence, class_valid, rows)


class RandomFourierPE(Module):
    """Positional embedding of normalised (x, y) via a fixed Gaussian projection."""

    def __init__(self, dim: int, rng, sigma: float = 1.0):
        # fixed buffer, not a Parameter
        self.projection = (rng.standard_normal((2, dim // 2)) * sigma).astype(get_default_dtype())

    def encode(self, coords: np.ndarray) -> np.ndarray:
        c = 2.0 * np.asarray(coords, dtype=self.projection.dtype) - 1.0
        ang = 2.0 * np.pi * (c @ self.projection)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)

    def grid(self, h: int, w: int) -> np.ndarray:
        """(h * w, D) embedding of the cell centres, row-major."""
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        return self.encode(np.stack([xs, ys], axis=-1).reshape(-1, 2))


class MaskEncoder(Module):
    """Strided CNN taking a (S, S) mask to a (D, H_d, W_d) dense embedding."""

    def __init__(self, mask_size: int, grid: int, dim: int, rng):
        stages = int(round(math.log2(mask_size // grid)))
        channels = [min(4 * 2**i, dim) for i in range(stages - 1)] + [dim]
        self.convs = []
        self.norms = []
        c_in = 1
        for i, c_out in enumerate(channels):
            self.convs.append(Conv2d(c_in, c_out, 2, rng, stride=2))
            if i < stages - 1:
                self.norms.append(LayerNorm2d(c_out))
            c_in = c_out
        self.no_mask = Parameter(trunc_normal(rng, (dim,)).astype(get_default_dtype()))
        self.mask_size = mask_size

    def forward(self, masks: Tensor) -> Tensor:
        """(P, S, S) -> (P, D, H_d, W_d)."""
        if masks.shape[-2:] != (self.mask_size, self.mask_size):
            raise ShapeError(f"mask must be {self.mask_size}x{self.mask_size}, got {masks.shape[-2:]}")
        x = masks.reshape(masks.shape[0], 1, *masks.shape[-2:])
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.norms):
                x = self.norms[i](x).gelu()
        return x


class TwoWayLayer(Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, rng):
        cfg = AttentionConfig(dim, heads)
        self.norm_s = LayerNorm(dim)
        self.norm_d_kv = LayerNorm(dim)
        self.sparse_to_dense = MultiHeadAttention(cfg, rng)
        self.norm_s_mlp = LayerNorm(dim)
        self.mlp_s = MLP([dim, mlp_dim, dim], rng)
        self.norm_d = LayerNorm(dim)
        self.norm_s_kv = LayerNorm(dim)
        self.dense_to_sparse = MultiHeadAttention(cfg, rng)
        self.norm_d_mlp = LayerNorm(dim)
        self.mlp_d = MLP([dim, mlp_dim, dim], rng)

    def forward(self, sparse, sparse_valid, dense, pe):
        keep = sparse_valid[..., None]
        dk = self.norm_d_kv(dense)
        sparse = sparse + self.sparse_to_dense(self.norm_s(sparse), dk + pe, dk)
        sparse = sparse + self.mlp_s(self.norm_s_mlp(sparse))
        sparse = where(keep, sparse, 0.0)
        sk = self.norm_s_kv(sparse)
        dense = dense + self.dense_to_sparse(self.norm_d(dense) + pe, sk, sk, mask=sparse_valid)
        dense = dense + self.mlp_d(self.norm_d_mlp(dense))
        return sparse, dense


class TwoWayTransformer(Module):
    """Alternating sparse->dense and dense->sparse attention.

    ``sparse``: (S, M, D) with validity (S, M); ``dense``: (S, T, D); ``pe``: (T, D).
    """

    def __init__(self, depth: int, dim: int, heads: int, mlp_dim: int, rng):
        self.layers = [TwoWayLayer(dim, heads, mlp_dim, rng) for _ in range(depth)]

    def forward(self, sparse: Tensor, sparse_valid: np.ndarray, dense: Tensor, pe) -> tuple[Tensor, Tensor]:
        pe = pe if isinstance(pe, Tensor) else Tensor(pe, dtype=dense.dtype)
        for layer in self.layers:
            sparse, dense = layer(sparse, sparse_valid, dense, pe)
        return sparse, dense


class ClassExampleMixer(Module):
    """Self-attention across the examples of each class (pre-norm, residual)."""

    def __init__(self, dim: int, heads: int, rng):
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(AttentionConfig(dim, heads), rng)

    def forward(self, emb: Tensor, presence: np.ndarray) -> Tensor:
        """``emb`` (..., L, D); ``presence`` (..., L)."""
        h = self.norm(emb)
        out = emb + self.attn(h, h, h, mask=presence)
        return where(presence[..., None], out, 0.0)


def aggregate_prototypes(emb: Tensor, presence: np.ndarray) -> Tensor:
    """Masked mean over the example axis: (..., L, D) -> (..., D)."""
    count = presence.sum(axis=-1, keepdims=True).astype(emb.dtype)
    total = where(presence[..., None], emb, 0.0).sum(axis=-2)
    return total * (1.0 / np.maximum(count, 1))


class PromptEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.embed_dim
        grid = cfg.encoder.grid
        self.cfg = cfg
        self.pe = RandomFourierPE(d, rng, cfg.pe_sigma)
        dt = get_default_dtype()
        self.type_embed = Parameter(trunc_normal(rng, (3, d)).astype(dt))
        self.mask_encoder = MaskEncoder(cfg.mask_size, grid, d, rng)
        self.prompt_attn = MultiHeadAttention(AttentionConfig(d, cfg.num_heads), rng)
        self.token_pool = Parameter(rng.standard_normal((cfg.pool_size, d)).astype(dt)) if cfg.token_pool else None
        self.two_way = TwoWayTransformer(cfg.prompt_depth, d, cfg.num_heads, cfg.mlp_dim, rng)
        self.mixer = ClassExampleMixer(d, cfg.num_heads, rng) if cfg.class_example_mixer else None

    # -- individual stages --------------------------------------------------------------

    def embed_sparse(self, coords: np.ndarray, types: np.ndarray, valid: np.ndarray) -> Tensor:
        """Point/box-corner tokens: PE(coordinate) + type embedding; padding is zero."""
        c = coords[valid]
        if c.size and (c.min() < 0 or c.max() > 1):
            raise PromptError("prompt coordinates must lie in [0, 1]")
        pe = Tensor(self.pe.encode(np.where(valid[..., None], coords, 0.5)), dtype=self.type_embed.dtype)
        tok = pe + self.type_embed[np.where(valid, types, POINT)]
        return where(valid[..., None], tok, 0.0)

    def encode_points(self, points, boxes) -> Tensor:
        """Sparse tokens for one list of points and boxes: (n_points + 2 n_boxes, D)."""
        coords, types = PromptAnnotation(points=points, boxes=boxes).sparse_tokens()
        if not coords:
            raise PromptError("no points or boxes given")
        coords = np.asarray(coords, dtype=np.float32)
        return self.embed_sparse(coords, np.asarray(types), np.ones(len(types), dtype=bool))

    def encode_masks(self, masks: np.ndarray, valid: np.ndarray) -> Tensor:
        """Dense embeddings (..., D, H_d, W_d); invalid entries get the no-mask embedding."""
        lead = valid.shape
        d, g = self.cfg.embed_dim, self.cfg.encoder.grid
        flat_valid = valid.reshape(-1)
        no_mask = self.mask_encoder.no_mask.reshape(1, d, 1, 1).broadcast_to((1, d, g, g))
        if not flat_valid.any():
            return no_mask.broadcast_to((int(np.prod(lead)), d, g, g)).reshape(*lead, d, g, g)
        sel = masks.reshape(-1, *masks.shape[-2:])[flat_valid]
        enc = self.mask_encoder(Tensor(sel, dtype=no_mask.dtype))
        table = concat([enc, no_mask], axis=0)
        index = np.full(flat_valid.shape, len(sel))
        index[flat_valid] = np.arange(len(sel))
        return table[index].reshape(*lead, d, g, g)

    def prompt_self_attention(self, sparse: Tensor, valid: np.ndarray) -> Tensor:
        """Residual self-attention across all N*M prompt tokens of each example.

        Padded slots are excluded as keys and receive no attention update.
        """
        update = self.prompt_attn(sparse, sparse, sparse, mask=valid)
        return sparse + where(valid[..., None], update, 0.0)

    def pool_rows(self, rows: np.ndarray) -> Tensor | None:
        if self.token_pool is None:
            return None
        if rows.size and rows.max() >= self.token_pool.shape[0]:
            raise ConfigError("token-pool row index out of range")
        return self.token_pool[rows]

    # -- full pipeline ------------------------------------------------------------------

    def example_embeddings(self, feats: Tensor, prompts: PromptBatch) -> Tensor:
        """Per (class, example) embeddings after pooling and mixing: (B, N, L, D)."""
        B, L, N, M = prompts.dims
        d, g = self.cfg.embed_dim, self.cfg.encoder.grid
        if N > self.cfg.pool_size:
            raise ConfigError(f"{N} classes exceed token pool size {self.cfg.pool_size}")
        valid = prompts.sparse_valid & prompts.presence[..., None]

        sparse = self.embed_sparse(prompts.coords, prompts.types, valid)  # B L N M D
        flat_valid = valid.reshape(B * L, N * M)
        sparse = self.prompt_self_attention(sparse.reshape(B * L, N * M, d), flat_valid)
        sparse = sparse.reshape(B, L, N, M, d)

        dense = self.encode_masks(prompts.masks, prompts.mask_valid & prompts.presence)  # B L N D g g
        rows = self.pool_rows(prompts.pool_rows)
        if rows is not None:
            sparse = where(valid[..., None], sparse + rows.reshape(B, 1, N, 1, d), 0.0)
            dense = dense + rows.reshape(B, 1, N, d, 1, 1)
        dense = dense + feats.reshape(B, L, 1, d, g, g)

        dense = dense.reshape(B * L * N, d, g * g).transpose(0, 2, 1)
        _, dense = self.two_way(sparse.reshape(B * L * N, M, d), valid.reshape(B * L * N, M), dense, self.pe.grid(g, g))
        emb = dense.mean(axis=1).reshape(B, L, N, d).transpose(0, 2, 1, 3)  # B N L D

        presence = prompts.presence.transpose(0, 2, 1)  # B N L
        if self.mixer is not None:
            emb = self.mixer(emb, presence)
        return where(presence[..., None], emb, 0.0)

    def forward(self, feats: Tensor, prompts: PromptBatch) -> Tensor:
        """Support features (B*L, D, H_d, W_d) and prompts -> prototypes (B, N, D)."""
        emb = self.example_embeddings(feats, prompts)
        return aggregate_prototypes(emb, prompts.presence.transpose(0, 2, 1))


__all__ = [
    "PromptAnnotation",
    "PromptBatch",
    "PromptEncoder",
    "PromptError",
    "TwoWayTransformer",
    "ClassExampleMixer",
    "MaskEncoder",
    "RandomFourierPE",
    "aggregate_prototypes",
    "collate_prompts",
]
