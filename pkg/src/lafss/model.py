"""Full few-shot segmenter: shared image encoder, prompt encoder, mask decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .image_encoder import ImageEncoder
from .mask_decoder import MASKED_LOGIT, MaskDecoder, predict_mask
from .nn import Module, Parameter
from .prompt_encoder import PromptBatch, PromptEncoder, aggregate_prototypes
from .tensor import ShapeError, Tensor, get_default_dtype, no_grad, resize_bilinear, where


@dataclass
class EpisodeBatch:
    """Images and padded prompts for B episodes sharing one (N, K) shape.

    ``query`` (B, 3, H, W); ``support`` (B, L, 3, H, W); ``labels`` (B, H, W)
    with 0 for background and ``n + 1`` for the episode's n-th class.
    Missing support slots (episodes with fewer than L images) are zero images
    whose prompts are all absent.
    """

    query: np.ndarray
    support: np.ndarray
    prompts: PromptBatch
    labels: np.ndarray | None = None
    classes: list | None = None
    config: tuple | None = None

    @property
    def size(self) -> int:
        return self.query.shape[0]

    def check(self) -> None:
        B, L, N, _ = self.prompts.dims
        if self.support.shape[:2] != (B, L):
            raise ShapeError(f"support images {self.support.shape[:2]} do not match prompts {(B, L)}")
        if self.query.shape[0] != B:
            raise ShapeError("query batch does not match prompts")
        self.prompts.check()


class PromptSegModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg.encoder, rng)
        self.prompt_encoder = PromptEncoder(cfg, rng)
        self.decoder = MaskDecoder(cfg, rng)

    def trainable_parameters(self) -> list[Parameter]:
        frozen = {id(p) for p in self.encoder.parameters()} if self.cfg.encoder.frozen else set()
        return [p for p in self.parameters() if id(p) not in frozen]

    def encode_images(self, batch: EpisodeBatch) -> tuple[Tensor, Tensor]:
        """One encoder pass over queries and supports -> (B, D, g, g), (B*L, D, g, g)."""
        B = batch.size
        L = batch.support.shape[1]
        images = np.concatenate([batch.query, batch.support.reshape(B * L, *batch.support.shape[2:])])
        feats = self.encoder(Tensor(images, dtype=get_default_dtype()))
        if self.cfg.encoder.frozen:
            feats = feats.detach()
        return feats[:B], feats[B:]

    def example_embeddings(self, support_feats: Tensor, prompts: PromptBatch) -> Tensor:
        return self.prompt_encoder.example_embeddings(support_feats, prompts)

    def forward(self, batch: EpisodeBatch, prototypes: Tensor | None = None) -> Tensor:
        """Logits (B, N + 1, H/4, W/4); ``prototypes`` (B, N, D) overrides the prompt path."""
        batch.check()
        q, s = self.encode_images(batch)
        p = batch.prompts
        order = canonical_class_order(p.class_valid, p.pool_rows)
        rows = np.arange(len(order))[:, None]
        back = np.concatenate([np.zeros_like(order[:, :1]), 1 + np.argsort(order, axis=1)], axis=1)
        p = reorder_classes(p, order)
        valid = p.class_valid
        if prototypes is not None:
            return self.decoder(q, prototypes[rows, order], valid)[rows, back]
        emb = self.example_embeddings(s, p)  # B N L D
        presence = p.presence.transpose(0, 2, 1)
        if not self.cfg.per_example_prototypes:
            return self.decoder(q, aggregate_prototypes(emb, presence), valid)[rows, back]
        # decode once per support example and keep the strongest response per class
        fused = None
        for l in range(emb.shape[2]):
            ok = valid & presence[:, :, l]
            if not ok.any():
                continue
            out = self.decoder(q, emb[:, :, l], ok)
            fg_ok = np.concatenate([np.ones((len(ok), 1), dtype=bool), ok], axis=1)[:, :, None, None]
            out = where(fg_ok, out, MASKED_LOGIT)
            fused = out if fused is None else _maximum(fused, out)
        return fused[rows, back]

    def prototypes(self, batch: EpisodeBatch) -> Tensor:
        batch.check()
        _, s = self.encode_images(batch)
        order = canonical_class_order(batch.prompts.class_valid, batch.prompts.pool_rows)
        p = reorder_classes(batch.prompts, order)
        protos = aggregate_prototypes(self.example_embeddings(s, p), p.presence.transpose(0, 2, 1))
        return protos[np.arange(len(order))[:, None], np.argsort(order, axis=1)]

    def full_logits(self, batch: EpisodeBatch, prototypes: Tensor | None = None) -> Tensor:
        """Logits bilinearly upsampled to the input resolution."""
        size = self.cfg.encoder.input_size
        return resize_bilinear(self(batch, prototypes), (size, size))

    def predict(self, batch: EpisodeBatch, prototypes: Tensor | None = None) -> np.ndarray:
        with no_grad():
            logits = self(batch, prototypes)
        size = self.cfg.encoder.input_size
        return predict_mask(logits, (size, size))


def canonical_class_order(class_valid: np.ndarray, pool_rows: np.ndarray) -> np.ndarray:
    """Per-episode class order used inside the decoder: valid classes first, by token-pool row.

    Decoding in this order makes the output independent of the order the
    classes were listed in, down to the last bit (reductions over class
    tokens always run in the same sequence).
    """
    key = np.where(class_valid, pool_rows, np.iinfo(np.int64).max)
    return np.argsort(key, axis=1, kind="stable")


def reorder_classes(p: PromptBatch, order: np.ndarray) -> PromptBatch:
    """Prompt batch with its class axis gathered by ``order`` (B, N)."""
    b = np.arange(len(order))[:, None]
    per_class = {f: getattr(p, f)[b, :, order].swapaxes(1, 2) if getattr(p, f).ndim > 2 else getattr(p, f)[b, order]
                 for f in ("masks", "mask_valid", "coords", "types", "sparse_valid", "presence")}
    return dataclasses.replace(p, **per_class, class_valid=p.class_valid[b, order], pool_rows=p.pool_rows[b, order])


def _maximum(a: Tensor, b: Tensor) -> Tensor:
    return where(a.data >= b.data, a, b)

