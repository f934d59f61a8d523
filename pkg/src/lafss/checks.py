"""Finite-difference checks over every composite block, at tiny sizes in 64-bit."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .config import EncoderConfig, ModelConfig
from .gradcheck import GradCheckReport, gradient_check
from .image_encoder import ImageEncoder
from .mask_decoder import MaskDecoder
from .nn import AttentionConfig, MultiHeadAttention
from .prompt_encoder import MaskEncoder, PromptBatch, PromptEncoder, TwoWayTransformer
from .tensor import Tensor, precision
from . import tensor as _tensor


def tiny_config() -> ModelConfig:
    enc = EncoderConfig(input_size=16, patch_size=8, vit_dim=16, vit_layers=1, vit_heads=2, vit_mlp_ratio=2,
                        neck_out_dim=8)
    return ModelConfig(encoder=enc, num_heads=2, prompt_depth=1, decoder_depth=1, mlp_dim=16, mask_size=8,
                       pool_size=4)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _probe(out: Tensor, rng) -> np.ndarray:
    return rng.standard_normal(out.shape)


def _scalar(fn, rng):
    weights = {}

    def f():
        out = fn()
        if "w" not in weights:
            weights["w"] = _probe(out, rng)
        return (out * weights["w"]).sum()

    return f


def block_attention(rng):
    attn = MultiHeadAttention(AttentionConfig(8, 2), rng)
    q, k, v = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 4, 8), _leaf(rng, 2, 4, 8)
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    return _scalar(lambda: attn(q, k, v, mask=mask), rng), [q, k, v] + attn.parameters()


def block_two_way(rng):
    tw = TwoWayTransformer(1, 8, 2, 16, rng)
    sparse, dense = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 4, 8)
    pe = rng.standard_normal((4, 8))
    valid = np.array([[True, True, False], [True, False, False]])

    def fn():
        s, d = tw(sparse, valid, dense, pe)
        return _tensor.concat([s, d], axis=1)

    return _scalar(fn, rng), [sparse, dense] + tw.parameters()


def block_mask_encoder(rng):
    enc = MaskEncoder(8, 2, 8, rng)
    masks = Tensor(rng.random((2, 8, 8)), requires_grad=True, dtype=np.float64)
    return _scalar(lambda: enc(masks), rng), [masks] + enc.parameters()


def block_image_encoder(rng):
    cfg = tiny_config()
    enc = ImageEncoder(cfg.encoder, rng)
    images = _leaf(rng, 2, 3, 16, 16, scale=0.5)
    return _scalar(lambda: enc(images), rng), [images] + enc.parameters()


def tiny_prompts(rng, B=2, L=2, N=2, M=3, mask_size=8) -> PromptBatch:
    presence = np.ones((B, L, N), dtype=bool)
    presence[0, 1, 1] = False
    mask_valid = presence & (rng.random((B, L, N)) < 0.6)
    mask_valid[0, 0, 0] = True
    masks = (rng.random((B, L, N, mask_size, mask_size)) < 0.4).astype(np.float64) * mask_valid[..., None, None]
    sparse_valid = np.zeros((B, L, N, M), dtype=bool)
    sparse_valid[..., 0] = presence & ~mask_valid
    sparse_valid[1, 0, 0, :2] = True
    coords = rng.random((B, L, N, M, 2))
    types = rng.integers(0, 3, (B, L, N, M))
    return PromptBatch(masks, mask_valid, coords, types, sparse_valid, presence, np.ones((B, N), dtype=bool),
                       np.tile(np.arange(N), (B, 1)))


def block_prompt_encoder(rng):
    cfg = tiny_config()
    enc = PromptEncoder(cfg, rng)
    prompts = tiny_prompts(rng)
    feats = _leaf(rng, 4, 8, 2, 2)
    return _scalar(lambda: enc(feats, prompts), rng), [feats] + enc.parameters()


def block_decoder(rng):
    cfg = tiny_config()
    dec = MaskDecoder(cfg, rng)
    feats, protos = _leaf(rng, 2, 8, 2, 2), _leaf(rng, 2, 2, 8)
    valid = np.array([[True, True], [True, False]])
    # probe only live channels: the constant padded logits would swamp the differences
    live = np.concatenate([np.ones((2, 1), dtype=bool), valid], axis=1)[:, :, None, None]

    def fn():
        return dec(feats, protos, valid) * live

    return _scalar(fn, rng), [feats, protos] + dec.parameters()


def block_focal_loss(rng):
    from .training import focal_loss

    logits = _leaf(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, (2, 4, 4))
    labels[1] = np.where(labels[1] == 2, 0, labels[1])  # one sample with an absent class
    return (lambda: focal_loss(logits, labels, gamma=2.0)), [logits]


BLOCKS = {
    "attention": block_attention,
    "two_way_transformer": block_two_way,
    "mask_encoder": block_mask_encoder,
    "image_encoder": block_image_encoder,
    "prompt_encoder": block_prompt_encoder,
    "mask_decoder": block_decoder,
    "focal_loss": block_focal_loss,
}


@dataclass
class BlockResult:
    name: str
    report: GradCheckReport

    @property
    def line(self) -> str:
        status = "PASS" if self.report.passed else "FAIL"
        extra = f" ({'; '.join(self.report.failures)})" if self.report.failures else ""
        return f"{self.name:<22} max rel err {self.report.worst:.3e}  {status}{extra}"


def run_gradchecks(names=None, tol: float = 1e-4, max_entries: int = 8, seed: int = 0) -> list[BlockResult]:
    names = list(BLOCKS) if names is None else list(names)
    out = []
    with precision(np.float64):
        for name in names:
            if name not in BLOCKS:
                raise KeyError(f"unknown block '{name}'")
            rng = np.random.default_rng(seed)
            f, inputs = BLOCKS[name](rng)
            rep = gradient_check(f, inputs, tol=tol, max_entries=max_entries, rng=np.random.default_rng(seed + 1))
            out.append(BlockResult(name, rep))
    return out


@contextlib.contextmanager
def inject_wrong_sign():
    """Temporarily negate the backward pass of GELU (a deliberate bug for mutation testing)."""
    original = _tensor.Tensor.gelu

    def broken(self):
        out = original(self)
        back = out._backward
        if back is not None:
            out._backward = lambda g: tuple(None if x is None else -x for x in back(g))
        return out

    _tensor.Tensor.gelu = broken
    try:
        yield
    finally:
        _tensor.Tensor.gelu = original
