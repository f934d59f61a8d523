import numpy as np
import pytest

from lafss.config import EncoderConfig, ModelConfig
from lafss.prompt_encoder import PromptBatch


def small_config(**kw) -> ModelConfig:
    enc = EncoderConfig(input_size=32, patch_size=8, vit_dim=24, vit_layers=1, vit_heads=2, neck_out_dim=16)
    base = dict(encoder=enc, num_heads=2, prompt_depth=1, decoder_depth=1, mlp_dim=32, mask_size=16, pool_size=8)
    base.update(kw)
    return ModelConfig(**base)


def random_prompts(rng, B=2, L=3, N=2, M=4, mask_size=16, absent=True) -> PromptBatch:
    """Mixed prompts with some padded slots and (optionally) absent classes."""
    presence = np.ones((B, L, N), dtype=bool)
    if absent and L > 1:
        presence[:, -1, -1] = False
    mask_valid = presence & (rng.random((B, L, N)) < 0.5)
    n_tok = rng.integers(0, M + 1, (B, L, N))
    n_tok[presence & ~mask_valid & (n_tok == 0)] = 1
    sparse_valid = (np.arange(M) < n_tok[..., None]) & presence[..., None]
    masks = ((rng.random((B, L, N, mask_size, mask_size)) < 0.3) & mask_valid[..., None, None]).astype(np.float32)
    masks[..., 0, 0] = np.where(mask_valid, 1.0, masks[..., 0, 0])  # no empty valid masks
    coords = np.where(sparse_valid[..., None], rng.random((B, L, N, M, 2)), 0.0)
    types = np.where(sparse_valid, rng.integers(0, 3, (B, L, N, M)), 0)
    rows = np.stack([rng.choice(8, N, replace=False) for _ in range(B)])
    return PromptBatch(masks, mask_valid, coords, types, sparse_valid, presence, np.ones((B, N), dtype=bool), rows)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
