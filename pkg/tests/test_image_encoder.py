import numpy as np
import pytest
from PIL import Image

from lafss.config import EncoderConfig
from lafss.image_encoder import ConvNeck, ImageEncoder, ViT, load_image, load_mask, patchify, unpatchify
from lafss.nn import ConfigError
from lafss.tensor import ShapeError, Tensor, conv_transpose2d, precision
from lafss.training import AdamW


def test_single_patch_keeps_order():
    img = np.arange(3 * 16 * 16, dtype=np.float64).reshape(3, 16, 16)
    out = patchify(Tensor(img, dtype=np.float64), 16)
    assert out.shape == (1, 768)
    np.testing.assert_array_equal(out.data[0], img.reshape(-1))


def test_patch_equal_to_image_gives_length_one():
    assert patchify(Tensor(np.zeros((2, 3, 8, 8))), 8).shape == (2, 1, 192)


def test_patchify_round_trip():
    img = np.random.default_rng(0).random((1, 3, 32, 32))
    p = patchify(Tensor(img, dtype=np.float64), 16)
    assert p.shape == (1, 4, 768)
    np.testing.assert_array_equal(unpatchify(p.data, 16, (32, 32)), img)


def test_patch_grid_is_row_major():
    img = np.zeros((1, 3, 32, 32))
    img[0, :, :16, 16:] = 1.0  # top-right patch
    p = patchify(Tensor(img), 16).data[0]
    assert p.sum(axis=1).argmax() == 1


def test_patchify_rejects_indivisible_size():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((1, 3, 10, 10))), 4)


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(input_size=60, patch_size=8)
    with pytest.raises(ConfigError):
        EncoderConfig(vit_dim=64, neck_out_dim=64)


def test_toy_vit_shape():
    cfg = EncoderConfig()
    vit = ViT(cfg, np.random.default_rng(0))
    out = vit(patchify(Tensor(np.zeros((2, 3, 64, 64))), 8))
    assert out.shape == (2, 96, 8, 8)


def test_paper_scale_shape_arithmetic():
    cfg = EncoderConfig(input_size=1024, patch_size=16, vit_dim=768, neck_out_dim=512)
    assert (cfg.vit_dim, cfg.grid, cfg.grid) == (768, 64, 64)
    assert cfg.neck_out_dim == 512


def test_zero_weights_return_positional_grid():
    cfg = EncoderConfig(input_size=16, patch_size=8, vit_dim=12, vit_layers=2, vit_heads=2, neck_out_dim=8)
    vit = ViT(cfg, np.random.default_rng(0))
    for name, p in vit.named_parameters():
        if name != "pos_embed":
            p.data[...] = 0.0
    out = vit(patchify(Tensor(np.random.default_rng(1).random((1, 3, 16, 16))), 8))
    expect = vit.pos_embed.data.T.reshape(12, 2, 2)
    np.testing.assert_allclose(out.data[0], expect, atol=1e-7)


def test_neck_dims_and_grid():
    rng = np.random.default_rng(0)
    neck = ConvNeck(96, 64, rng)
    assert neck(Tensor(rng.standard_normal((1, 96, 8, 8)))).shape == (1, 64, 8, 8)


def test_neck_paper_dims():
    rng = np.random.default_rng(0)
    neck = ConvNeck(768, 512, rng)
    assert neck.proj.weight.shape == (512, 768, 1, 1)
    assert neck.conv.weight.shape == (512, 512, 3, 3)


def test_neck_identity_projection_degenerate():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        neck = ConvNeck(6, 4, rng)
        neck.proj.weight.data[...] = 0.0
        neck.proj.weight.data[np.arange(4), np.arange(4), 0, 0] = 1.0
        neck.proj.bias.data[...] = 0.0
        neck.conv.weight.data[...] = 0.0
        neck.conv.bias.data[...] = 0.0
        x = rng.standard_normal((1, 6, 3, 3))
        out = neck(Tensor(x))
        # second conv is zero, so the last norm sees a constant and outputs its bias (0)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)
        first = neck.norm1(neck.proj(Tensor(x)))
        trunc = x[:, :4]
        mu, var = trunc.mean(axis=1, keepdims=True), trunc.var(axis=1, keepdims=True)
        np.testing.assert_allclose(first.data, (trunc - mu) / np.sqrt(var + 1e-5), atol=1e-10)


def test_translation_by_one_patch_shifts_grid():
    cfg = EncoderConfig(input_size=32, patch_size=8, vit_dim=16, vit_layers=2, vit_heads=2, neck_out_dim=8)
    rng = np.random.default_rng(0)
    with precision(np.float64):
        vit = ViT(cfg, rng)
        vit.pos_embed.data[...] = 0.0
        img = rng.random((1, 3, 32, 32))
        a = vit(patchify(Tensor(img), 8)).data
        b = vit(patchify(Tensor(np.roll(img, 8, axis=-1)), 8)).data
    np.testing.assert_allclose(np.roll(a, 1, axis=-1), b, atol=1e-10)


def test_encoder_rejects_wrong_size():
    enc = ImageEncoder(EncoderConfig(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((1, 3, 32, 32))))


def test_frozen_encoder_untouched_by_optimizer():
    from lafss.config import ModelConfig
    from lafss.model import PromptSegModel

    cfg = ModelConfig(encoder=EncoderConfig(frozen=True))
    model = PromptSegModel(cfg, np.random.default_rng(0))
    before = {k: v.copy() for k, v in model.encoder.state_dict().items()}
    trainable = model.trainable_parameters()
    assert not {id(p) for p in model.encoder.parameters()} & {id(p) for p in trainable}
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    names = [(n, p) for n, p in model.named_parameters() if any(p is q for q in trainable)]
    AdamW(names, lr=0.1, weight_decay=0.1).step()
    for k, v in model.encoder.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_transposed_stack_reaches_quarter_resolution():
    # H/16 -> H/4 with two stride-2 layers
    x = Tensor(np.ones((1, 1, 4, 4)))
    w = Tensor(np.ones((1, 1, 2, 2)))
    assert conv_transpose2d(conv_transpose2d(x, w, stride=2), w, stride=2).shape == (1, 1, 16, 16)


def test_load_image_pads_bottom_right(tmp_path):
    arr = np.full((10, 20, 3), 255, dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png", 16)
    assert img.shape == (3, 16, 16)
    assert np.all(img[:, :8] == 1.0) and np.all(img[:, 8:] == 0.0)


def test_load_mask_nearest(tmp_path):
    m = np.zeros((8, 8), dtype=np.uint8)
    m[:4, :4] = 255
    Image.fromarray(m).save(tmp_path / "m.png")
    out = load_mask(tmp_path / "m.png", 16)
    assert out.dtype == bool and out[:8, :8].all() and not out[8:].any()
