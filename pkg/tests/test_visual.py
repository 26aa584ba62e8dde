import numpy as np
import pytest

from tmcnet.errors import ConfigError
from tmcnet.tensor import ShapeError, Tensor
from tmcnet.visual import (EncoderConfig, PatchMerge, StageFeature, VisualEncoder, grid_to_tokens,
                           patchify, tokens_to_grid)


def encoder(seed=0, **kw):
    return VisualEncoder(EncoderConfig(**kw), np.random.default_rng(seed))


def test_patch_embed_shape():
    enc = encoder(image_size=32, base_channels=8)
    v1 = enc.patch_embed(Tensor(np.zeros((1, 1, 32, 32))))
    assert (v1.h, v1.w, v1.channels) == (8, 8, 8)
    assert v1.tokens.shape == (1, 64, 8)


def test_constant_image_gives_identical_tokens():
    enc = encoder()
    v1 = enc.patch_embed(Tensor(np.full((1, 1, 32, 32), 0.3)))
    rows = v1.tokens.data[0]
    np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))


def test_patchify_layout():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    p = patchify(Tensor(img), 2).data[0]
    np.testing.assert_array_equal(p[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[3], [10, 11, 14, 15])


def test_grid_token_round_trip():
    x = np.random.default_rng(0).standard_normal((2, 5, 3, 4))
    np.testing.assert_array_equal(tokens_to_grid(grid_to_tokens(Tensor(x)), 3, 4).data, x)


@pytest.mark.parametrize("size,c1", [(32, 8), (64, 8), (32, 16), (96, 16)])
def test_stage_schedule(size, c1):
    enc = encoder(image_size=size, base_channels=c1)
    feats = enc(Tensor(np.random.default_rng(1).random((1, 1, size, size))))
    n1 = feats[0].n_tokens
    for i, f in enumerate(feats, start=1):
        assert f.stage == i
        assert f.channels == c1 * 2 ** (i - 1)
        assert f.n_tokens == n1 // 4 ** (i - 1)
        assert f.tokens.shape[1] == f.h * f.w


def test_merge_shape_and_odd_grid():
    merge = PatchMerge(8, np.random.default_rng(0))
    out = merge(Tensor(np.random.default_rng(0).random((1, 16, 8))), 4, 4)
    assert out.shape == (1, 4, 16)
    with pytest.raises(ShapeError):
        merge(Tensor(np.zeros((1, 9, 8))), 3, 3)


def test_zero_input_zero_biases_gives_zero_stage_output():
    enc = encoder()
    out, _ = enc.encode_stage(StageFeature(1, 8, 8, Tensor(np.zeros((1, 64, 8)))))
    np.testing.assert_array_equal(out.tokens.data, 0.0)


def test_batch_permutation_equivariance():
    enc = encoder()
    imgs = np.random.default_rng(2).random((2, 1, 32, 32))
    a = enc(Tensor(imgs))[-1].tokens.data
    b = enc(Tensor(imgs[::-1].copy()))[-1].tokens.data
    np.testing.assert_allclose(a[::-1], b, rtol=1e-12, atol=1e-12)


def test_self_attention_rows_sum_to_one():
    enc = encoder()
    v = enc.patch_embed(Tensor(np.random.default_rng(3).random((2, 1, 32, 32))))
    for _ in range(3):
        v, attn = enc.encode_stage(v)
        np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-6)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=36)
    with pytest.raises(ConfigError):
        EncoderConfig(fusion_stages=(1, 2))
