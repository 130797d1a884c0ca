import numpy as np
import pytest

from conftest import random_image
from fixformer.errors import ContractError, DimensionError
from fixformer.image import (
    ImageSample,
    ModelConfig,
    encode_image,
    encode_image_batch,
    encoder_layer,
    init_encoder_layer,
    init_image_encoder,
    patch_centers,
    patchify
)
from fixformer.ragged import build
from fixformer.tensor import Tensor


class TestModelConfig:
    def test_derived_sizes(self):
        cfg = ModelConfig(image_size=224, patch_size=32, d_model=768, n_heads=12)
        assert cfg.grid == 7
        assert cfg.n_patches == 49
        assert cfg.n_tokens == 50

    @pytest.mark.parametrize('overrides', [
        {'d_model': 10, 'n_heads': 3},
        {'d_model': 6, 'n_heads': 2},
        {'image_size': 10, 'patch_size': 4},
        {'n_classes': 1},
        {'n_heads': 0},
        {'n_integration_layers': -1}
    ])
    def test_rejects(self, overrides):
        with pytest.raises(ContractError):
            ModelConfig(**overrides)

    def test_zero_integration_layers_allowed(self):
        assert ModelConfig(n_integration_layers=0).n_integration_layers == 0


class TestImageSample:
    def test_range_checked(self):
        with pytest.raises(ContractError):
            ImageSample(np.full((4, 4), 1.5))
        with pytest.raises(DimensionError):
            ImageSample(np.zeros((2, 2, 3)))


class TestPatches:
    def test_row_major_patch_order(self, tiny_config):
        pixels = np.arange(64.0).reshape(8, 8) / 63.0
        patches = patchify(ImageSample(pixels), tiny_config).data
        assert patches.shape == (4, 16)
        np.testing.assert_array_equal(patches[0], pixels[0:4, 0:4].reshape(-1))
        np.testing.assert_array_equal(patches[1], pixels[0:4, 4:8].reshape(-1))
        np.testing.assert_array_equal(patches[2], pixels[4:8, 0:4].reshape(-1))
        np.testing.assert_array_equal(patches[3], pixels[4:8, 4:8].reshape(-1))

    def test_indivisible_image(self, tiny_config):
        with pytest.raises(ContractError):
            patchify(ImageSample(np.zeros((6, 8))), tiny_config)

    def test_centers_are_x_then_y(self, tiny_config):
        np.testing.assert_array_equal(
            patch_centers(tiny_config), [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]
        )


class TestEncoder:
    def test_shapes_and_final_norm(self, tiny_config, rng):
        params = init_image_encoder(tiny_config, rng)
        tokens = encode_image(random_image(rng), params, tiny_config)
        assert tokens.values.shape == (5, 8)
        assert tokens.patch_grid == (2, 2)
        np.testing.assert_allclose(tokens.values.data.mean(axis=1), 0.0, atol=1e-12)

    def test_wrong_image_size(self, tiny_config, rng):
        params = init_image_encoder(tiny_config, rng)
        with pytest.raises(DimensionError):
            encode_image(random_image(rng, size=16), params, tiny_config)

    def test_batched_matches_single(self, tiny_config, rng):
        params = init_image_encoder(tiny_config, rng)
        images = [random_image(rng) for _ in range(3)]
        batch = encode_image_batch(images, params, tiny_config)
        for img, element in zip(images, batch.split()):
            single = encode_image(img, params, tiny_config).values.data
            np.testing.assert_allclose(element.data, single, rtol=1e-12, atol=1e-13)

    def test_zeroed_sublayers_are_identity(self, tiny_config, rng):
        layer = init_encoder_layer(tiny_config, rng)
        for linear in (layer.attn.out, layer.mlp.fc2):
            linear.weight.data[...] = 0.0
            linear.bias.data[...] = 0.0
        x = build([Tensor(rng.standard_normal((t, 8))) for t in (3, 5)])
        np.testing.assert_array_equal(encoder_layer(x, layer).values.data, x.values.data)

    def test_residual_adds_attention_then_mlp(self, tiny_config, rng):
        layer = init_encoder_layer(tiny_config, rng)
        layer.mlp.fc2.weight.data[...] = 0.0
        x = build([Tensor(rng.standard_normal((1, 8)))])
        # A single token attends only to itself, so attention reduces to out(v(norm(x))).
        normed = layer.attn_norm(x.values)
        expected = x.values.data + layer.attn.out(layer.attn.v(normed)).data
        np.testing.assert_allclose(encoder_layer(x, layer).values.data, expected, rtol=1e-12, atol=1e-14)
