"""
Vision-transformer image encoder.

Images are cut into square patches, linearly embedded, prefixed with a
learned [CLS] token, offset by learned absolute positional embeddings and
passed through pre-norm self-attention blocks. The same block is reused
by the gaze-only encoder.
"""

__all__ = [
    'EncoderLayerParams',
    'ImageEncoderParams',
    'ImageSample',
    'ImageTokens',
    'ModelConfig',
    'encode_image',
    'encode_image_batch',
    'encoder_layer',
    'init_encoder_layer',
    'init_image_encoder',
    'patch_centers',
    'patchify'
]

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .layers import (
    AttentionParams,
    LayerNormParams,
    Linear,
    MLPParams,
    init_attention,
    init_layernorm,
    init_linear,
    init_mlp,
    trunc_normal
)
from .ragged import RaggedBatch, build, ragged_attention
from .tensor import Tensor, concat


@dataclass(frozen=True, slots=True)
class ModelConfig:
    """
    Architecture hyperparameters.

    The defaults are a desk-scale ViT; a ViT/B-32 at 224 x 224 is
    ``image_size=224, patch_size=32, d_model=768, n_heads=12,
    n_encoder_layers=12``.
    """

    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 4
    n_integration_layers: int = 2
    mlp_ratio: int = 4
    n_classes: int = 3
    ln_eps: float = 1e-6
    # Temporal scale of the fixation start-time encoding, in seconds.
    time_scale: float = 10000.0
    # Scale of the spatial encoding re-injected before cross-attention.
    spatial_scale: float = 0.01

    def __post_init__(self) -> None:
        positive = (
            'image_size', 'patch_size', 'd_model', 'n_heads', 'n_encoder_layers',
            'mlp_ratio', 'n_classes', 'ln_eps', 'time_scale', 'spatial_scale'
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ContractError(f'{name} must be positive, got {getattr(self, name)}')
        if self.n_integration_layers < 0:
            raise ContractError(f'n_integration_layers must be >= 0, got {self.n_integration_layers}')
        if self.n_classes < 2:
            raise ContractError(f'n_classes must be >= 2, got {self.n_classes}')
        if self.d_model % self.n_heads:
            raise ContractError(f'd_model {self.d_model} is not divisible by {self.n_heads} heads')
        if self.d_model % 4:
            raise ContractError(f'd_model {self.d_model} is not divisible by 4')
        if self.image_size % self.patch_size:
            raise ContractError(
                f'image_size {self.image_size} is not divisible by patch_size {self.patch_size}'
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_patches


@dataclass(frozen=True, slots=True)
class ImageSample:
    # Grayscale values in [0, 1], H x W.
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2:
            raise DimensionError(f'image must be 2-D, got {self.pixels.shape}')
        if not np.isfinite(self.pixels).all() or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ContractError('pixel values must lie in [0, 1]')


@dataclass(frozen=True, slots=True)
class ImageTokens:
    # Row 0 is [CLS]; rows 1..P are patches in row-major order.
    values: Tensor
    patch_grid: tuple[int, int]


def patchify(img: ImageSample, cfg: ModelConfig) -> Tensor:
    p = cfg.patch_size
    height, width = img.pixels.shape
    if height % p or width % p:
        raise ContractError(f'image {height}x{width} is not divisible by patch size {p}')
    patches = (
        img.pixels.reshape(height // p, p, width // p, p)
        .transpose(0, 2, 1, 3)
        .reshape(-1, p * p)
    )
    return Tensor(patches)


def patch_centers(cfg: ModelConfig) -> np.ndarray:
    """Normalized ``(x, y)`` centers of the patch grid, row-major."""
    centers = (np.arange(cfg.grid) + 0.5) / cfg.grid
    ys, xs = np.meshgrid(centers, centers, indexing='ij')
    return np.column_stack([xs.reshape(-1), ys.reshape(-1)])


# PARAMETERS ===========================================================


@dataclass(slots=True)
class EncoderLayerParams:
    attn_norm: LayerNormParams
    attn: AttentionParams
    mlp_norm: LayerNormParams
    mlp: MLPParams


@dataclass(slots=True)
class ImageEncoderParams:
    # [d_model x patch_size^2]
    patch_embed: Linear
    # [(1 + P) x d_model], row 0 belongs to [CLS].
    pos_embed: Tensor
    # [1 x d_model], zero init.
    cls_token: Tensor
    layers: list[EncoderLayerParams]
    final_norm: LayerNormParams


def init_encoder_layer(cfg: ModelConfig, rng: np.random.Generator) -> EncoderLayerParams:
    return EncoderLayerParams(
        attn_norm=init_layernorm(cfg.d_model, cfg.ln_eps),
        attn=init_attention(cfg.d_model, cfg.n_heads, rng),
        mlp_norm=init_layernorm(cfg.d_model, cfg.ln_eps),
        mlp=init_mlp(cfg.d_model, cfg.mlp_ratio, rng)
    )


def init_image_encoder(cfg: ModelConfig, rng: np.random.Generator) -> ImageEncoderParams:
    return ImageEncoderParams(
        patch_embed=init_linear(cfg.patch_size ** 2, cfg.d_model, rng),
        pos_embed=trunc_normal((cfg.n_tokens, cfg.d_model), rng),
        cls_token=Tensor(np.zeros((1, cfg.d_model)), requires_grad=True),
        layers=[init_encoder_layer(cfg, rng) for _ in range(cfg.n_encoder_layers)],
        final_norm=init_layernorm(cfg.d_model, cfg.ln_eps)
    )


# FORWARD ==============================================================


def encoder_layer(x: RaggedBatch, params: EncoderLayerParams) -> RaggedBatch:
    """Pre-norm block: ``x + attn(norm(x))`` then ``x + mlp(norm(x))``."""
    normed = x.with_values(params.attn_norm(x.values))
    attended = ragged_attention(normed, normed, normed, params.attn)
    hidden = x.values + attended.values
    return x.with_values(hidden + params.mlp(params.mlp_norm(hidden)))


def _embed(img: ImageSample, params: ImageEncoderParams, cfg: ModelConfig) -> Tensor:
    if img.pixels.shape != (cfg.image_size, cfg.image_size):
        raise DimensionError(
            f'image {img.pixels.shape} against configured size {cfg.image_size}'
        )
    patches = params.patch_embed(patchify(img, cfg))
    return concat([params.cls_token, patches], axis=0) + params.pos_embed


def encode_image_batch(
    images: Sequence[ImageSample], params: ImageEncoderParams, cfg: ModelConfig
) -> RaggedBatch:
    tokens = build([_embed(img, params, cfg) for img in images])
    for layer in params.layers:
        tokens = encoder_layer(tokens, layer)
    return tokens.with_values(params.final_norm(tokens.values))


def encode_image(
    img: ImageSample, params: ImageEncoderParams, cfg: ModelConfig
) -> ImageTokens:
    tokens = encode_image_batch([img], params, cfg)
    return ImageTokens(values=tokens.values, patch_grid=(cfg.grid, cfg.grid))
