"""
Gaze integration: fusing image tokens with gaze tokens.

Two fusion variants are provided. ``CROSS_ATTENTION`` updates only the
image stream: self-attention, then unmasked image-to-gaze cross-attention,
then an MLP. ``TWO_WAY`` adds a mirrored gaze-to-image cross-attention and
a gaze MLP so the gaze stream is updated as well. Sinusoidal spatial
encodings are added to queries and keys (never values) before every
cross-attention. Two ablation variants bypass one modality entirely.
"""

__all__ = [
    'AttentionMap',
    'AttentionRecorder',
    'FixationFormerParams',
    'IntegrationLayerParams',
    'IntegrationVariant',
    'classify',
    'classify_batch',
    'cross_attention_layer',
    'export_attention',
    'image_positions',
    'gaze_positions',
    'init_integration_layer',
    'init_params',
    'two_way_layer'
]

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

import numpy as np

from .errors import ContractError, NoAttentionError
from .gaze import (
    FixationSequence,
    GazeEncoderParams,
    GazeTokens,
    encode_gaze,
    init_gaze_encoder,
    spatial_pe
)
from .image import (
    EncoderLayerParams,
    ImageEncoderParams,
    ImageSample,
    ModelConfig,
    encode_image_batch,
    encoder_layer,
    init_encoder_layer,
    init_image_encoder,
    patch_centers
)
from .layers import (
    AttentionParams,
    LayerNormParams,
    Linear,
    MLPParams,
    init_attention,
    init_layernorm,
    init_linear,
    init_mlp
)
from .ragged import RaggedBatch, WeightsHook, build, ragged_attention
from .tensor import Tensor, concat


class IntegrationVariant(str, Enum):
    CROSS_ATTENTION = 'cross_attention'
    TWO_WAY = 'two_way'
    IMAGE_ONLY = 'image_only'
    GAZE_ONLY = 'gaze_only'

    @property
    def uses_image(self) -> bool:
        return self is not IntegrationVariant.GAZE_ONLY

    @property
    def uses_gaze(self) -> bool:
        return self is not IntegrationVariant.IMAGE_ONLY

    @property
    def has_cross_attention(self) -> bool:
        return self in (IntegrationVariant.CROSS_ATTENTION, IntegrationVariant.TWO_WAY)


# ATTENTION EXPORT =====================================================


@dataclass(frozen=True, slots=True)
class AttentionMap:
    # 'image_to_gaze' or 'gaze_to_image'.
    direction: str
    layer: int
    element: int
    # [heads x T_query x T_key]; rows sum to 1.
    weights: np.ndarray


@dataclass(slots=True)
class AttentionRecorder:
    maps: list[AttentionMap] = field(default_factory=list)

    def hook(self, direction: str, layer: int) -> WeightsHook:
        def _record(element: int, weights: np.ndarray) -> None:
            self.maps.append(AttentionMap(direction, layer, element, weights))
        return _record


def _hook(
    recorder: Union[AttentionRecorder, None], direction: str, layer: int
) -> Union[WeightsHook, None]:
    return None if recorder is None else recorder.hook(direction, layer)


# LAYERS ===============================================================


@dataclass(slots=True)
class IntegrationLayerParams:
    self_norm: LayerNormParams
    self_attn: AttentionParams
    # Image queries over gaze keys and values.
    cross_norm_image: LayerNormParams
    cross_norm_gaze: LayerNormParams
    cross_attn: AttentionParams
    mlp_norm: LayerNormParams
    mlp: MLPParams
    # Two-way only: gaze queries over image keys and values, then a gaze MLP.
    reverse_norm_gaze: Union[LayerNormParams, None] = None
    reverse_norm_image: Union[LayerNormParams, None] = None
    reverse_attn: Union[AttentionParams, None] = None
    gaze_mlp_norm: Union[LayerNormParams, None] = None
    gaze_mlp: Union[MLPParams, None] = None

    @property
    def is_two_way(self) -> bool:
        return self.reverse_attn is not None


def init_integration_layer(
    cfg: ModelConfig, rng: np.random.Generator, two_way: bool
) -> IntegrationLayerParams:
    d, eps = cfg.d_model, cfg.ln_eps
    params = IntegrationLayerParams(
        self_norm=init_layernorm(d, eps),
        self_attn=init_attention(d, cfg.n_heads, rng),
        cross_norm_image=init_layernorm(d, eps),
        cross_norm_gaze=init_layernorm(d, eps),
        cross_attn=init_attention(d, cfg.n_heads, rng),
        mlp_norm=init_layernorm(d, eps),
        mlp=init_mlp(d, cfg.mlp_ratio, rng)
    )
    if two_way:
        params.reverse_norm_gaze = init_layernorm(d, eps)
        params.reverse_norm_image = init_layernorm(d, eps)
        params.reverse_attn = init_attention(d, cfg.n_heads, rng)
        params.gaze_mlp_norm = init_layernorm(d, eps)
        params.gaze_mlp = init_mlp(d, cfg.mlp_ratio, rng)
    return params


def _check_streams(img: RaggedBatch, gaze: RaggedBatch, img_pe: Tensor, gaze_pe: Tensor) -> None:
    if img.batch_size != gaze.batch_size:
        raise ContractError(f'{img.batch_size} images against {gaze.batch_size} gaze sequences')
    if img_pe.shape != img.values.shape or gaze_pe.shape != gaze.values.shape:
        raise ContractError(
            f'spatial encodings {img_pe.shape}, {gaze_pe.shape} are not row-aligned '
            f'with tokens {img.values.shape}, {gaze.values.shape}'
        )


def _residual_cross(
    queries: RaggedBatch,
    keys: RaggedBatch,
    query_pe: Tensor,
    key_pe: Tensor,
    query_norm: LayerNormParams,
    key_norm: LayerNormParams,
    attn: AttentionParams,
    on_weights: Union[WeightsHook, None]
) -> RaggedBatch:
    q = query_norm(queries.values)
    kv = key_norm(keys.values)
    context = ragged_attention(
        queries.with_values(q + query_pe),
        keys.with_values(kv + key_pe),
        keys.with_values(kv),
        attn,
        on_weights
    )
    return queries.with_values(queries.values + context.values)


def _residual_mlp(x: RaggedBatch, norm: LayerNormParams, mlp: MLPParams) -> RaggedBatch:
    return x.with_values(x.values + mlp(norm(x.values)))


def cross_attention_layer(
    img: RaggedBatch,
    gaze: RaggedBatch,
    img_pe: Tensor,
    gaze_pe: Tensor,
    params: IntegrationLayerParams,
    on_weights: Union[WeightsHook, None] = None
) -> RaggedBatch:
    """
    Update image tokens from gaze tokens; gaze tokens are left untouched.

    Parameters
    ----------
    img, gaze : RaggedBatch
        Image tokens ([CLS] first) and gaze tokens, same batch count.
    img_pe, gaze_pe : Tensor
        Spatial encodings row-aligned with ``img.values`` and
        ``gaze.values``; see :func:`image_positions` and
        :func:`gaze_positions`.
    params : IntegrationLayerParams
    on_weights : callable, optional
        Receives the image-to-gaze attention weights per element.
    """
    _check_streams(img, gaze, img_pe, gaze_pe)
    normed = img.with_values(params.self_norm(img.values))
    attended = ragged_attention(normed, normed, normed, params.self_attn)
    img = img.with_values(img.values + attended.values)
    img = _residual_cross(
        img, gaze, img_pe, gaze_pe,
        params.cross_norm_image, params.cross_norm_gaze, params.cross_attn,
        on_weights
    )
    return _residual_mlp(img, params.mlp_norm, params.mlp)


def two_way_layer(
    img: RaggedBatch,
    gaze: RaggedBatch,
    img_pe: Tensor,
    gaze_pe: Tensor,
    params: IntegrationLayerParams,
    on_weights: Union[WeightsHook, None] = None,
    on_reverse_weights: Union[WeightsHook, None] = None
) -> tuple[RaggedBatch, RaggedBatch]:
    """The image update of :func:`cross_attention_layer`, then a mirrored gaze update."""
    if not params.is_two_way:
        raise ContractError('layer parameters carry no gaze-to-image sublayers')
    img = cross_attention_layer(img, gaze, img_pe, gaze_pe, params, on_weights)
    gaze = _residual_cross(
        gaze, img, gaze_pe, img_pe,
        params.reverse_norm_gaze, params.reverse_norm_image, params.reverse_attn,
        on_reverse_weights
    )
    return img, _residual_mlp(gaze, params.gaze_mlp_norm, params.gaze_mlp)


# SPATIAL ENCODINGS ====================================================


def image_positions(batch_size: int, cfg: ModelConfig) -> Tensor:
    """Spatial encodings for ``batch_size`` image token sequences; [CLS] rows are zero."""
    patches = spatial_pe(patch_centers(cfg), cfg.d_model, cfg.spatial_scale).data
    one = np.vstack([np.zeros((1, cfg.d_model)), patches])
    return Tensor(np.tile(one, (batch_size, 1)))


def gaze_positions(tokens: Sequence[GazeTokens], cfg: ModelConfig) -> Tensor:
    return Tensor(np.vstack([
        spatial_pe(t.coords, cfg.d_model, cfg.spatial_scale).data for t in tokens
    ]))


# FULL MODEL ===========================================================


@dataclass(slots=True)
class FixationFormerParams:
    """
    Every parameter of one model; parts a variant does not use are absent.

    Attributes
    ----------
    image : ImageEncoderParams or None
        Absent for ``GAZE_ONLY``.
    gaze : GazeEncoderParams or None
        Absent for ``IMAGE_ONLY``.
    integration : list of IntegrationLayerParams
        Fusion layers; empty for the ablation variants.
    gaze_layers : list of EncoderLayerParams
        Self-attention blocks of ``GAZE_ONLY``.
    gaze_cls : Tensor or None
        Learned [CLS] prepended to gaze tokens by ``GAZE_ONLY``.
    final_norm : LayerNormParams or None
        Closes the integration or gaze-only stack.
    head : Linear
        Prediction head on the final [CLS] token.
    """

    head: Linear
    image: Union[ImageEncoderParams, None] = None
    gaze: Union[GazeEncoderParams, None] = None
    integration: list[IntegrationLayerParams] = field(default_factory=list)
    gaze_layers: list[EncoderLayerParams] = field(default_factory=list)
    gaze_cls: Union[Tensor, None] = None
    final_norm: Union[LayerNormParams, None] = None


def init_params(
    cfg: ModelConfig, variant: IntegrationVariant, rng: np.random.Generator
) -> FixationFormerParams:
    variant = IntegrationVariant(variant)
    # The image encoder and head are drawn first so that variants built from
    # one seed share them.
    image = init_image_encoder(cfg, rng) if variant.uses_image else None
    params = FixationFormerParams(head=init_linear(cfg.d_model, cfg.n_classes, rng), image=image)
    if variant.uses_gaze:
        params.gaze = init_gaze_encoder(cfg.d_model, rng)
    if variant.has_cross_attention:
        two_way = variant is IntegrationVariant.TWO_WAY
        params.integration = [
            init_integration_layer(cfg, rng, two_way) for _ in range(cfg.n_integration_layers)
        ]
        params.final_norm = init_layernorm(cfg.d_model, cfg.ln_eps)
    elif variant is IntegrationVariant.GAZE_ONLY:
        params.gaze_layers = [
            init_encoder_layer(cfg, rng) for _ in range(cfg.n_integration_layers)
        ]
        params.gaze_cls = Tensor(np.zeros((1, cfg.d_model)), requires_grad=True)
        params.final_norm = init_layernorm(cfg.d_model, cfg.ln_eps)
    return params


def _require(
    variant: IntegrationVariant,
    images: Union[Sequence[ImageSample], None],
    gazes: Union[Sequence[FixationSequence], None]
) -> int:
    if variant.uses_image and not images:
        raise ContractError(f'variant {variant.value} needs images')
    if variant.uses_gaze and not gazes:
        raise ContractError(f'variant {variant.value} needs gaze')
    if variant.uses_image and variant.uses_gaze and len(images) != len(gazes):
        raise ContractError(f'{len(images)} images against {len(gazes)} gaze sequences')
    return len(images) if variant.uses_image else len(gazes)


def classify_batch(
    images: Union[Sequence[ImageSample], None],
    gazes: Union[Sequence[FixationSequence], None],
    variant: IntegrationVariant,
    params: FixationFormerParams,
    cfg: ModelConfig,
    recorder: Union[AttentionRecorder, None] = None
) -> Tensor:
    """Logits ``[B x n_classes]`` for a batch of samples."""
    variant = IntegrationVariant(variant)
    batch_size = _require(variant, images, gazes)

    if variant is IntegrationVariant.IMAGE_ONLY:
        img = encode_image_batch(images, params.image, cfg)
        return params.head(img.first_rows())

    tokens = [encode_gaze(seq, params.gaze, cfg.time_scale) for seq in gazes]

    if variant is IntegrationVariant.GAZE_ONLY:
        gaze = build([concat([params.gaze_cls, t.values], axis=0) for t in tokens])
        for layer in params.gaze_layers:
            gaze = encoder_layer(gaze, layer)
        return params.head(params.final_norm(gaze.first_rows()))

    img = encode_image_batch(images, params.image, cfg)
    gaze = build([t.values for t in tokens])
    img_pe = image_positions(batch_size, cfg)
    gaze_pe = gaze_positions(tokens, cfg)
    for i, layer in enumerate(params.integration):
        if variant is IntegrationVariant.TWO_WAY:
            img, gaze = two_way_layer(
                img, gaze, img_pe, gaze_pe, layer,
                _hook(recorder, 'image_to_gaze', i),
                _hook(recorder, 'gaze_to_image', i)
            )
        else:
            img = cross_attention_layer(
                img, gaze, img_pe, gaze_pe, layer, _hook(recorder, 'image_to_gaze', i)
            )
    return params.head(params.final_norm(img.first_rows()))


def classify(
    img: Union[ImageSample, None],
    gaze: Union[FixationSequence, None],
    variant: IntegrationVariant,
    params: FixationFormerParams,
    cfg: ModelConfig
) -> Tensor:
    """Logits ``[n_classes]`` for one sample."""
    images = None if img is None else [img]
    gazes = None if gaze is None else [gaze]
    return classify_batch(images, gazes, variant, params, cfg)[0]


def export_attention(
    images: Sequence[ImageSample],
    gazes: Sequence[FixationSequence],
    variant: IntegrationVariant,
    params: FixationFormerParams,
    cfg: ModelConfig
) -> list[AttentionMap]:
    """Cross-attention weights of every integration layer and batch element."""
    variant = IntegrationVariant(variant)
    if not variant.has_cross_attention:
        raise NoAttentionError()
    recorder = AttentionRecorder()
    classify_batch(images, gazes, variant, params, cfg, recorder)
    return recorder.maps
