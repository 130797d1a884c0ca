from collections.abc import Mapping, Sequence
from typing import Union, TYPE_CHECKING

if TYPE_CHECKING:
    from typing_extensions import Self
else:
    try:
        from typing import Self  # Python 3.11+
    except ImportError:
        from typing_extensions import Self  # Python 3.10 fallback

import numpy as np

from .errors import CheckpointError
from .gaze import FixationSequence
from .image import ImageSample, ModelConfig
from .integration import (
    AttentionMap,
    FixationFormerParams,
    IntegrationVariant,
    classify_batch,
    export_attention,
    init_params
)
from .layers import named_tensors
from .lora import apply_lora
from .tensor import Tensor, softmax

# Prefix of the parameters an external checkpoint may initialize.
IMAGE_PREFIX = 'image.'


class FixationFormer:
    """
    Gaze-guided image classifier.

    Parameters
    ----------
    config : ModelConfig
        Architecture.
    variant : IntegrationVariant
        Fusion variant or ablation mode.
    params : FixationFormerParams
        Parameter tree matching ``config`` and ``variant``.
    lora : tuple of (int, float), optional
        Rank and alpha of the adapters on the image encoder, if any.
    """

    __slots__ = ('_config', '_variant', '_params', '_lora')

    if TYPE_CHECKING:
        _config: ModelConfig
        _variant: IntegrationVariant
        _params: FixationFormerParams
        _lora: Union[tuple[int, float], None]

    def __init__(
        self,
        config: ModelConfig,
        variant: IntegrationVariant,
        params: FixationFormerParams,
        lora: Union[tuple[int, float], None] = None
    ) -> None:
        self._config = config
        self._variant = IntegrationVariant(variant)
        self._params = params
        self._lora = lora

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        variant: IntegrationVariant,
        seed: int,
        lora_rank: Union[int, None] = 8,
        lora_alpha: float = 16.0,
        image_weights: Union[Mapping[str, np.ndarray], None] = None
    ) -> Self:
        """
        Initialize a model, optionally loading ``image.*`` weights, then
        freezing the image encoder behind LoRA adapters.

        ``lora_rank=None`` leaves the image encoder fully trainable.
        """
        variant = IntegrationVariant(variant)
        params = init_params(config, variant, np.random.default_rng([seed, 0]))
        model = cls(config, variant, params)
        if image_weights is not None and variant.uses_image:
            model.load_state_dict(image_weights, prefix=IMAGE_PREFIX)
        if lora_rank is not None and params.image is not None:
            apply_lora(params.image, lora_rank, lora_alpha, np.random.default_rng([seed, 1]))
            model._lora = (lora_rank, float(lora_alpha))
        return model

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def variant(self) -> IntegrationVariant:
        return self._variant

    @property
    def params(self) -> FixationFormerParams:
        return self._params

    @property
    def lora(self) -> Union[tuple[int, float], None]:
        return self._lora

    def logits(
        self,
        images: Union[Sequence[ImageSample], None],
        gazes: Union[Sequence[FixationSequence], None]
    ) -> Tensor:
        return classify_batch(images, gazes, self._variant, self._params, self._config)

    def predict_proba(
        self,
        images: Union[Sequence[ImageSample], None],
        gazes: Union[Sequence[FixationSequence], None]
    ) -> np.ndarray:
        return softmax(self.logits(images, gazes)).numpy()

    def attention_maps(
        self, images: Sequence[ImageSample], gazes: Sequence[FixationSequence]
    ) -> list[AttentionMap]:
        return export_attention(images, gazes, self._variant, self._params, self._config)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return list(named_tensors(self._params))

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(name, t) for name, t in named_tensors(self._params) if t.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in named_tensors(self._params)}

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = '') -> None:
        """
        Copy values into the parameters named ``prefix*``.

        Every such parameter must be present with a matching shape; names
        outside the prefix are ignored.
        """
        targets = {
            name: t for name, t in named_tensors(self._params) if name.startswith(prefix)
        }
        wanted = {name: value for name, value in state.items() if name.startswith(prefix)}
        missing = sorted(targets.keys() - wanted.keys())
        unexpected = sorted(wanted.keys() - targets.keys())
        if missing or unexpected:
            raise CheckpointError(
                f'missing {missing[:5]}, unexpected {unexpected[:5]} '
                f'({len(missing)} missing, {len(unexpected)} unexpected)'
            )
        for name, tensor in targets.items():
            value = np.asarray(wanted[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise CheckpointError(f'{name}: shape {value.shape} != {tensor.shape}')
            if not np.isfinite(value).all():
                raise CheckpointError(f'{name}: non-finite values')
            tensor.data = np.ascontiguousarray(value).copy()
            tensor.grad = None
