"""Four-part one-hot prompts and their additive injection into the backbone.

A prompt concatenates one-hot encodings of (dimension, modality, region,
type) into a fixed 19-long 0/1 vector. Each windowed-attention stage of
the backbone owns an independent learned linear map that projects the
vector to the embedding width; the result is added to every token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError, VocabularyError
from .numcore import Tensor

DIMS = ("2D", "3D")
MODALITIES = ("CT", "MR", "fundus", "other")
REGIONS = ("chest", "brain", "breast", "abdomen", "retina", "other")
TYPES = ("T1", "T2", "FLAIR", "lung-window", "soft-tissue-window",
         "color-fundus", "none")

_SEGMENTS = (("dim", DIMS), ("modality", MODALITIES),
             ("region", REGIONS), ("type", TYPES))

PROMPT_LENGTH = sum(len(vocab) for _, vocab in _SEGMENTS)  # 19


def _one_hot_index(field: str, value: str, vocab: tuple) -> int:
    try:
        return vocab.index(value)
    except ValueError:
        raise VocabularyError(
            f"unknown {field} value {value!r}; valid values: {', '.join(vocab)}"
        ) from None


def encode_prompts(dim: str, modality: str, region: str, type_: str) -> np.ndarray:
    """Concatenated one-hot vector in fixed segment order, length 19."""
    values = {"dim": dim, "modality": modality, "region": region, "type": type_}
    encoded = np.zeros(PROMPT_LENGTH)
    offset = 0
    for field, vocab in _SEGMENTS:
        encoded[offset + _one_hot_index(field, values[field], vocab)] = 1.0
        offset += len(vocab)
    return encoded


@dataclass(frozen=True)
class PromptVector:
    """Validated prompt fields; encoded() yields the 19-long 0/1 vector."""

    dim: str
    modality: str
    region: str
    type: str

    def encoded(self) -> np.ndarray:
        return encode_prompts(self.dim, self.modality, self.region, self.type)


class InjectionLayer:
    """Learned linear map from the 19-long prompt to the embedding width.

    One instance per injection site; perturbing one layer's weights never
    changes another layer's projection.
    """

    def __init__(self, embed_dim: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(PROMPT_LENGTH)
        self.weight = Tensor(
            rng.uniform(-bound, bound, (PROMPT_LENGTH, embed_dim)),
            requires_grad=True,
        )
        self.bias = Tensor(rng.uniform(-bound, bound, embed_dim), requires_grad=True)

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[1]

    def named_parameters(self, prefix: str = "") -> dict:
        sep = "." if prefix else ""
        return {f"{prefix}{sep}weight": self.weight, f"{prefix}{sep}bias": self.bias}

    def project(self, encoded: np.ndarray) -> Tensor:
        if encoded.shape != (PROMPT_LENGTH,):
            raise DimensionError(
                f"encoded prompt must have shape ({PROMPT_LENGTH},), got {encoded.shape}"
            )
        return Tensor(encoded[None, :]) @ self.weight + self.bias

    def zero_(self) -> None:
        self.weight.data[:] = 0.0
        self.bias.data[:] = 0.0


def inject(x: Tensor, encoded: Optional[np.ndarray], layer: InjectionLayer) -> Tensor:
    """y = x + FC(prompt), the projection broadcast to every token.

    encoded=None disables the prompt contribution but still performs the
    same broadcast add with an exact zero vector, so a prompt-off forward
    is bit-identical to a zero-weight injection.
    """
    embed = layer.embed_dim
    if x.ndim != 3 or x.shape[-1] != embed:
        raise DimensionError(
            f"injection expects tokens (b, N, {embed}), got {x.shape}"
        )
    if encoded is None:
        shift = Tensor(np.zeros((1, 1, embed)))
    else:
        encoded = np.asarray(encoded, dtype=np.float64)
        shift = layer.project(encoded).reshape(1, 1, embed)
    return x + shift


def auto_generate(sample, classifier=None, hints: Optional[dict] = None,
                  mode: str = "auto") -> PromptVector:
    """Build a PromptVector for a volume or 2D image.

    The dimension field always follows the input rank. Modality, region,
    and type come from the classifier's argmax, with manifest hints taking
    precedence when mode="manifest" and filling in whenever the classifier
    is unavailable. With neither source, this is a configuration error.
    """
    from .salient import Volume, normalize_resize  # local import, no cycle

    if isinstance(sample, Volume):
        dim = "3D" if sample.depth > 1 else "2D"
        image = sample.slice_at(sample.depth // 2)
    else:
        image = np.asarray(sample, dtype=np.float64)
        if image.ndim != 2:
            raise DimensionError(f"expected a 2D image, got shape {image.shape}")
        dim = "2D"

    hints = hints or {}
    predicted = None
    fields = {}
    for field, vocab in _SEGMENTS[1:]:
        hint = hints.get(field)
        if mode == "manifest" and hint is not None:
            fields[field] = hint
            continue
        if classifier is not None:
            if predicted is None:
                prepared = normalize_resize(image, classifier.cfg.img_size)
                predicted = classifier.classify(prepared)
            fields[field] = vocab[int(np.argmax(predicted[field]))]
        elif hint is not None:
            fields[field] = hint
        else:
            raise ConfigurationError(
                f"cannot derive prompt field {field!r}: no classifier weights "
                "loaded and no manifest hint present"
            )
    return PromptVector(dim=dim, modality=fields["modality"],
                        region=fields["region"], type=fields["type"])
