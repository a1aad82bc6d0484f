"""Weighted log loss over study labels and per-slice PE labels, normalized per study.

All functions take tensors (kept on their dtype/device, autograd-friendly) or
array-likes (converted to float64 tensors).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch

from ctpa_pe.errors import ConfigError, DataError
from ctpa_pe.labels import STUDY_LABELS

EPS = 1e-7


@dataclass
class LabelWeights:
    study_weights: dict[str, float]
    image_weight: float

    def __post_init__(self):
        missing = [name for name in STUDY_LABELS if name not in self.study_weights]
        if missing:
            raise ConfigError(f"missing study weights for {missing}")
        unknown = sorted(set(self.study_weights) - set(STUDY_LABELS))
        if unknown:
            raise ConfigError(f"unknown study labels in weights: {unknown}")
        values = list(self.study_weights.values()) + [self.image_weight]
        if any(v < 0 for v in values):
            raise ConfigError("label weights must be nonnegative")
        if not any(v > 0 for v in values):
            raise ConfigError("at least one label weight must be positive")

    @classmethod
    def uniform(cls, value: float = 1.0) -> "LabelWeights":
        return cls({name: value for name in STUDY_LABELS}, value)

    def study_vector(self) -> list[float]:
        return [float(self.study_weights[name]) for name in STUDY_LABELS]


@dataclass
class StudyLossBreakdown:
    per_label: dict[str, torch.Tensor]
    per_image: torch.Tensor
    total: torch.Tensor
    normalizer: torch.Tensor
    study_terms: torch.Tensor = field(repr=False, default=None)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if like is not None:
        return torch.as_tensor(x, dtype=like.dtype, device=like.device)
    return torch.as_tensor(x, dtype=torch.float64)


def _bce(y: torch.Tensor, p: torch.Tensor, eps: float) -> torch.Tensor:
    # Each log argument is floored at eps, so p == y gives exactly 0.
    log_p = torch.log(p.clamp(min=eps))
    log_q = torch.log((1.0 - p).clamp(min=eps))
    return -(y * log_p + (1.0 - y) * log_q)


def study_label_loss(y, p, w_j, eps: float = EPS) -> torch.Tensor:
    """``-w_j [y log p + (1-y) log(1-p)]`` with p clamped to ``[eps, 1-eps]``. Broadcasts."""
    p = _as_tensor(p)
    y = _as_tensor(y, like=p)
    w_j = _as_tensor(w_j, like=p)
    return w_j * _bce(y, p, eps)


def image_loss(y, p, w, eps: float = EPS) -> torch.Tensor:
    """Per-slice losses sharing the study-wide multiplier ``w * sum(y) / n``."""
    p = _as_tensor(p)
    y = _as_tensor(y, like=p)
    if y.shape != p.shape or y.ndim != 1:
        raise DataError(f"image labels {tuple(y.shape)} and probabilities {tuple(p.shape)} must be equal-length vectors")
    if y.numel() == 0:
        raise DataError("study has no images")
    multiplier = w * y.sum() / y.numel()
    return multiplier * _bce(y, p, eps)


def total_study_loss(
    image_labels,
    image_probs,
    study_labels,
    study_probs,
    weights: LabelWeights,
    eps: float = EPS,
) -> StudyLossBreakdown:
    """Sum of image and study terms divided by ``sum_j w_j + w * sum_k y_k``.

    ``study_labels``/``study_probs`` are length-9 vectors in ``STUDY_LABELS`` order,
    or mappings keyed by label name.
    """
    study_probs = _vector(study_probs)
    study_labels = _vector(study_labels, like=study_probs)
    image_probs = _as_tensor(image_probs, like=study_probs)
    image_labels = _as_tensor(image_labels, like=image_probs)
    w_study = torch.as_tensor(weights.study_vector(), dtype=study_probs.dtype, device=study_probs.device)

    per_image = image_loss(image_labels, image_probs, weights.image_weight, eps)
    study_terms = study_label_loss(study_labels, study_probs, w_study, eps)
    normalizer = w_study.sum() + weights.image_weight * image_labels.sum()
    if not normalizer > 0:
        raise ConfigError("zero loss normalizer: all active weights are zero for this study")
    total = (per_image.sum() + study_terms.sum()) / normalizer
    return StudyLossBreakdown(
        per_label={name: study_terms[i] for i, name in enumerate(STUDY_LABELS)},
        per_image=per_image,
        total=total,
        normalizer=normalizer,
        study_terms=study_terms,
    )


def _vector(values, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(values, Mapping):
        values = [values[name] for name in STUDY_LABELS]
        if like is None and isinstance(values[0], torch.Tensor):
            return torch.stack(values)
    t = _as_tensor(values, like=like)
    if t.shape != (len(STUDY_LABELS),):
        raise DataError(f"expected {len(STUDY_LABELS)} study values, got shape {tuple(t.shape)}")
    return t
