"""Stage 1: per-slice CNN, global-average-pooled embedding, 10-way multi-label head.

Training batches are whole studies. Study-level probabilities during training
and inference are the per-label maximum over the study's slices.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ctpa_pe.errors import ConfigError, ContractError, DataError
from ctpa_pe.labels import STAGE1_OUTPUTS
from ctpa_pe.loss import LabelWeights, total_study_loss

logger = logging.getLogger(__name__)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    # replicate padding keeps constant inputs spatially constant
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, padding_mode="replicate", bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SmallConvNet(nn.Module):
    """Four conv stages, two 2x poolings, 1x1 projection to ``out_channels``."""

    def __init__(self, out_channels: int, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            _conv_block(3, width),
            nn.MaxPool2d(2),
            _conv_block(width, 2 * width),
            nn.MaxPool2d(2),
            _conv_block(2 * width, 4 * width),
            _conv_block(4 * width, 4 * width),
        )
        self.final = nn.Sequential(nn.Conv2d(4 * width, out_channels, 1), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.final(self.body(x))


class EfficientNetFeatures(nn.Module):
    """torchvision EfficientNet-B0 trunk (random init) with a 1x1 projection to ``out_channels``."""

    def __init__(self, out_channels: int):
        super().__init__()
        from torchvision.models import efficientnet_b0

        self.body = efficientnet_b0(weights=None).features
        self.final = nn.Sequential(nn.Conv2d(1280, out_channels, 1), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.final(self.body(x))


BACKBONES = {
    "small_cnn": SmallConvNet,
    "efficientnet_b0": EfficientNetFeatures,
}


def build_backbone(name: str, out_channels: int) -> nn.Module:
    try:
        return BACKBONES[name](out_channels)
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}") from None


class Stage1Model(nn.Module):
    def __init__(self, backbone: str = "small_cnn", embed_dim: int = 512, image_size=(64, 64),
                 label_names: Sequence[str] = STAGE1_OUTPUTS):
        super().__init__()
        self.backbone_name = backbone
        self.embed_dim = embed_dim
        self.image_size = tuple(int(s) for s in image_size)
        self.label_names = tuple(label_names)
        self.backbone = build_backbone(backbone, embed_dim)
        self.head = nn.Linear(embed_dim, len(self.label_names))

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.image_size:
            raise DataError(
                f"expected slices of shape (batch, 3, {self.image_size[0]}, {self.image_size[1]}), got {tuple(x.shape)}"
            )

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Final convolutional feature maps ``(batch, d, H', W')``."""
        self._check(x)
        return self.backbone(x)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_maps(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits ``(batch, 10)``."""
        return self.head(self.embed(x))

    def describe(self) -> dict:
        return {
            "backbone": self.backbone_name,
            "embed_dim": self.embed_dim,
            "image_size": list(self.image_size),
            "label_names": list(self.label_names),
        }

    @classmethod
    def from_description(cls, desc: dict) -> "Stage1Model":
        return cls(desc["backbone"], desc["embed_dim"], desc["image_size"], desc["label_names"])


def _batch(windowed) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(windowed, dtype=np.float32))
    return x.unsqueeze(0) if x.ndim == 3 else x


@torch.no_grad()
def extract_embedding(model: Stage1Model, windowed, chunk: int = 64) -> np.ndarray:
    """Embedding for one slice ``(3, H, W)`` -> ``(d,)`` or a stack ``(n, 3, H, W)`` -> ``(n, d)``."""
    model.eval()
    x = _batch(windowed)
    out = torch.cat([model.embed(x[i:i + chunk]) for i in range(0, len(x), chunk)])
    out = out.numpy().astype(np.float32)
    return out[0] if np.asarray(windowed).ndim == 3 else out


@torch.no_grad()
def predict_slice(model: Stage1Model, windowed, chunk: int = 64) -> np.ndarray:
    """Sigmoid probabilities over the 10 outputs, per slice."""
    model.eval()
    x = _batch(windowed)
    logits = torch.cat([model(x[i:i + chunk]) for i in range(0, len(x), chunk)])
    probs = torch.sigmoid(logits.double()).numpy()
    return probs[0] if np.asarray(windowed).ndim == 3 else probs


def aggregate_study_stage1(per_slice_probs) -> np.ndarray:
    """Per-label maximum over slices; works on numpy arrays and torch tensors."""
    if isinstance(per_slice_probs, torch.Tensor):
        if per_slice_probs.ndim != 2 or per_slice_probs.shape[0] == 0:
            raise DataError("need an (n>=1, labels) probability matrix")
        return per_slice_probs.max(dim=0).values
    p = np.asarray(per_slice_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise DataError("need an (n>=1, labels) probability matrix")
    return p.max(axis=0)


def stage1_study_loss(probs: torch.Tensor, image_labels, study_labels, weights: LabelWeights) -> torch.Tensor:
    """Total loss for one study given its ``(n, 10)`` Stage-1 probabilities."""
    study_probs = aggregate_study_stage1(probs[:, 1:])
    return total_study_loss(image_labels, probs[:, 0], study_labels, study_probs, weights).total


@dataclass
class TrainExample:
    study_id: str
    windowed: np.ndarray  # (n, 3, H, W) float32
    image_labels: np.ndarray
    study_labels: np.ndarray  # length 9


@dataclass
class Stage1Settings:
    backbone: str = "small_cnn"
    embed_dim: int = 512
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 8
    max_slices_per_batch: int = 64
    seed: int = 0
    lr_schedule: str = "constant"  # constant | cosine (per-epoch decay to zero)
    weights: LabelWeights = field(default_factory=LabelWeights.uniform)


@dataclass
class TrainResult:
    model: nn.Module
    log: list[dict]
    best_epoch: int
    best_val_loss: Optional[float]


def _check_examples(examples: Sequence[TrainExample], what: str) -> None:
    for ex in examples:
        if ex.image_labels is None or ex.study_labels is None:
            raise DataError(f"{what} study {ex.study_id} lacks labels")
        if len(ex.windowed) == 0 or len(ex.image_labels) != len(ex.windowed):
            raise DataError(f"{what} study {ex.study_id}: {len(ex.windowed)} slices, {len(ex.image_labels)} image labels")


def _study_step(model: Stage1Model, ex: TrainExample, weights: LabelWeights, chunk: int) -> float:
    """Accumulate exact gradients for one study processed in chunks of ``chunk`` slices.

    The loss couples all slices through the max, so probabilities are first
    computed without a graph, the loss gradient w.r.t. them is taken, and each
    chunk is re-run with that upstream gradient.
    """
    x = torch.as_tensor(ex.windowed)
    n = len(x)
    if n <= chunk:
        probs = torch.sigmoid(model(x))
        loss = stage1_study_loss(probs, _labels(ex.image_labels, probs), _labels(ex.study_labels, probs), weights)
        loss.backward()
        return loss.item()
    with torch.no_grad():
        logits = torch.cat([model(x[i:i + chunk]) for i in range(0, n, chunk)])
    logits.requires_grad_(True)
    probs = torch.sigmoid(logits)
    loss = stage1_study_loss(probs, _labels(ex.image_labels, probs), _labels(ex.study_labels, probs), weights)
    (grad,) = torch.autograd.grad(loss, logits)
    for i in range(0, n, chunk):
        model(x[i:i + chunk]).backward(grad[i:i + chunk])
    return loss.item()


def _labels(values, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values), dtype=like.dtype)


@torch.no_grad()
def evaluate_loss(model: Stage1Model, examples: Sequence[TrainExample], weights: LabelWeights, chunk: int = 64) -> float:
    model.eval()
    losses = []
    for ex in examples:
        probs = torch.as_tensor(predict_slice(model, ex.windowed, chunk))
        losses.append(float(stage1_study_loss(probs, _labels(ex.image_labels, probs), _labels(ex.study_labels, probs), weights)))
    return float(np.mean(losses))


def train_stage1(
    train: Sequence[TrainExample],
    settings: Stage1Settings,
    val: Sequence[TrainExample] = (),
    on_epoch: Optional[Callable[[int, nn.Module], None]] = None,
) -> TrainResult:
    """Adam over one-study batches; keeps the epoch with the lowest validation loss.

    Without a validation set the training loss of each epoch selects the model.
    """
    if not train:
        raise DataError("empty training set")
    _check_examples(train, "training")
    _check_examples(val, "validation")
    torch.manual_seed(settings.seed)
    image_size = train[0].windowed.shape[2:]
    model = Stage1Model(settings.backbone, settings.embed_dim, image_size)
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    if settings.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=settings.epochs)
    elif settings.lr_schedule == "constant":
        sched = None
    else:
        raise ConfigError(f"unknown lr_schedule {settings.lr_schedule!r}")
    rng = np.random.default_rng(settings.seed)

    log, best_state, best_epoch, best = [], None, -1, float("inf")
    for epoch in range(settings.epochs):
        model.train()
        step_losses = []
        for idx in rng.permutation(len(train)):
            opt.zero_grad(set_to_none=True)
            step_losses.append(_study_step(model, train[idx], settings.weights, settings.max_slices_per_batch))
            opt.step()
        train_loss = float(np.mean(step_losses))
        val_loss = evaluate_loss(model, val, settings.weights, settings.max_slices_per_batch) if val else None
        score = val_loss if val_loss is not None else train_loss
        if score < best:
            best, best_epoch, best_state = score, epoch, copy.deepcopy(model.state_dict())
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "step_losses": step_losses})
        logger.info("stage1 epoch %d train %.5f val %s", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, model)
        if sched is not None:
            sched.step()

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, log, best_epoch, best if val else None)


def check_image_size(model: Stage1Model, windowed: np.ndarray) -> None:
    if tuple(windowed.shape[-2:]) != model.image_size:
        raise ContractError(f"model expects {model.image_size} slices, got {tuple(windowed.shape[-2:])}")
