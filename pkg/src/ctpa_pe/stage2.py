"""Stage 2: sequence model over ordered slice embeddings with attention-MIL pooling.

Per study: BiLSTM over the slice embeddings (z order), a dense layer giving the
per-slice features h_k, an image head on each h_k, and a study head on the
attention-pooled bag feature z = sum_k a_k h_k with
a_k = softmax_k(w^T tanh(V h_k)).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
import torch
import torch.nn as nn

from ctpa_pe.consistency import PredictionSet
from ctpa_pe.errors import ConfigError, DataError
from ctpa_pe.labels import STUDY_LABELS
from ctpa_pe.loss import LabelWeights, total_study_loss
from ctpa_pe.stage1 import TrainResult

logger = logging.getLogger(__name__)


@dataclass
class AttentionParams:
    V: np.ndarray  # (r, m)
    w: np.ndarray  # (r,)


@dataclass
class AttentionResult:
    weights: np.ndarray  # (n,)
    bag: np.ndarray  # (m,)


def attention_logits(V: torch.Tensor, w: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """``w^T tanh(V h_k)`` for every row ``h_k`` of ``h``."""
    return torch.tanh(h @ V.T) @ w


def attention_weights(V, w, h) -> torch.Tensor:
    logits = attention_logits(V, w, h)
    # max-shifted softmax
    e = torch.exp(logits - logits.max())
    return e / e.sum()


def attention_pool(params: AttentionParams, features) -> AttentionResult:
    """Attention weights and bag feature for one study's ``(n, m)`` features."""
    h = torch.as_tensor(np.asarray(features, dtype=np.float64))
    if h.ndim != 2 or h.shape[0] == 0:
        raise DataError(f"expected (n>=1, m) features, got {tuple(h.shape)}")
    V = torch.as_tensor(np.asarray(params.V, dtype=np.float64))
    w = torch.as_tensor(np.asarray(params.w, dtype=np.float64))
    if V.shape[1] != h.shape[1] or w.shape != (V.shape[0],):
        raise DataError(f"attention params V{tuple(V.shape)} w{tuple(w.shape)} do not fit features of width {h.shape[1]}")
    a = attention_weights(V, w, h)
    return AttentionResult(a.numpy(), (a @ h).numpy())


class AttentionPooling(nn.Module):
    def __init__(self, feature_dim: int, hidden_dim: int):
        super().__init__()
        self.V = nn.Parameter(torch.empty(hidden_dim, feature_dim))
        self.w = nn.Parameter(torch.empty(hidden_dim))
        nn.init.xavier_uniform_(self.V)
        nn.init.uniform_(self.w, -hidden_dim ** -0.5, hidden_dim ** -0.5)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a = attention_weights(self.V, self.w, h)
        return a, a @ h

    def params(self) -> AttentionParams:
        return AttentionParams(self.V.detach().double().numpy().copy(), self.w.detach().double().numpy().copy())


class MeanPooling(nn.Module):
    """Uniform weights; the no-attention ablation."""

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a = torch.full((h.shape[0],), 1.0 / h.shape[0], dtype=h.dtype)
        return a, h.mean(dim=0)


class Stage2Model(nn.Module):
    def __init__(self, embed_dim: int = 512, lstm_hidden: int = 128, seq_dim: int = 256,
                 attn_dim: int = 128, pooling: str = "attention", dropout: float = 0.0):
        super().__init__()
        self.config = dict(embed_dim=embed_dim, lstm_hidden=lstm_hidden, seq_dim=seq_dim,
                           attn_dim=attn_dim, pooling=pooling, dropout=dropout)
        self.embed_dim = embed_dim
        self.lstm = nn.LSTM(embed_dim, lstm_hidden, num_layers=1, batch_first=True, bidirectional=True)
        self.dense = nn.Sequential(nn.Dropout(dropout), nn.Linear(2 * lstm_hidden, seq_dim), nn.ReLU())
        if pooling == "attention":
            self.pool = AttentionPooling(seq_dim, attn_dim)
        elif pooling == "mean":
            self.pool = MeanPooling()
        else:
            raise ConfigError(f"unknown pooling {pooling!r}")
        self.image_head = nn.Linear(seq_dim, 1)
        self.study_head = nn.Linear(seq_dim, len(STUDY_LABELS))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``(n, d)`` embeddings -> ``(n, m)`` sequence features."""
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError(f"expected (n>=1, d) embeddings, got {tuple(x.shape)}")
        if x.shape[1] != self.embed_dim:
            raise DataError(f"embedding width {x.shape[1]} != model input width {self.embed_dim}")
        out, _ = self.lstm(x.unsqueeze(0))
        return self.dense(out.squeeze(0))

    def forward(self, x: torch.Tensor):
        """Returns image logits ``(n,)``, study logits ``(9,)``, weights ``(n,)``, bag ``(m,)``, features."""
        h = self.encode(x)
        a, z = self.pool(h)
        return self.image_head(h).squeeze(-1), self.study_head(z), a, z, h


def _as_input(embeddings) -> torch.Tensor:
    return torch.as_tensor(np.asarray(embeddings, dtype=np.float32))


@torch.no_grad()
def encode_sequence(model: Stage2Model, embeddings) -> np.ndarray:
    model.eval()
    return model.encode(_as_input(embeddings)).numpy()


@torch.no_grad()
def predict_study(model: Stage2Model, embeddings) -> tuple[PredictionSet, AttentionResult]:
    model.eval()
    image_logits, study_logits, a, z, _ = model(_as_input(embeddings))
    preds = PredictionSet(torch.sigmoid(image_logits.double()).numpy(), torch.sigmoid(study_logits.double()).numpy())
    return preds, AttentionResult(a.double().numpy(), z.double().numpy())


@dataclass
class Stage2Settings:
    lstm_hidden: int = 128
    seq_dim: int = 256
    attn_dim: int = 128
    pooling: str = "attention"
    dropout: float = 0.0
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 40
    seed: int = 0
    weights: LabelWeights = field(default_factory=LabelWeights.uniform)


def _study_loss(model: Stage2Model, x: torch.Tensor, labels, weights: LabelWeights) -> torch.Tensor:
    image_logits, study_logits, *_ = model(x)
    image_y = torch.as_tensor(labels.image_pe, dtype=torch.float32)
    study_y = torch.as_tensor(labels.study_vector(), dtype=torch.float32)
    return total_study_loss(image_y, torch.sigmoid(image_logits), study_y, torch.sigmoid(study_logits), weights).total


def _collect(features: Mapping[str, Optional[np.ndarray]], labels: Mapping, what: str):
    missing = sorted(sid for sid in labels if features.get(sid) is None)
    if missing:
        raise DataError(f"missing {what} feature cache for studies: {', '.join(missing)}")
    items = []
    for sid in sorted(labels):
        x = np.asarray(features[sid], dtype=np.float32)
        lab = labels[sid]
        if lab is None:
            raise DataError(f"{what} study {sid} lacks labels")
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError(f"{what} study {sid}: empty feature cache")
        if x.shape[0] != len(lab.image_pe):
            raise DataError(f"{what} study {sid}: {x.shape[0]} embeddings vs {len(lab.image_pe)} image labels")
        items.append((sid, torch.as_tensor(x), lab))
    return items


@torch.no_grad()
def evaluate_loss(model: Stage2Model, items, weights: LabelWeights) -> float:
    model.eval()
    return float(np.mean([float(_study_loss(model, x, lab, weights)) for _, x, lab in items]))


def train_stage2(
    features: Mapping[str, Optional[np.ndarray]],
    labels: Mapping,
    settings: Stage2Settings,
    val_features: Mapping[str, Optional[np.ndarray]] | None = None,
    val_labels: Mapping | None = None,
    on_epoch: Optional[Callable[[int, nn.Module], None]] = None,
) -> TrainResult:
    """Adam over one-study batches; keeps the lowest-validation-loss epoch."""
    train = _collect(features, labels, "training")
    if not train:
        raise DataError("empty training set")
    val = _collect(val_features or {}, val_labels or {}, "validation")
    torch.manual_seed(settings.seed)
    model = Stage2Model(train[0][1].shape[1], settings.lstm_hidden, settings.seq_dim,
                        settings.attn_dim, settings.pooling, settings.dropout)
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    rng = np.random.default_rng(settings.seed)

    log, best_state, best_epoch, best = [], None, -1, float("inf")
    for epoch in range(settings.epochs):
        model.train()
        losses = []
        for idx in rng.permutation(len(train)):
            _, x, lab = train[idx]
            opt.zero_grad(set_to_none=True)
            loss = _study_loss(model, x, lab, settings.weights)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, val, settings.weights) if val else None
        score = val_loss if val_loss is not None else train_loss
        if score < best:
            best, best_epoch, best_state = score, epoch, copy.deepcopy(model.state_dict())
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        logger.debug("stage2 epoch %d train %.5f val %s", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, model)

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, log, best_epoch, best if val else None)
