"""ROC/AUC metrics, class activation maps, and 2-D embedding of bag features."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ctpa_pe.consistency import PredictionSet, validate
from ctpa_pe.errors import DataError
from ctpa_pe.labels import IMAGE_LABEL, STUDY_LABELS

PE_PRESENT = "pe_present"


@dataclass
class ROCResult:
    label: str
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n_pos: int
    n_neg: int


def roc_auc(labels, scores, label: str = "") -> ROCResult:
    """ROC curve with tied scores grouped into one step; AUC by the trapezoid rule.

    Grouping ties makes the AUC equal the Mann-Whitney statistic with
    half credit for ties.
    """
    y = np.asarray(labels).astype(bool).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise DataError(f"{y.size} labels vs {s.size} scores")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"undefined AUC for {label or 'label'}: only one class present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tps = np.cumsum(y_sorted)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return ROCResult(label, thresholds, fpr, tpr, auc, n_pos, n_neg)


@dataclass
class ActivationMap:
    heatmap: np.ndarray  # (H', W') >= 0
    overlay: np.ndarray  # (H, W) in [0, 1]
    upsampled: np.ndarray  # (H, W) >= 0, unnormalized


@torch.no_grad()
def compute_cam(model, windowed) -> ActivationMap | list[ActivationMap]:
    """Channel mean of the final conv feature maps, rectified, bilinearly upsampled.

    ``windowed`` is one slice ``(3, H, W)`` or a stack ``(n, 3, H, W)``.
    """
    model.eval()
    arr = np.asarray(windowed, dtype=np.float32)
    single = arr.ndim == 3
    x = torch.as_tensor(arr[None] if single else arr)
    cams = model.feature_maps(x).mean(dim=1, keepdim=True).clamp(min=0)
    up = F.interpolate(cams, size=x.shape[2:], mode="bilinear", align_corners=False).clamp(min=0)
    out = []
    for c, u in zip(cams[:, 0].double().numpy(), up[:, 0].double().numpy()):
        peak = u.max()
        out.append(ActivationMap(c, u / peak if peak > 0 else np.zeros_like(u), u))
    return out[0] if single else out


def embed_bags_2d(bags, seed: int = 0, method: str = "tsne") -> np.ndarray:
    """2-D coordinates for ``(S, m)`` bag features via t-SNE (default) or PCA."""
    from sklearn.decomposition import PCA
    from sklearn.manifold import TSNE

    x = np.asarray(bags, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("need at least 2 bag vectors")
    if method == "pca":
        if x.shape[1] < 2:
            x = np.pad(x, ((0, 0), (0, 2 - x.shape[1])))
        return PCA(n_components=2, random_state=seed).fit_transform(x)
    if method != "tsne":
        raise ValueError(f"unknown embedding method {method!r}")
    perplexity = float(min(30.0, max(1.0, (x.shape[0] - 1) / 3.0)))
    if perplexity >= x.shape[0]:
        perplexity = x.shape[0] - 1.0 if x.shape[0] > 2 else 0.5
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed, method="exact")
    return tsne.fit_transform(x)


@dataclass
class StudyRecord:
    """Predictions for one study as produced by ``predict``."""

    study_id: str
    study_probs: np.ndarray  # enforced, STUDY_LABELS order
    raw_study_probs: np.ndarray
    image_probs: np.ndarray
    attention: np.ndarray
    bag: Optional[np.ndarray] = None


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    rocs: dict[str, ROCResult] = field(default_factory=dict)
    violations: int = 0

    def auc(self, label: str) -> Optional[float]:
        roc = self.rocs.get(label)
        return None if roc is None else roc.auc

    def to_csv(self) -> str:
        lines = ["label,auc,n_pos,n_neg"]
        for r in self.rows:
            auc = "skipped" if r["auc"] is None else f"{r['auc']:.6f}"
            lines.append(f"{r['label']},{auc},{r['n_pos']},{r['n_neg']}")
        return "\n".join(lines) + "\n"


def _add(report: MetricsReport, label: str, y, s) -> None:
    y = np.asarray(y).astype(int)
    n_pos, n_neg = int(y.sum()), int(y.size - y.sum())
    if n_pos == 0 or n_neg == 0:
        report.rows.append({"label": label, "auc": None, "n_pos": n_pos, "n_neg": n_neg,
                            "note": "skipped: single class in split"})
        return
    roc = roc_auc(y, s, label)
    report.rocs[label] = roc
    report.rows.append({"label": label, "auc": roc.auc, "n_pos": n_pos, "n_neg": n_neg})


def evaluate_predictions(records: Sequence[StudyRecord], labels: Mapping, require_pe_both_classes: bool = True) -> MetricsReport:
    """Per-label ROC over a split.

    ``labels`` maps study_id -> StudyLabels. Rows: pe_present (scored as
    1 - p(negative_for_pe)), the nine study labels, and the image-level label
    pooled over all slices when image labels exist. Labels with one class in the
    split are reported as skipped; a single-class PE split is an error.
    """
    missing = [r.study_id for r in records if labels.get(r.study_id) is None]
    if missing:
        raise DataError(f"no labels for studies: {', '.join(missing)}")
    if not records:
        raise DataError("no predictions to evaluate")
    y_study = np.stack([labels[r.study_id].study_vector() for r in records])
    p_study = np.stack([r.study_probs for r in records])

    report = MetricsReport()
    pe_y = np.array([labels[r.study_id].pe_present for r in records], dtype=int)
    if require_pe_both_classes and (pe_y.all() or not pe_y.any()):
        raise DataError("undefined AUC for pe_present: split has a single PE class")
    _add(report, PE_PRESENT, pe_y, 1.0 - p_study[:, STUDY_LABELS.index("negative_for_pe")])
    for j, name in enumerate(STUDY_LABELS):
        _add(report, name, y_study[:, j], p_study[:, j])
    img_y = [labels[r.study_id].image_pe for r in records]
    if all(y is not None and len(y) == len(r.image_probs) for y, r in zip(img_y, records)):
        _add(report, IMAGE_LABEL, np.concatenate(img_y), np.concatenate([r.image_probs for r in records]))
    report.violations = sum(
        not validate(PredictionSet(r.image_probs, r.study_probs)).is_consistent for r in records
    )
    return report


def evaluate_dataset(stage1_model, stage2_model, studies, windows=None, enforce_rules: bool = True) -> tuple[MetricsReport, list[StudyRecord]]:
    """Predict every study with the model pair and score the split."""
    from ctpa_pe.pipeline import predict_studies

    records = predict_studies(stage1_model, stage2_model, studies, windows=windows, enforce_rules=enforce_rules)
    return evaluate_predictions(records, {s.study_id: s.labels for s in studies}), records


def attention_ratio(records: Iterable[StudyRecord], labels: Mapping) -> float:
    """Mean attention on PE-positive slices over mean on negative slices (positive studies only)."""
    pos, neg = [], []
    for r in records:
        y = np.asarray(labels[r.study_id].image_pe).astype(bool)
        if y.any() and (~y).any():
            pos.extend(r.attention[y])
            neg.extend(r.attention[~y])
    if not pos or not neg:
        raise DataError("no positive studies with both positive and negative slices")
    return float(np.mean(pos) / np.mean(neg))


def cam_localization(model, studies, windows=None) -> tuple[float, int]:
    """Fraction of annotated clot slices whose CAM is hotter inside the clot boxes than outside.

    Uses ``Study.clot_boxes``; returns ``(fraction, slices checked)``.
    """
    from ctpa_pe.windowing import DEFAULT_WINDOWS, to_three_channel

    hits = total = 0
    for study in studies:
        if not study.clot_boxes:
            continue
        ks = sorted(study.clot_boxes)
        windowed = to_three_channel(study.volume.slices[ks], windows or DEFAULT_WINDOWS)
        for k, cam in zip(ks, compute_cam(model, windowed)):
            inside = np.zeros(cam.upsampled.shape, dtype=bool)
            for y0, x0, y1, x1 in study.clot_boxes[k]:
                inside[y0:y1 + 1, x0:x1 + 1] = True
            hits += cam.upsampled[inside].mean() > cam.upsampled[~inside].mean()
            total += 1
    if total == 0:
        raise DataError("no annotated clot slices")
    return hits / total, total
