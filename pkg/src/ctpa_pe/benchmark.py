"""Desk-scale synthetic benchmark: both stages trained in memory, plus the ablations.

Used by the acceptance suite; also handy for quick sanity runs::

    python -m ctpa_pe.benchmark --seed 0
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from ctpa_pe.consistency import enforce
from ctpa_pe.data import generate_synthetic_study, random_synthetic_specs, split_dataset
from ctpa_pe.evaluate import (
    StudyRecord,
    attention_ratio,
    cam_localization,
    evaluate_predictions,
)
from ctpa_pe.loss import LabelWeights
from ctpa_pe.stage1 import (
    Stage1Settings,
    TrainExample,
    aggregate_study_stage1,
    extract_embedding,
    predict_slice,
    train_stage1,
)
from ctpa_pe.stage2 import Stage2Settings, predict_study, train_stage2
from ctpa_pe.windowing import to_three_channel

logger = logging.getLogger(__name__)


@dataclass
class BenchmarkSettings:
    n_studies: int = 200
    slice_range: tuple[int, int] = (16, 32)
    size: int = 64
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    cohort_seed: int = 1234
    stage1_epochs: int = 16
    stage1_lr_schedule: str = "cosine"
    stage2_epochs: int = 40
    embed_dim: int = 512
    weights: LabelWeights = field(default_factory=LabelWeights.uniform)
    spec_overrides: dict = field(default_factory=dict)


@dataclass
class BenchmarkResult:
    seed: int
    auc: dict[str, dict[str, float | None]]  # variant -> label -> AUC
    attention_ratio: float
    cam_hit_rate: float
    cam_slices: int
    seconds: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def _example(study) -> TrainExample:
    return TrainExample(study.study_id, to_three_channel(study.volume.slices),
                        study.labels.image_pe.astype(np.float32), study.labels.study_vector().astype(np.float32))


def run_benchmark(seed: int = 0, settings: BenchmarkSettings | None = None) -> BenchmarkResult:
    """Generate the cohort, train Stage 1 once and Stage 2 with attention and mean pooling.

    ``seed`` drives model initialization and the training order; the cohort is
    drawn from ``settings.cohort_seed + seed`` so each seed sees a fresh cohort.
    """
    settings = settings or BenchmarkSettings()
    t0 = time.time()
    torch.manual_seed(seed)
    cohort_seed = settings.cohort_seed + seed
    specs = random_synthetic_specs(settings.n_studies, cohort_seed, settings.slice_range, settings.size,
                                   **settings.spec_overrides)
    studies = [generate_synthetic_study(cohort_seed * 100003 + i, spec, f"b{cohort_seed}_{i:04d}")
               for i, spec in enumerate(specs)]
    by_id = {s.study_id: s for s in studies}
    parts = split_dataset(list(by_id), settings.fractions, cohort_seed)
    train, val, test = ([by_id[i] for i in parts[name]] for name in ("train", "val", "test"))
    labels = {s.study_id: s.labels for s in studies}

    s1 = train_stage1([_example(s) for s in train],
                      Stage1Settings(embed_dim=settings.embed_dim, epochs=settings.stage1_epochs,
                                     lr_schedule=settings.stage1_lr_schedule,
                                     seed=seed, weights=settings.weights),
                      [_example(s) for s in val])
    stage1 = s1.model
    logger.info("stage 1 done after %.0fs (best epoch %d)", time.time() - t0, s1.best_epoch)

    windowed = {s.study_id: to_three_channel(s.volume.slices) for s in studies}
    feats = {sid: extract_embedding(stage1, x) for sid, x in windowed.items()}
    auc: dict[str, dict[str, float | None]] = {}

    records = []
    for s in test:
        p = predict_slice(stage1, windowed[s.study_id])
        study_p = aggregate_study_stage1(p[:, 1:])
        records.append(StudyRecord(s.study_id, study_p, study_p, p[:, 0], np.full(len(p), 1.0 / len(p))))
    auc["stage1_only"] = {r["label"]: r["auc"] for r in evaluate_predictions(records, labels).rows}

    ratio = float("nan")
    for pooling in ("mean", "attention"):
        s2 = train_stage2({s.study_id: feats[s.study_id] for s in train}, {s.study_id: labels[s.study_id] for s in train},
                          Stage2Settings(pooling=pooling, epochs=settings.stage2_epochs, seed=seed, weights=settings.weights),
                          {s.study_id: feats[s.study_id] for s in val}, {s.study_id: labels[s.study_id] for s in val})
        records = []
        for s in test:
            raw, att = predict_study(s2.model, feats[s.study_id])
            final = enforce(raw)
            records.append(StudyRecord(s.study_id, final.study_probs, raw.study_probs, raw.image_probs, att.weights, att.bag))
        auc[pooling] = {r["label"]: r["auc"] for r in evaluate_predictions(records, labels).rows}
        if pooling == "attention":
            ratio = attention_ratio(records, labels)
        logger.info("stage 2 (%s) done after %.0fs", pooling, time.time() - t0)

    hit_rate, n_cam = cam_localization(stage1, [s for s in test if s.labels.pe_present])
    return BenchmarkResult(seed, auc, ratio, float(hit_rate), n_cam, time.time() - t0)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="desk-scale synthetic benchmark")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--stage1-epochs", type=int, default=BenchmarkSettings.stage1_epochs)
    parser.add_argument("--stage2-epochs", type=int, default=BenchmarkSettings.stage2_epochs)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    settings = BenchmarkSettings(stage1_epochs=args.stage1_epochs, stage2_epochs=args.stage2_epochs)
    print(run_benchmark(args.seed, settings).to_json())


if __name__ == "__main__":
    main()
