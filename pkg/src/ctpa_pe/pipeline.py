"""Pipeline steps behind the CLI: caches, checkpoints, predictions and reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from ctpa_pe import data
from ctpa_pe.config import RunConfig
from ctpa_pe.consistency import PredictionSet, enforce, validate
from ctpa_pe.errors import ContractError, DataError, FormatError, MissingArtifactError, PEError
from ctpa_pe.evaluate import (
    MetricsReport,
    StudyRecord,
    compute_cam,
    embed_bags_2d,
    evaluate_predictions,
)
from ctpa_pe.labels import STUDY_LABELS
from ctpa_pe.stage1 import Stage1Model, TrainExample, extract_embedding, train_stage1
from ctpa_pe.stage2 import Stage2Model, predict_study, train_stage2
from ctpa_pe.windowing import DEFAULT_WINDOWS, standardize, to_three_channel, to_uint8

logger = logging.getLogger(__name__)

WINDOWED = "windowed.f32"
WINDOWED_HASH = "windowed.sha256"
EMBEDDINGS = "embeddings.f32"
EMBEDDINGS_META = "embeddings.meta"
STAGE1_CKPT = "stage1.pt"
STAGE2_CKPT = "stage2.pt"


def set_deterministic(enabled: bool, seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# windowing cache


def _window_key(cfg: RunConfig) -> str:
    return ";".join(f"{w.level!r},{w.width!r}" for w in cfg.windows)


def content_hash(study_dir: Path, cfg: RunConfig) -> str:
    h = hashlib.sha256()
    h.update((study_dir / data.MANIFEST).read_bytes())
    h.update((study_dir / data.VOLUME).read_bytes())
    h.update(_window_key(cfg).encode())
    return h.hexdigest()


def preprocess(cfg: RunConfig) -> dict:
    """Write ``windowed.f32`` for each study whose content hash changed."""
    done, skipped, failed = [], [], {}
    for study_dir in data.list_studies(cfg.dataset_root):
        try:
            digest = content_hash(study_dir, cfg)
            stamp = study_dir / WINDOWED_HASH
            if stamp.is_file() and (study_dir / WINDOWED).is_file() and stamp.read_text().split()[0] == digest:
                skipped.append(study_dir.name)
                continue
            study = data.load_study(study_dir)
            windowed = to_three_channel(study.volume.slices, cfg.windows)
            windowed.astype("<f4").tofile(study_dir / WINDOWED)
            stamp.write_text(f"{digest} config_hash={cfg.hash} seed={cfg.seed}\n")
            done.append(study_dir.name)
        except (PEError, OSError) as exc:
            failed[study_dir.name] = str(exc)
    return {"processed": done, "skipped": skipped, "failed": failed}


def load_windowed(study: data.Study, cfg: RunConfig, require_cache: bool = True) -> np.ndarray:
    path = study.path / WINDOWED if study.path is not None else None
    if path is not None and path.is_file():
        n = study.volume.n
        h, w = study.volume.shape
        arr = np.fromfile(path, dtype="<f4")
        if arr.size != n * 3 * h * w:
            raise FormatError(f"{path}: wrong size, rerun `preprocess`")
        arr = arr.reshape(n, 3, h, w)
    elif require_cache:
        raise MissingArtifactError(f"windowed cache for study {study.study_id}", "preprocess")
    else:
        arr = to_three_channel(study.volume.slices, cfg.windows)
    return standardize(arr) if cfg.input_standardize else arr


def to_examples(studies: Sequence[data.Study], cfg: RunConfig, require_cache: bool = True) -> list[TrainExample]:
    return [
        TrainExample(s.study_id, load_windowed(s, cfg, require_cache), s.labels.image_pe.astype(np.float32),
                     s.labels.study_vector().astype(np.float32))
        for s in data.iter_labelled(studies)
    ]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, kind: str, model, cfg: RunConfig, extra: dict) -> None:
    payload = {
        "kind": kind,
        "model": model.describe() if kind == "stage1" else model.config,
        "state_dict": model.state_dict(),
        "label_names": list(STUDY_LABELS),
        "config": cfg.to_text(),
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        **extra,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_stage1(path: Path) -> Stage1Model:
    if not Path(path).is_file():
        raise MissingArtifactError(f"stage-1 checkpoint {path}", "train-stage1")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "stage1":
        raise FormatError(f"{path} is not a stage-1 checkpoint")
    model = Stage1Model.from_description(ckpt["model"])
    model.load_state_dict(ckpt["state_dict"])
    return model.eval()


def load_stage2(path: Path) -> Stage2Model:
    if not Path(path).is_file():
        raise MissingArtifactError(f"stage-2 checkpoint {path}", "train-stage2")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "stage2":
        raise FormatError(f"{path} is not a stage-2 checkpoint")
    model = Stage2Model(**ckpt["model"])
    model.load_state_dict(ckpt["state_dict"])
    return model.eval()


def write_log(path: Path, log: list[dict], cfg: RunConfig, best_epoch: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash} seed={cfg.seed} best_epoch={best_epoch}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "best"])
        for row in log:
            val = "" if row["val_loss"] is None else repr(row["val_loss"])
            writer.writerow([row["epoch"], repr(row["train_loss"]), val, int(row["epoch"] == best_epoch)])


# --------------------------------------------------------------------------
# training commands


def _split(cfg: RunConfig, name: str) -> list[data.Study]:
    return data.load_dataset(cfg.dataset_root, split=name)


def run_train_stage1(cfg: RunConfig):
    train = to_examples(_split(cfg, "train"), cfg)
    val = to_examples(_split(cfg, "val"), cfg)
    result = train_stage1(train, cfg.stage1_settings(), val)
    out = cfg.output_dir
    save_checkpoint(out / STAGE1_CKPT, "stage1", result.model, cfg, {"best_epoch": result.best_epoch})
    write_log(out / "stage1_log.csv", result.log, cfg, result.best_epoch)
    return result


def run_extract_features(cfg: RunConfig) -> list[str]:
    model = load_stage1(cfg.output_dir / STAGE1_CKPT)
    ckpt_hash = hashlib.sha256((cfg.output_dir / STAGE1_CKPT).read_bytes()).hexdigest()[:16]
    written = []
    for study in data.load_dataset(cfg.dataset_root):
        emb = extract_embedding(model, load_windowed(study, cfg))
        emb.astype("<f4").tofile(study.path / EMBEDDINGS)
        (study.path / EMBEDDINGS_META).write_text(
            f"n={emb.shape[0]}\nd={emb.shape[1]}\nstage1={ckpt_hash}\nconfig_hash={cfg.hash}\nseed={cfg.seed}\n"
        )
        written.append(study.study_id)
    return written


def load_embeddings(study: data.Study) -> Optional[np.ndarray]:
    path = study.path / EMBEDDINGS
    meta = study.path / EMBEDDINGS_META
    if not path.is_file() or not meta.is_file():
        return None
    m = dict(line.split("=", 1) for line in meta.read_text().splitlines() if "=" in line)
    n, d = int(m["n"]), int(m["d"])
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != n * d:
        raise FormatError(f"{path}: {arr.size} values, expected {n}*{d}")
    return arr.reshape(n, d)


def run_train_stage2(cfg: RunConfig):
    train = list(data.iter_labelled(_split(cfg, "train")))
    val = list(data.iter_labelled(_split(cfg, "val")))
    feats = {s.study_id: load_embeddings(s) for s in train}
    val_feats = {s.study_id: load_embeddings(s) for s in val}
    missing = sorted(k for k, v in {**feats, **val_feats}.items() if v is None)
    if missing:
        raise MissingArtifactError(f"feature cache for studies {', '.join(missing)}", "extract-features")
    result = train_stage2(
        feats, {s.study_id: s.labels for s in train}, cfg.stage2_settings(),
        val_feats, {s.study_id: s.labels for s in val},
    )
    save_checkpoint(cfg.output_dir / STAGE2_CKPT, "stage2", result.model, cfg, {"best_epoch": result.best_epoch})
    write_log(cfg.output_dir / "stage2_log.csv", result.log, cfg, result.best_epoch)
    return result


# --------------------------------------------------------------------------
# prediction


def predict_studies(
    stage1_model: Stage1Model,
    stage2_model: Stage2Model,
    studies: Iterable[data.Study],
    windows=DEFAULT_WINDOWS,
    enforce_rules: bool = True,
    cfg: Optional[RunConfig] = None,
) -> list[StudyRecord]:
    if stage1_model.embed_dim != stage2_model.embed_dim:
        raise ContractError(
            f"stage-1 embedding width {stage1_model.embed_dim} != stage-2 input width {stage2_model.embed_dim}"
        )
    records = []
    for study in studies:
        if cfg is not None:
            windowed = load_windowed(study, cfg, require_cache=False)
        else:
            windowed = to_three_channel(study.volume.slices, windows or DEFAULT_WINDOWS)
        emb = extract_embedding(stage1_model, windowed)
        raw, att = predict_study(stage2_model, emb)
        final = enforce(raw) if enforce_rules else raw
        records.append(StudyRecord(study.study_id, final.study_probs, raw.study_probs,
                                   raw.image_probs, att.weights, att.bag))
    return records


def run_predict(cfg: RunConfig, split: Optional[str]) -> Path:
    stage1_model = load_stage1(cfg.output_dir / STAGE1_CKPT)
    stage2_model = load_stage2(cfg.output_dir / STAGE2_CKPT)
    studies = data.load_dataset(cfg.dataset_root, split=split)
    records = predict_studies(stage1_model, stage2_model, studies, cfg=cfg)
    path = cfg.output_dir / f"predictions_{split or 'all'}.jsonl"
    write_predictions(path, records, cfg)
    return path


def write_predictions(path: Path, records: Sequence[StudyRecord], cfg: Optional[RunConfig] = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            rec = {"study_id": r.study_id}
            rec.update({name: float(v) for name, v in zip(STUDY_LABELS, r.study_probs)})
            rec["raw"] = {name: float(v) for name, v in zip(STUDY_LABELS, r.raw_study_probs)}
            rec["image_probs"] = [float(v) for v in r.image_probs]
            rec["attention"] = [float(v) for v in r.attention]
            if r.bag is not None:
                rec["bag"] = [float(v) for v in r.bag]
            if cfg is not None:
                rec["config_hash"] = cfg.hash
                rec["seed"] = cfg.seed
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path) -> list[StudyRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"predictions file {path}", "predict")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            probs = np.array([rec[name] for name in STUDY_LABELS], dtype=np.float64)
            raw = rec.get("raw")
            raw = probs if raw is None else np.array([raw[name] for name in STUDY_LABELS], dtype=np.float64)
            bag = rec.get("bag")
            records.append(StudyRecord(
                rec["study_id"], probs, raw, np.asarray(rec["image_probs"], dtype=np.float64),
                np.asarray(rec.get("attention", []), dtype=np.float64),
                None if bag is None else np.asarray(bag, dtype=np.float64),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed prediction record ({exc})") from None
    return records


def check_consistency(records: Sequence[StudyRecord], raw: bool = False) -> list[tuple[str, str, str]]:
    out = []
    for r in records:
        report = validate(PredictionSet(r.image_probs, r.raw_study_probs if raw else r.study_probs))
        out.extend((r.study_id, v.rule_id, v.description) for v in report.violations)
    return out


# --------------------------------------------------------------------------
# evaluation artifacts


def run_evaluate(cfg: RunConfig, split: Optional[str], predictions: Optional[Path] = None,
                 cams: int = 4, embed_method: str = "tsne") -> MetricsReport:
    predictions = predictions or cfg.output_dir / f"predictions_{split or 'all'}.jsonl"
    records = read_predictions(predictions)
    studies = {s.study_id: s for s in data.load_dataset(cfg.dataset_root, split=split)}
    labels = {sid: (studies[sid].labels if sid in studies else None) for sid in (r.study_id for r in records)}
    report = evaluate_predictions(records, labels)

    out = cfg.output_dir / f"eval_{split or 'all'}"
    out.mkdir(parents=True, exist_ok=True)
    header = f"# config_hash={cfg.hash} seed={cfg.seed} consistency_violations={report.violations}\n"
    (cfg.output_dir / f"metrics_{split or 'all'}.csv").write_text(header + report.to_csv())
    for name, roc in report.rocs.items():
        with open(out / f"roc_{name}.csv", "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])

    bags = [r for r in records if r.bag is not None]
    if len(bags) >= 2:
        coords = embed_bags_2d(np.stack([r.bag for r in bags]), seed=cfg.seed, method=embed_method)
        with open(out / f"bags_2d_{embed_method}.csv", "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh)
            w.writerow(["study_id", "x", "y", "pe_present"] + list(STUDY_LABELS))
            for r, (x, y) in zip(bags, coords):
                lab = labels[r.study_id]
                w.writerow([r.study_id, repr(float(x)), repr(float(y)), int(lab.pe_present)]
                           + [lab.study[n] for n in STUDY_LABELS])

    if cams > 0 and (cfg.output_dir / STAGE1_CKPT).is_file():
        export_cams(load_stage1(cfg.output_dir / STAGE1_CKPT), list(studies.values()), cfg, out, cams)
    return report


def export_cams(model: Stage1Model, studies: Sequence[data.Study], cfg: RunConfig, out: Path, limit: int) -> list[Path]:
    """PNG side-by-side of the PE-window slice and its CAM overlay for the first positive slices."""
    from PIL import Image

    paths = []
    for study in studies:
        if study.labels is None or not study.labels.pe_present:
            continue
        windowed = load_windowed(study, cfg, require_cache=False)
        for k in np.flatnonzero(study.labels.image_pe)[:1]:
            cam = compute_cam(model, windowed[k])
            pe = to_uint8(windowed[k, 1])
            heat = to_uint8(cam.overlay)
            rgb = np.stack([np.maximum(pe, heat), pe, pe], axis=-1)
            panel = np.concatenate([np.stack([pe] * 3, axis=-1), rgb], axis=1)
            path = out / f"cam_{study.study_id}_{k:03d}.png"
            Image.fromarray(panel).save(path)
            paths.append(path)
        if len(paths) >= limit:
            break
    return paths


def run_make_synthetic(cfg: RunConfig) -> list[Path]:
    root = cfg.dataset_root
    if root.exists() and any(root.iterdir()):
        raise DataError(f"dataset root {root} is not empty")
    return data.make_synthetic_dataset(
        root, cfg.synthetic_studies, cfg.seed, cfg.split_fractions,
        slice_range=(cfg.synthetic_min_slices, cfg.synthetic_max_slices),
        size=cfg.synthetic_size, pe_fraction=cfg.synthetic_pe_fraction,
    )
