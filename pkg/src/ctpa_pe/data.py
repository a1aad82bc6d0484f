"""Study storage format, loading, synthetic CTPA studies, and dataset splits.

Layout of a dataset root::

    root/<study_id>/manifest.txt   key=value lines
    root/<study_id>/volume.i16     n*H*W little-endian int16, slice-major, row-major
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ctpa_pe.errors import DataError, FormatError, SpecError
from ctpa_pe.labels import STUDY_LABELS

logger = logging.getLogger(__name__)

HU_MIN, HU_MAX = -1024, 3071
MANIFEST = "manifest.txt"
VOLUME = "volume.i16"
SPLITS = ("train", "val", "test")


@dataclass
class HUVolume:
    study_id: str
    slices: np.ndarray  # (n, H, W) int16
    z_positions: np.ndarray  # (n,) float64, ascending
    pixel_spacing: tuple[float, float] = (1.0, 1.0)

    @property
    def n(self) -> int:
        return int(self.slices.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.slices.shape[1]), int(self.slices.shape[2])

    def check(self) -> None:
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise DataError(f"{self.study_id}: expected (n>=1, H, W) slices, got {self.slices.shape}")
        if self.z_positions.shape != (self.n,):
            raise DataError(f"{self.study_id}: {self.z_positions.size} z positions for {self.n} slices")
        if self.n > 1 and not np.all(np.diff(self.z_positions) > 0):
            raise DataError(f"{self.study_id}: z positions not strictly ascending")
        bad = np.flatnonzero((self.slices < HU_MIN).any(axis=(1, 2)) | (self.slices > HU_MAX).any(axis=(1, 2)))
        if bad.size:
            raise DataError(f"{self.study_id}: HU outside [{HU_MIN}, {HU_MAX}] at slice {int(bad[0])}")


@dataclass
class StudyLabels:
    image_pe: np.ndarray  # (n,) of {0,1}
    study: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.image_pe = np.asarray(self.image_pe, dtype=np.int64).reshape(-1)
        missing = [n for n in STUDY_LABELS if n not in self.study]
        if missing:
            raise DataError(f"missing study labels {missing}")
        self.study = {n: int(self.study[n]) for n in STUDY_LABELS}

    def study_vector(self) -> np.ndarray:
        return np.array([self.study[n] for n in STUDY_LABELS], dtype=np.float64)

    @property
    def pe_present(self) -> bool:
        return bool(self.image_pe.any())


@dataclass
class Study:
    volume: HUVolume
    labels: Optional[StudyLabels]
    split: Optional[str] = None
    path: Optional[Path] = None
    # synthetic only: slice index -> [(y0, x0, y1, x1)] inclusive pixel boxes of planted clots
    clot_boxes: Optional[dict[int, list[tuple[int, int, int, int]]]] = None

    @property
    def study_id(self) -> str:
        return self.volume.study_id


# --------------------------------------------------------------------------
# on-disk format


def _read_manifest(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise FormatError(f"missing manifest {path}")
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _floats(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split(",") if t.strip()], dtype=np.float64)


def load_study(path, require_labels: bool = False) -> Study:
    """Load one study directory; slices (and image labels) come back sorted by z."""
    path = Path(path)
    m = _read_manifest(path / MANIFEST)
    try:
        n, h, w = int(m["n"]), int(m["height"]), int(m["width"])
        spacing = (float(m["pixel_spacing_x"]), float(m["pixel_spacing_y"]))
        z = _floats(m["z_positions"])
    except KeyError as exc:
        raise FormatError(f"{path / MANIFEST}: missing key {exc}") from None
    except ValueError as exc:
        raise FormatError(f"{path / MANIFEST}: {exc}") from None
    if n < 1 or z.size != n:
        raise FormatError(f"{path / MANIFEST}: n={n} but {z.size} z positions")

    vol_path = path / VOLUME
    if not vol_path.is_file():
        raise FormatError(f"missing volume payload {vol_path}")
    raw = np.fromfile(vol_path, dtype="<i2")
    if raw.size != n * h * w:
        raise FormatError(f"{vol_path}: {raw.size} values, expected {n}*{h}*{w}")
    slices = raw.reshape(n, h, w).astype(np.int16)

    order = np.argsort(z, kind="stable")
    zs = z[order]
    if n > 1 and not np.all(np.diff(zs) > 0):
        raise DataError(f"{path.name}: duplicate z positions")
    bad = np.flatnonzero((slices < HU_MIN).any(axis=(1, 2)) | (slices > HU_MAX).any(axis=(1, 2)))
    if bad.size:
        raise DataError(f"{path.name}: HU outside [{HU_MIN}, {HU_MAX}] at slice {int(bad[0])}")

    volume = HUVolume(path.name, slices[order], zs, spacing)
    labels = None
    if all(name in m for name in STUDY_LABELS):
        image_pe = _floats(m.get("image_pe", "")).astype(np.int64)
        if image_pe.size != n:
            raise FormatError(f"{path / MANIFEST}: image_pe has {image_pe.size} entries for {n} slices")
        labels = StudyLabels(image_pe[order], {name: int(m[name]) for name in STUDY_LABELS})
    elif require_labels:
        raise FormatError(f"{path / MANIFEST}: study labels missing")
    split = m.get("split")
    if split is not None and split not in SPLITS:
        raise FormatError(f"{path / MANIFEST}: unknown split {split!r}")
    boxes = None
    if "clot_boxes" in m:
        rank = {int(old): new for new, old in enumerate(order)}
        boxes = {}
        for item in filter(None, m["clot_boxes"].split(";")):
            k, *box = (int(v) for v in item.split(":"))
            boxes.setdefault(rank[k], []).append(tuple(box))
    return Study(volume, labels, split, path, boxes)


def save_study(study: Study, root) -> Path:
    """Write ``root/<study_id>/{manifest.txt,volume.i16}``; returns the study directory."""
    vol = study.volume
    vol.check()
    out = Path(root) / vol.study_id
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"n={vol.n}",
        f"height={vol.shape[0]}",
        f"width={vol.shape[1]}",
        f"pixel_spacing_x={vol.pixel_spacing[0]!r}",
        f"pixel_spacing_y={vol.pixel_spacing[1]!r}",
        "z_positions=" + ",".join(repr(float(v)) for v in vol.z_positions),
    ]
    if study.labels is not None:
        lines += [f"{name}={study.labels.study[name]}" for name in STUDY_LABELS]
        lines.append("image_pe=" + ",".join(str(int(v)) for v in study.labels.image_pe))
    if study.split is not None:
        lines.append(f"split={study.split}")
    if study.clot_boxes:
        lines.append("clot_boxes=" + ";".join(
            ":".join(str(v) for v in (k, *box)) for k in sorted(study.clot_boxes) for box in study.clot_boxes[k]
        ))
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    vol.slices.astype("<i2").tofile(out / VOLUME)
    return out


def list_studies(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dataset root {root} does not exist")
    return sorted(p for p in root.iterdir() if (p / MANIFEST).is_file())


def load_dataset(root, split: Optional[str] = None, require_labels: bool = False) -> list[Study]:
    studies = [load_study(p, require_labels=require_labels) for p in list_studies(root)]
    if split is not None:
        studies = [s for s in studies if s.split == split]
    return studies


def set_split(study_dir, split: str) -> None:
    """Rewrite the ``split`` line of a study manifest in place."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    path = Path(study_dir) / MANIFEST
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if not l.startswith("split=")]
    lines.append(f"split={split}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# splits


def split_dataset(ids: Sequence[str], fractions: Sequence[float], seed: int) -> dict[str, list[str]]:
    """Random partition into train/val/test.

    Val and test sizes are ``floor(fraction * N)``; train takes the remainder
    (so 7279 studies at 0.8/0.2 give 5824/1455).
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate study ids")
    n_parts = sum(f > 0 for f in fractions)
    if len(ids) < n_parts:
        raise ValueError(f"{len(ids)} studies cannot fill {n_parts} partitions")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_val = math.floor(fractions[1] * len(ids) + 1e-9)
    n_test = math.floor(fractions[2] * len(ids) + 1e-9)
    n_train = len(ids) - n_val - n_test
    return {
        "train": sorted(perm[:n_train]),
        "val": sorted(perm[n_train:n_train + n_val]),
        "test": sorted(perm[n_train + n_val:]),
    }


# --------------------------------------------------------------------------
# synthetic studies


@dataclass
class SyntheticSpec:
    n_slices: int = 24
    height: int = 64
    width: int = 64
    pe_present: bool = False
    laterality: tuple[str, ...] = ()  # subset of leftsided/rightsided/central
    rvlv_gte_1: bool = False
    chronicity: str = "acute"  # acute | chronic | acute_and_chronic
    indeterminate: bool = False
    clot_hu: tuple[float, float] = (50.0, 200.0)
    vessel_hu: tuple[float, float] = (300.0, 500.0)
    clot_slices: Optional[int] = None  # run length per clot; None draws from clot_run_range
    clot_run_range: tuple[int, int] = (2, 4)
    clot_scale: float = 0.75  # clot radius relative to vessel radius
    noise_hu: float = 20.0
    slice_thickness: float = 2.5
    pixel_spacing: float = 0.7

    def validate(self) -> None:
        if self.n_slices < 1 or self.height < 16 or self.width < 16:
            raise SpecError("need n_slices >= 1 and height, width >= 16")
        if self.pe_present:
            if (self.clot_slices is not None and self.clot_slices < 1) or not 1 <= self.clot_run_range[0] <= self.clot_run_range[1]:
                raise SpecError("PE present but zero clot slices")
            if not self.laterality:
                raise SpecError("PE present needs at least one laterality")
            if self.indeterminate:
                raise SpecError("indeterminate studies cannot have PE")
        bad = set(self.laterality) - {"leftsided", "rightsided", "central"}
        if bad:
            raise SpecError(f"unknown laterality {sorted(bad)}")
        if self.chronicity not in ("acute", "chronic", "acute_and_chronic"):
            raise SpecError(f"unknown chronicity {self.chronicity!r}")
        if not self.clot_hu[0] <= self.clot_hu[1] or not self.vessel_hu[0] <= self.vessel_hu[1]:
            raise SpecError("HU ranges must be (low, high)")


def _vessel_track(name: str, t: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Vessel centerline (y, x in [-1, 1]) along normalized depth ``t``.

    Patient right is on the image left (radiological convention).
    """
    wobble = rng.uniform(-0.04, 0.04, size=2)
    if name == "central":
        y = -0.15 + 0.05 * t + wobble[0]
        x = 0.0 + wobble[1] + 0.03 * np.sin(2 * np.pi * t)
        return y, x, 0.2
    side = -1.0 if name == "rightsided" else 1.0
    y = -0.1 + 0.25 * t + wobble[0]
    x = side * (0.42 - 0.06 * t) + wobble[1]
    return y, x, 0.16


def generate_synthetic_study(seed: int, spec: SyntheticSpec, study_id: Optional[str] = None) -> Study:
    """Deterministic synthetic CTPA study with optional planted emboli.

    Each slice has air, a soft-tissue body, two lungs, contrast-filled pulmonary
    arteries (central trunk plus one per lung), a few small distractor vessels,
    and in lower slices a heart whose RV/LV size ratio follows the label. Each
    embolus is an ellipsoid of filling-defect HU inside a vessel over a
    contiguous slice run.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n, h, w = spec.n_slices, spec.height, spec.width
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    t = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)

    body_a, body_b = rng.uniform(0.85, 0.95), rng.uniform(0.7, 0.8)
    tissue_hu = rng.uniform(30, 60)
    lung_hu = rng.uniform(-880, -820)
    vessel_hu = rng.uniform(*spec.vessel_hu)
    heart_start = rng.uniform(0.55, 0.7)
    rv_scale = rng.uniform(1.1, 1.35) if spec.rvlv_gte_1 else rng.uniform(0.65, 0.9)

    tracks = {name: _vessel_track(name, t, rng) for name in ("central", "rightsided", "leftsided")}
    distractors = [(rng.uniform(-0.35, 0.35), rng.choice([-1, 1]) * rng.uniform(0.25, 0.6),
                    rng.uniform(0.04, 0.07), rng.uniform(0, 1)) for _ in range(4)]

    vol = np.empty((n, h, w), dtype=np.float64)
    for k in range(n):
        img = np.full((h, w), -1000.0)
        body = (yy / body_b) ** 2 + (xx / body_a) ** 2 <= 1.0
        img[body] = tissue_hu
        for side in (-1.0, 1.0):
            lung = ((yy + 0.05) / 0.55) ** 2 + ((xx - side * 0.45) / 0.33) ** 2 <= 1.0
            img[lung] = lung_hu
        for name, (ty, tx, radius) in tracks.items():
            if name == "central" and t[k] > 0.6:
                continue
            img[(yy - ty[k]) ** 2 + (xx - tx[k]) ** 2 <= radius ** 2] = vessel_hu
        for dy, dx, dr, phase in distractors:
            cy = dy + 0.1 * np.sin(2 * np.pi * (t[k] + phase))
            img[(yy - cy) ** 2 + (xx - dx) ** 2 <= dr ** 2] = vessel_hu
        if t[k] >= heart_start:
            lv = ((yy - 0.35) / 0.18) ** 2 + ((xx - 0.15) / 0.18) ** 2 <= 1.0
            rv = ((yy - 0.35) / (0.18 * rv_scale)) ** 2 + ((xx + 0.15) / (0.16 * rv_scale)) ** 2 <= 1.0
            img[lv | rv] = vessel_hu - 50.0
        vol[k] = img

    image_pe = np.zeros(n, dtype=np.int64)
    boxes: dict[int, list[tuple[int, int, int, int]]] = {}
    if spec.pe_present:
        lo_hu, hi_hu = spec.clot_hu
        if spec.chronicity == "chronic":
            hi_hu = lo_hu + 0.5 * (hi_hu - lo_hu)
        for name in spec.laterality:
            ty, tx, radius = tracks[name]
            run = spec.clot_slices or int(rng.integers(spec.clot_run_range[0], spec.clot_run_range[1] + 1))
            run = min(run, n)
            usable = n if name != "central" else max(1, int(np.sum(t <= 0.6)))
            run = min(run, usable)
            start = int(rng.integers(0, usable - run + 1))
            clot_hu = rng.uniform(lo_hu, hi_hu)
            r_max = spec.clot_scale * radius
            for j, k in enumerate(range(start, start + run)):
                frac = (j + 0.5) / run - 0.5
                r = r_max * math.sqrt(max(1.0 - (2 * frac) ** 2, 0.25))
                oy = rng.uniform(-0.25, 0.25) * (radius - r)
                ox = rng.uniform(-0.25, 0.25) * (radius - r)
                clot = ((yy - ty[k] - oy) / r) ** 2 + ((xx - tx[k] - ox) / (0.8 * r)) ** 2 <= 1.0
                vol[k][clot] = clot_hu
                image_pe[k] = 1
                rows, cols = np.nonzero(clot)
                if rows.size:
                    boxes.setdefault(k, []).append((int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())))

    vol += rng.normal(0.0, spec.noise_hu, size=vol.shape)
    slices = np.clip(np.round(vol), HU_MIN, HU_MAX).astype(np.int16)

    study = {name: 0 for name in STUDY_LABELS}
    if spec.pe_present:
        for name in spec.laterality:
            study[name] = 1
        study["rvlv_gte_1" if spec.rvlv_gte_1 else "rvlv_lt_1"] = 1
        if spec.chronicity != "acute":
            study[spec.chronicity] = 1
    elif spec.indeterminate:
        study["indeterminate"] = 1
    else:
        study["negative_for_pe"] = 1

    z0 = rng.uniform(-200.0, -100.0)
    volume = HUVolume(
        study_id or f"syn{seed:06d}",
        slices,
        z0 + spec.slice_thickness * np.arange(n, dtype=np.float64),
        (spec.pixel_spacing, spec.pixel_spacing),
    )
    return Study(volume, StudyLabels(image_pe, study), clot_boxes=boxes or None)


def random_synthetic_specs(
    n_studies: int,
    seed: int,
    slice_range: tuple[int, int] = (16, 32),
    size: int = 64,
    pe_fraction: float = 0.5,
    **overrides,
) -> list[SyntheticSpec]:
    """Draw a mixed cohort of synthetic specs (balanced PE/no-PE by default)."""
    rng = np.random.default_rng(seed)
    specs = []
    n_pos = int(round(pe_fraction * n_studies))
    flags = np.array([True] * n_pos + [False] * (n_studies - n_pos))
    rng.shuffle(flags)
    for pe in flags:
        n = int(rng.integers(slice_range[0], slice_range[1] + 1))
        lat: tuple[str, ...] = ()
        chron = "acute"
        if pe:
            choice = rng.random()
            if choice < 0.3:
                lat = ("leftsided",)
            elif choice < 0.6:
                lat = ("rightsided",)
            elif choice < 0.75:
                lat = ("leftsided", "rightsided")
            else:
                lat = ("central",) + (("leftsided", "rightsided")[int(rng.integers(0, 2))],)
            c = rng.random()
            chron = "chronic" if c < 0.1 else "acute_and_chronic" if c < 0.15 else "acute"
        specs.append(SyntheticSpec(
            n_slices=n, height=size, width=size, pe_present=bool(pe), laterality=lat,
            rvlv_gte_1=bool(pe and rng.random() < 0.4), chronicity=chron, **overrides,
        ))
    return specs


def make_synthetic_dataset(
    root,
    n_studies: int,
    seed: int,
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    **spec_kwargs,
) -> list[Path]:
    """Generate and save a split synthetic cohort under ``root``."""
    specs = random_synthetic_specs(n_studies, seed, **spec_kwargs)
    ids = [f"syn{seed:04d}_{i:04d}" for i in range(n_studies)]
    parts = split_dataset(ids, fractions, seed)
    split_of = {sid: name for name, members in parts.items() for sid in members}
    paths = []
    for i, (sid, spec) in enumerate(zip(ids, specs)):
        study = generate_synthetic_study(seed * 100003 + i, spec, study_id=sid)
        study.split = split_of[sid]
        paths.append(save_study(study, root))
    logger.info("wrote %d synthetic studies to %s", n_studies, root)
    return paths


def iter_labelled(studies: Iterable[Study]) -> Iterable[Study]:
    for s in studies:
        if s.labels is None:
            raise DataError(f"study {s.study_id} has no labels")
        yield s
