"""Plain-text ``key=value`` run configuration."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from ctpa_pe.errors import ConfigError
from ctpa_pe.labels import STUDY_LABELS
from ctpa_pe.loss import LabelWeights
from ctpa_pe.stage1 import Stage1Settings
from ctpa_pe.stage2 import Stage2Settings
from ctpa_pe.windowing import WindowSpec

_WINDOW_KEYS = ("window.lung", "window.pe", "window.mediastinal")


@dataclass(frozen=True)
class RunConfig:
    dataset_root: Path
    output_dir: Path
    seed: int
    deterministic: bool
    windows: tuple[WindowSpec, WindowSpec, WindowSpec]
    input_standardize: bool
    split_fractions: tuple[float, float, float]
    backbone: str
    embed_dim: int
    stage1_lr: float
    stage1_weight_decay: float
    stage1_epochs: int
    stage1_lr_schedule: str
    max_slices_per_batch: int
    lstm_hidden: int
    seq_dim: int
    attn_dim: int
    pooling: str
    dropout: float
    stage2_lr: float
    stage2_weight_decay: float
    stage2_epochs: int
    synthetic_studies: int
    synthetic_min_slices: int
    synthetic_max_slices: int
    synthetic_size: int
    synthetic_pe_fraction: float
    weights: LabelWeights = field(compare=False)
    source: Optional[Path] = field(default=None, compare=False)

    # ------------------------------------------------------------------
    @classmethod
    def from_entries(cls, entries: dict[str, str], base_dir: Path | None = None, source=None) -> "RunConfig":
        merged = dict(_default_entries())
        unknown = sorted(set(entries) - set(merged))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(entries)
        base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

        def path(key):
            p = Path(merged[key])
            return p if p.is_absolute() else (base_dir / p).resolve()

        try:
            windows = tuple(WindowSpec(*_floats(merged[k], 2, k)) for k in _WINDOW_KEYS)
            fractions = _floats(merged["split_fractions"], 3, "split_fractions")
            weights = LabelWeights(
                {name: float(merged[f"study_weight.{name}"]) for name in STUDY_LABELS},
                float(merged["image_weight"]),
            )
            cfg = cls(
                dataset_root=path("dataset_root"),
                output_dir=path("output_dir"),
                seed=int(merged["seed"]),
                deterministic=_bool(merged["deterministic"]),
                windows=windows,
                input_standardize=_bool(merged["input_standardize"]),
                split_fractions=fractions,
                backbone=merged["backbone"],
                embed_dim=int(merged["embed_dim"]),
                stage1_lr=float(merged["stage1_lr"]),
                stage1_weight_decay=float(merged["stage1_weight_decay"]),
                stage1_epochs=int(merged["stage1_epochs"]),
                stage1_lr_schedule=merged["stage1_lr_schedule"],
                max_slices_per_batch=int(merged["max_slices_per_batch"]),
                lstm_hidden=int(merged["lstm_hidden"]),
                seq_dim=int(merged["seq_dim"]),
                attn_dim=int(merged["attn_dim"]),
                pooling=merged["pooling"],
                dropout=float(merged["dropout"]),
                stage2_lr=float(merged["stage2_lr"]),
                stage2_weight_decay=float(merged["stage2_weight_decay"]),
                stage2_epochs=int(merged["stage2_epochs"]),
                synthetic_studies=int(merged["synthetic.studies"]),
                synthetic_min_slices=int(merged["synthetic.min_slices"]),
                synthetic_max_slices=int(merged["synthetic.max_slices"]),
                synthetic_size=int(merged["synthetic.size"]),
                synthetic_pe_fraction=float(merged["synthetic.pe_fraction"]),
                weights=weights,
                source=source,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        if cfg.pooling not in ("attention", "mean"):
            raise ConfigError(f"pooling must be attention or mean, got {cfg.pooling!r}")
        return cfg

    @classmethod
    def load(cls, path=None, **overrides) -> "RunConfig":
        entries = {}
        base = None
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file {path} not found")
            entries = parse_entries(path.read_text(encoding="utf-8"), str(path))
            base = path.parent
        entries.update({k: str(v) for k, v in overrides.items()})
        return cls.from_entries(entries, base, source=path)

    def with_overrides(self, **entries) -> "RunConfig":
        merged = self.to_entries()
        merged.update({k: str(v) for k, v in entries.items()})
        return RunConfig.from_entries(merged, source=self.source)

    # ------------------------------------------------------------------
    def to_entries(self) -> dict[str, str]:
        e = {
            "dataset_root": str(self.dataset_root),
            "output_dir": str(self.output_dir),
            "seed": str(self.seed),
            "deterministic": str(int(self.deterministic)),
            "input_standardize": str(int(self.input_standardize)),
            "split_fractions": ",".join(repr(f) for f in self.split_fractions),
        }
        for key, w in zip(_WINDOW_KEYS, self.windows):
            e[key] = f"{w.level!r},{w.width!r}"
        for f in fields(self):
            if f.name in ("dataset_root", "output_dir", "seed", "deterministic", "windows",
                          "input_standardize", "split_fractions", "weights", "source"):
                continue
            key = f.name.replace("synthetic_", "synthetic.", 1) if f.name.startswith("synthetic_") else f.name
            e[key] = str(getattr(self, f.name))
        for name in STUDY_LABELS:
            e[f"study_weight.{name}"] = repr(float(self.weights.study_weights[name]))
        e["image_weight"] = repr(float(self.weights.image_weight))
        return e

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(self.to_entries().items()))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def stage1_settings(self) -> Stage1Settings:
        return Stage1Settings(
            backbone=self.backbone, embed_dim=self.embed_dim, lr=self.stage1_lr,
            weight_decay=self.stage1_weight_decay, epochs=self.stage1_epochs,
            max_slices_per_batch=self.max_slices_per_batch, seed=self.seed, weights=self.weights,
            lr_schedule=self.stage1_lr_schedule,
        )

    def stage2_settings(self) -> Stage2Settings:
        return Stage2Settings(
            lstm_hidden=self.lstm_hidden, seq_dim=self.seq_dim, attn_dim=self.attn_dim,
            pooling=self.pooling, dropout=self.dropout, lr=self.stage2_lr,
            weight_decay=self.stage2_weight_decay, epochs=self.stage2_epochs,
            seed=self.seed, weights=self.weights,
        )


def parse_entries(text: str, origin: str = "<config>") -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _default_entries() -> dict[str, str]:
    text = resources.files("ctpa_pe").joinpath("default.cfg").read_text(encoding="utf-8")
    return parse_entries(text, "default.cfg")


def _floats(text: str, count: int, key: str) -> tuple[float, ...]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != count:
        raise ConfigError(f"{key}: expected {count} comma-separated numbers, got {text!r}")
    return tuple(parts)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")
