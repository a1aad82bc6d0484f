"""HU windowing: single-channel CT slices to 3-channel (lung, PE, mediastinal) images.

Inputs must be raw Hounsfield units. Re-windowing an already windowed image is
not detected and gives meaningless output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ctpa_pe.errors import SpecError


@dataclass(frozen=True)
class WindowSpec:
    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise SpecError(f"window width must be > 0, got {self.width}")

    @property
    def lower(self) -> float:
        return self.level - self.width / 2.0

    @property
    def upper(self) -> float:
        return self.level + self.width / 2.0


LUNG_WINDOW = WindowSpec(level=-600.0, width=1500.0)
PE_WINDOW = WindowSpec(level=100.0, width=700.0)
MEDIASTINAL_WINDOW = WindowSpec(level=40.0, width=400.0)

# Channel order is fixed: lung, PE, mediastinal.
DEFAULT_WINDOWS = (LUNG_WINDOW, PE_WINDOW, MEDIASTINAL_WINDOW)
CHANNEL_NAMES = ("lung", "pe", "mediastinal")


def apply_window(hu, spec: WindowSpec) -> np.ndarray:
    """Linear window mapping clamped to [0, 1].

    ``(hu - (level - width/2)) / width``, so the window center maps to 0.5.
    """
    if not spec.width > 0:
        raise SpecError(f"window width must be > 0, got {spec.width}")
    hu = np.asarray(hu, dtype=np.float64)
    out = (hu - spec.lower) / spec.width
    return np.clip(out, 0.0, 1.0)


def to_three_channel(hu_slice, windows=DEFAULT_WINDOWS, dtype=np.float32) -> np.ndarray:
    """Stack the three windows of one slice (or a stack of slices) along a channel axis.

    A 2-D slice ``(H, W)`` yields ``(3, H, W)``; a volume ``(n, H, W)`` yields
    ``(n, 3, H, W)``.
    """
    hu_slice = np.asarray(hu_slice)
    if len(windows) != 3:
        raise SpecError(f"expected 3 windows, got {len(windows)}")
    axis = 0 if hu_slice.ndim == 2 else 1
    return np.stack([apply_window(hu_slice, w) for w in windows], axis=axis).astype(dtype)


def standardize(windowed: np.ndarray) -> np.ndarray:
    """Per-channel zero-mean / unit-variance over a study (``input_standardize`` toggle)."""
    axes = (0, 2, 3) if windowed.ndim == 4 else (1, 2)
    shape = (1, -1, 1, 1) if windowed.ndim == 4 else (-1, 1, 1)
    mean = windowed.mean(axis=axes).reshape(shape)
    std = windowed.std(axis=axes).reshape(shape)
    return ((windowed - mean) / np.maximum(std, 1e-6)).astype(windowed.dtype)


def to_uint8(windowed: np.ndarray) -> np.ndarray:
    """8-bit export for visual inspection only."""
    return np.round(np.clip(windowed, 0.0, 1.0) * 255.0).astype(np.uint8)
