"""Two-stage attention CNN-LSTM classifier for pulmonary embolism on CTPA studies."""

from ctpa_pe.labels import IMAGE_LABEL, STUDY_LABELS

__version__ = "0.1.0"

__all__ = ["IMAGE_LABEL", "STUDY_LABELS", "__version__"]
