"""Label-consistency rules for study predictions: validation and minimal repair.

A label counts as predicted only when its probability is strictly above 0.5.
The branch is chosen by the image predictions: if any slice is predicted PE
positive the positive-study rules apply, otherwise the negative-study rules.
Image probabilities are never modified.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ctpa_pe.labels import CHRONICITY, INDEX, LATERALITY, NO_PE, RVLV, STUDY_LABELS

THRESHOLD = 0.5
DELTA = 1e-3

POSITIVE_STUDY_LABELS = ("rightsided", "leftsided", "rvlv_lt_1", "rvlv_gte_1", "central")


@dataclass
class PredictionSet:
    image_probs: np.ndarray
    study_probs: np.ndarray  # length 9, STUDY_LABELS order

    def __post_init__(self):
        self.image_probs = np.asarray(self.image_probs, dtype=np.float64).reshape(-1)
        if isinstance(self.study_probs, dict):
            self.study_probs = [self.study_probs[name] for name in STUDY_LABELS]
        self.study_probs = np.asarray(self.study_probs, dtype=np.float64).reshape(-1)
        if self.study_probs.shape != (len(STUDY_LABELS),):
            raise ValueError(f"expected {len(STUDY_LABELS)} study probabilities, got {self.study_probs.shape}")

    def __getitem__(self, name: str) -> float:
        return float(self.study_probs[INDEX[name]])

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(STUDY_LABELS, self.study_probs)}

    def copy(self) -> "PredictionSet":
        return PredictionSet(self.image_probs.copy(), self.study_probs.copy())

    @property
    def pe_positive(self) -> bool:
        return bool(self.image_probs.size and self.image_probs.max() > THRESHOLD)


@dataclass(frozen=True)
class Violation:
    rule_id: str
    description: str
    values: dict


@dataclass
class ConsistencyReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def is_consistent(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class Rule:
    id: str
    description: str
    labels: tuple[str, ...]
    check: Callable[[PredictionSet], bool]  # True when satisfied
    repair: Callable[[PredictionSet], None]


def _predicted(preds: PredictionSet, names) -> list[str]:
    return [n for n in names if preds[n] > THRESHOLD]


def _argmax(preds: PredictionSet, names) -> str:
    # max() keeps the first maximal element, i.e. ties go to label order
    return max(names, key=lambda n: preds[n])


def _set(preds: PredictionSet, name: str, value: float) -> None:
    preds.study_probs[INDEX[name]] = value


def _raise_argmax(preds, names):
    if not _predicted(preds, names):
        _set(preds, _argmax(preds, names), THRESHOLD + DELTA)


def _keep_max_only(preds, names):
    keep = _argmax(preds, names)
    for n in _predicted(preds, names):
        if n != keep:
            _set(preds, n, THRESHOLD - DELTA)


def _exactly_one(preds, names):
    _raise_argmax(preds, names)
    _keep_max_only(preds, names)


def _cap_all(preds, names):
    for n in _predicted(preds, names):
        _set(preds, n, THRESHOLD - DELTA)


def _rule_r4_check(p: PredictionSet) -> bool:
    k = len(_predicted(p, NO_PE))
    return k == 0 if p.pe_positive else k == 1


def _rule_r4_repair(p: PredictionSet) -> None:
    if p.pe_positive:
        _cap_all(p, NO_PE)
    else:
        _exactly_one(p, NO_PE)


DEFAULT_RULES: tuple[Rule, ...] = (
    Rule(
        "R1",
        "PE-positive study: at least one of leftsided/rightsided/central must be predicted",
        LATERALITY,
        lambda p: not p.pe_positive or bool(_predicted(p, LATERALITY)),
        lambda p: _raise_argmax(p, LATERALITY),
    ),
    Rule(
        "R2",
        "PE-positive study: exactly one of rvlv_gte_1/rvlv_lt_1 must be predicted",
        RVLV,
        lambda p: not p.pe_positive or len(_predicted(p, RVLV)) == 1,
        lambda p: _exactly_one(p, RVLV),
    ),
    Rule(
        "R3",
        "PE-positive study: chronic and acute_and_chronic cannot both be predicted",
        CHRONICITY,
        lambda p: not p.pe_positive or len(_predicted(p, CHRONICITY)) <= 1,
        lambda p: _keep_max_only(p, CHRONICITY),
    ),
    Rule(
        "R4",
        "exactly one of negative_for_pe/indeterminate must be predicted when no image is "
        "PE positive; neither may be predicted otherwise",
        NO_PE,
        _rule_r4_check,
        _rule_r4_repair,
    ),
    Rule(
        "R5",
        "no PE-positive image: laterality and RV/LV labels must not be predicted",
        POSITIVE_STUDY_LABELS,
        lambda p: p.pe_positive or not _predicted(p, POSITIVE_STUDY_LABELS),
        lambda p: _cap_all(p, POSITIVE_STUDY_LABELS),
    ),
)


def validate(preds: PredictionSet, rules=DEFAULT_RULES) -> ConsistencyReport:
    report = ConsistencyReport()
    for rule in rules:
        if not rule.check(preds):
            values = {n: preds[n] for n in rule.labels}
            values["max_image_prob"] = float(preds.image_probs.max()) if preds.image_probs.size else None
            report.violations.append(Violation(rule.id, rule.description, values))
    return report


def enforce(preds: PredictionSet, rules=DEFAULT_RULES) -> PredictionSet:
    """Return a copy repaired so that ``validate`` passes.

    Only labels of violated rules are touched: a missing "at least one" label is
    raised to 0.5 + DELTA at the argmax, extra "at most one" labels are lowered
    to 0.5 - DELTA keeping the max, and forbidden labels are capped at 0.5 - DELTA.
    """
    out = preds.copy()
    for rule in rules:
        if not rule.check(out):
            rule.repair(out)
    return out


def labels_to_prediction(image_pe, study_labels: dict[str, int]) -> PredictionSet:
    """Interpret a 0/1 ground-truth block as probabilities."""
    return PredictionSet(np.asarray(image_pe, dtype=np.float64), study_labels)
