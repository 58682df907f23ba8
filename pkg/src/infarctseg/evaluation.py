"""Dice / Jaccard metrics, outlier rules and outlier-adjusted aggregates."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .errors import AggregationError, ConfigurationError, ShapeError

# Reported by the symmetry-enhanced attention network on the same dataset;
# carried as an external reference only, never computed here.
EXTERNAL_REFERENCE_DICE = 0.578

KNOWN_RULES = ("extracranial-band", "score-floor")


@dataclass(frozen=True)
class ConfusionCounts:
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int

    def __post_init__(self):
        if min(self.true_positive, self.false_positive, self.false_negative, self.true_negative) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.true_positive + self.false_positive + self.false_negative + self.true_negative

    @property
    def both_empty(self) -> bool:
        return self.true_positive + self.false_positive + self.false_negative == 0


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction extents {pred.shape} differ from ground truth {gt.shape}")
    return ConfusionCounts(*kernels.confusion_counts(pred, gt))


def dice(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    d = 2 * c.true_positive + c.false_positive + c.false_negative
    return 1.0 if d == 0 else 2 * c.true_positive / d


def iou(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty."""
    d = c.true_positive + c.false_positive + c.false_negative
    return 1.0 if d == 0 else c.true_positive / d


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float
    iou: float
    gt_voxels: int
    pred_voxels: int
    outlier_flags: frozenset = frozenset()
    both_empty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "outlier_flags", frozenset(self.outlier_flags))


def case_metrics(case_id: str, pred: np.ndarray, gt: np.ndarray) -> CaseMetrics:
    c = confusion(pred, gt)
    return CaseMetrics(
        case_id,
        dice(c),
        iou(c),
        gt_voxels=c.true_positive + c.false_negative,
        pred_voxels=c.true_positive + c.false_positive,
        both_empty=c.both_empty,
    )


def dice_iou_consistency(case: CaseMetrics, tol: float = 1e-12) -> bool:
    """Per-case identity IoU = D / (2 - D).  Does not hold for dataset means."""
    return abs(case.iou - case.dice / (2 - case.dice)) < tol


# --------------------------------------------------------------------------
# outliers


@dataclass(frozen=True)
class OutlierRuleConfig:
    """Named outlier rules.

    ``extracranial-band``: more than ``band_min_share`` of the predicted
    foreground lies in band slices (the first/last ``band_fraction`` of the
    stack) that contain no ground-truth foreground.
    ``score-floor``: case dice below ``score_floor``.
    """

    rules: tuple[str, ...] = ("extracranial-band",)
    band_fraction: float = 0.1
    band_min_share: float = 0.5
    score_floor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        unknown = [r for r in self.rules if r not in KNOWN_RULES]
        if unknown:
            raise ConfigurationError(f"unknown outlier rule(s) {unknown}; known: {list(KNOWN_RULES)}")
        if not 0 < self.band_fraction <= 0.5:
            raise ConfigurationError("band_fraction must be in (0, 0.5]")

    def to_json(self) -> dict:
        return {
            "rules": list(self.rules),
            "band_fraction": self.band_fraction,
            "band_min_share": self.band_min_share,
            "score_floor": self.score_floor,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "OutlierRuleConfig":
        return cls(**{**d, "rules": tuple(d.get("rules", ("extracranial-band",)))})


def band_slices(n_slices: int, fraction: float) -> np.ndarray:
    """Boolean per-slice flag for the top and bottom ``fraction`` of the stack (at least one each)."""
    k = max(1, int(np.floor(fraction * n_slices + 1e-9)))
    band = np.zeros(n_slices, dtype=bool)
    band[:k] = True
    band[n_slices - k :] = True
    return band


def extracranial_share(pred: np.ndarray, gt: np.ndarray, fraction: float = 0.1) -> float:
    """Share of predicted foreground in band slices that have no ground truth."""
    pred_per_slice = np.count_nonzero(pred.reshape(pred.shape[0], -1), axis=1)
    total = pred_per_slice.sum()
    if total == 0:
        return 0.0
    gt_empty = np.count_nonzero(gt.reshape(gt.shape[0], -1), axis=1) == 0
    qualifying = band_slices(pred.shape[0], fraction) & gt_empty
    return float(pred_per_slice[qualifying].sum() / total)


def flag_outliers(
    cases: Sequence[CaseMetrics],
    masks: Mapping[str, tuple[np.ndarray, np.ndarray]],
    config: OutlierRuleConfig = OutlierRuleConfig(),
) -> list[CaseMetrics]:
    """Return ``cases`` with ``outlier_flags`` set by the configured rules.

    ``masks`` maps case id to ``(pred, gt)`` 3-D arrays, only needed for the
    band rule.
    """
    out = []
    for case in cases:
        flags = set()
        if "extracranial-band" in config.rules:
            pred, gt = masks[case.case_id]
            if extracranial_share(np.asarray(pred), np.asarray(gt), config.band_fraction) > config.band_min_share:
                flags.add("extracranial-band")
        if "score-floor" in config.rules and case.dice < config.score_floor:
            flags.add("score-floor")
        out.append(replace(case, outlier_flags=frozenset(flags)))
    return out


# --------------------------------------------------------------------------
# aggregation


def exact_mean(values: Iterable[float]) -> float:
    """Correctly rounded arithmetic mean (independent of summation order)."""
    vals = [Fraction(v) for v in values]
    return float(sum(vals, Fraction(0)) / len(vals))


@dataclass(frozen=True)
class AggregateReport:
    n_cases: int
    mean_dice: float
    mean_iou: float
    dice_min: float
    dice_max: float
    adjusted_mean_dice: float
    adjusted_mean_iou: float
    excluded_case_ids: tuple[str, ...]
    outlier_rule_config: dict = field(default_factory=dict)
    both_empty_case_ids: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "dice_range": [self.dice_min, self.dice_max],
            "adjusted_mean_dice": self.adjusted_mean_dice,
            "adjusted_mean_iou": self.adjusted_mean_iou,
            "n_excluded": len(self.excluded_case_ids),
            "excluded_case_ids": list(self.excluded_case_ids),
            "outlier_rule_config": self.outlier_rule_config,
            "empty_case_convention": "dice = iou = 1 when prediction and ground truth are both empty",
            "both_empty_case_ids": list(self.both_empty_case_ids),
            "external_reference": {
                "dice": EXTERNAL_REFERENCE_DICE,
                "label": "symmetry-enhanced attention network, published value (external, not computed)",
            },
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "AggregateReport":
        return cls(
            n_cases=d["n_cases"],
            mean_dice=d["mean_dice"],
            mean_iou=d["mean_iou"],
            dice_min=d["dice_range"][0],
            dice_max=d["dice_range"][1],
            adjusted_mean_dice=d["adjusted_mean_dice"],
            adjusted_mean_iou=d["adjusted_mean_iou"],
            excluded_case_ids=tuple(d["excluded_case_ids"]),
            outlier_rule_config=d.get("outlier_rule_config", {}),
            both_empty_case_ids=tuple(d.get("both_empty_case_ids", ())),
        )


def aggregate(
    cases: Sequence[CaseMetrics],
    exclude_flagged: bool = True,
    rule_config: Optional[OutlierRuleConfig] = None,
) -> AggregateReport:
    if not cases:
        raise AggregationError("no cases to aggregate")
    excluded = tuple(c.case_id for c in cases if exclude_flagged and c.outlier_flags)
    kept = [c for c in cases if c.case_id not in set(excluded)]
    if not kept:
        raise AggregationError("every case was excluded as an outlier")
    dices = [c.dice for c in cases]
    return AggregateReport(
        n_cases=len(cases),
        mean_dice=exact_mean(dices),
        mean_iou=exact_mean(c.iou for c in cases),
        dice_min=min(dices),
        dice_max=max(dices),
        adjusted_mean_dice=exact_mean(c.dice for c in kept),
        adjusted_mean_iou=exact_mean(c.iou for c in kept),
        excluded_case_ids=excluded,
        outlier_rule_config=(rule_config or OutlierRuleConfig()).to_json(),
        both_empty_case_ids=tuple(c.case_id for c in cases if c.both_empty),
    )


# --------------------------------------------------------------------------
# artifacts

CSV_FIELDS = ("case_id", "dice", "iou", "gt_voxels", "pred_voxels", "flags", "both_empty")


def cases_to_csv(cases: Sequence[CaseMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for c in cases:
        w.writerow([c.case_id, repr(c.dice), repr(c.iou), c.gt_voxels, c.pred_voxels, ";".join(sorted(c.outlier_flags)), int(c.both_empty)])
    return buf.getvalue()


def cases_from_csv(text: str) -> list[CaseMetrics]:
    rows = csv.DictReader(io.StringIO(text))
    return [
        CaseMetrics(
            r["case_id"],
            float(r["dice"]),
            float(r["iou"]),
            int(r["gt_voxels"]),
            int(r["pred_voxels"]),
            frozenset(f for f in r["flags"].split(";") if f),
            bool(int(r.get("both_empty", 0) or 0)),
        )
        for r in rows
    ]


def aggregate_to_json(report: AggregateReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
