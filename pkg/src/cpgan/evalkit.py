"""Object discovery performance (ODP): IOU against unions of ground-truth objects."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError

SUCCESS_IOU = 0.5
BINARIZE_AT = 0.5
EXHAUSTIVE_MAX_OBJECTS = 10
MAX_OBJECTS = 20
STABILITY_FRACTION = 0.1


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    if a.shape != b.shape:
        raise ContractError(f"mask shapes {a.shape} and {b.shape} differ")
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


@dataclass
class EvalCase:
    predicted: np.ndarray
    gt_masks: list[np.ndarray]

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted) > BINARIZE_AT
        if not self.gt_masks:
            raise ContractError("an eval case needs at least one ground-truth mask")
        self.gt_masks = [np.asarray(m) > 0.5 for m in self.gt_masks]
        for m in self.gt_masks:
            if m.shape != self.predicted.shape:
                raise ContractError(f"gt mask {m.shape} does not match prediction {self.predicted.shape}")


def _exhaustive(pred: np.ndarray, gts: list[np.ndarray]) -> tuple[float, tuple[int, ...]]:
    flat_pred = pred.ravel()
    flat = np.stack([g.ravel() for g in gts])
    best, best_subset = -1.0, ()
    k = len(gts)
    for r in range(1, k + 1):
        for subset in itertools.combinations(range(k), r):
            union = flat[list(subset)].any(axis=0)
            score = iou(flat_pred, union)
            if score > best:
                best, best_subset = score, subset
    return best, best_subset


def _greedy(pred: np.ndarray, gts: list[np.ndarray]) -> tuple[float, tuple[int, ...]]:
    singles = [iou(pred, g) for g in gts]
    first = int(np.argmax(singles))
    chosen = [first]
    union = gts[first].copy()
    best = singles[first]
    remaining = set(range(len(gts))) - {first}
    while remaining:
        gains = {j: iou(pred, union | gts[j]) for j in sorted(remaining)}
        j = max(gains, key=lambda idx: (gains[idx], -idx))
        if gains[j] <= best:
            break
        best = gains[j]
        chosen.append(j)
        union |= gts[j]
        remaining.discard(j)
    return best, tuple(sorted(chosen))


def best_valid_match(case: EvalCase, method: str = "auto") -> tuple[float, tuple[int, ...]]:
    """Best IOU of the prediction against any union of ground-truth objects.

    ``method`` is ``exhaustive``, ``greedy`` or ``auto`` (exhaustive up to
    10 objects, greedy above).
    """
    k = len(case.gt_masks)
    if k > MAX_OBJECTS:
        raise ContractError(f"at most {MAX_OBJECTS} objects supported, got {k}")
    if method == "auto":
        method = "exhaustive" if k <= EXHAUSTIVE_MAX_OBJECTS else "greedy"
    if method == "exhaustive":
        return _exhaustive(case.predicted, case.gt_masks)
    if method == "greedy":
        return _greedy(case.predicted, case.gt_masks)
    raise ContractError(f"unknown matching method {method!r}")


@dataclass
class EvalSummary:
    odp: float
    success: list[bool]
    ious: list[float] = field(default_factory=list)
    subsets: list[tuple[int, ...]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "odp": self.odp,
            "cases": [
                {"iou": i, "subset": list(s), "success": ok}
                for i, s, ok in zip(self.ious, self.subsets, self.success)
            ],
        }


def odp(cases: Sequence[EvalCase], method: str = "auto") -> EvalSummary:
    if not cases:
        raise ContractError("odp needs at least one case")
    ious, subsets = [], []
    for case in cases:
        score, subset = best_valid_match(case, method)
        ious.append(score)
        subsets.append(subset)
    success = [s > SUCCESS_IOU for s in ious]
    return EvalSummary(odp=100.0 * sum(success) / len(success), success=success, ious=ious, subsets=subsets)


def is_stable(final_odp: float, max_odp: float) -> bool:
    """A run has not collapsed if it ends at >= 10% of its best ODP."""
    return final_odp >= STABILITY_FRACTION * max_odp


@dataclass
class RunAggregate:
    mean: float
    std: float
    stability_rate: float


def aggregate_runs(summaries: Sequence[dict]) -> RunAggregate:
    """Mean/population-std of per-run best ODP and % of stable runs.

    Each summary needs ``max_odp`` and ``final_odp``.
    """
    if not summaries:
        raise ContractError("aggregate_runs needs at least one run")
    best = np.array([s["max_odp"] for s in summaries], dtype=np.float64)
    stable = [is_stable(s["final_odp"], s["max_odp"]) for s in summaries]
    return RunAggregate(mean=float(best.mean()), std=float(best.std()), stability_rate=100.0 * sum(stable) / len(stable))


def write_report(path: str | Path, summary: EvalSummary, extra: dict | None = None) -> None:
    payload = summary.to_json()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2))


def write_csv(path: str | Path, summary: EvalSummary) -> None:
    lines = ["case,iou,success,subset"]
    for i, (score, ok, subset) in enumerate(zip(summary.ious, summary.success, summary.subsets)):
        lines.append(f"{i},{score:.6f},{int(ok)},{' '.join(map(str, subset))}")
    Path(path).write_text("\n".join(lines) + "\n")
