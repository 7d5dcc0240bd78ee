"""Per-case segmentation metrics and the two mean-Dice aggregation conventions.

A case with empty ground truth and empty prediction has no defined Dice; the
challenge convention counts it as 0, the nnU-Net convention drops it from the
mean. False positive / false negative volumes sum connected components
(26-connectivity) with zero overlap against the other mask.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

UNDEFINED = None  # marker for Dice on two empty masks

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=int)


@dataclass
class CaseMetrics:
    case_id: str
    dice: float | None
    fp_volume_ml: float
    fn_volume_ml: float
    gt_empty: bool
    pred_empty: bool


@dataclass
class EvalReport:
    cases: list[CaseMetrics]
    mean_dice_challenge: float
    mean_dice_nnunet: float | None
    mean_fp_volume: float
    mean_fn_volume: float
    convention_note: str


def dice(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """2|P∩G| / (|P|+|G|); None when both masks are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return UNDEFINED
    return 2.0 * int((p & g).sum()) / denom


def fp_fn_volumes(pred: np.ndarray, gt: np.ndarray, spacing) -> tuple[float, float]:
    """Volumes (ml) of pred components missing gt entirely, and vice versa."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    voxel_ml = float(np.prod(spacing)) / 1000.0

    def unmatched_voxels(mask: np.ndarray, other: np.ndarray) -> int:
        labels, n = ndimage.label(mask, structure=CONNECTIVITY_26)
        total = 0
        for comp in range(1, n + 1):
            comp_mask = labels == comp
            if not (comp_mask & other).any():
                total += int(comp_mask.sum())
        return total

    p = pred.astype(bool)
    g = gt.astype(bool)
    fp_ml = unmatched_voxels(p, g) * voxel_ml
    fn_ml = unmatched_voxels(g, p) * voxel_ml
    return fp_ml, fn_ml


def evaluate_case(case_id: str, pred: np.ndarray, gt: np.ndarray, spacing) -> CaseMetrics:
    fp_ml, fn_ml = fp_fn_volumes(pred, gt, spacing)
    return CaseMetrics(
        case_id=case_id,
        dice=dice(pred, gt),
        fp_volume_ml=fp_ml,
        fn_volume_ml=fn_ml,
        gt_empty=not gt.astype(bool).any(),
        pred_empty=not pred.astype(bool).any(),
    )


def aggregate(cases: list[CaseMetrics]) -> EvalReport:
    """Compute both mean-Dice conventions over one case list.

    Challenge: undefined Dice (both masks empty) contributes 0 and the case
    stays in the denominator. nnU-Net: such cases are excluded; with nothing
    left the mean itself is undefined (None). Cases with a defined Dice are
    treated identically by both conventions.
    """
    if not cases:
        raise ValueError("cannot aggregate zero cases")
    challenge_values = [0.0 if c.dice is UNDEFINED else c.dice for c in cases]
    defined = [c.dice for c in cases if c.dice is not UNDEFINED]
    return EvalReport(
        cases=list(cases),
        mean_dice_challenge=float(np.mean(challenge_values)),
        mean_dice_nnunet=float(np.mean(defined)) if defined else UNDEFINED,
        mean_fp_volume=float(np.mean([c.fp_volume_ml for c in cases])),
        mean_fn_volume=float(np.mean([c.fn_volume_ml for c in cases])),
        convention_note=(
            "challenge: correctly-empty cases count as Dice 0; "
            "nnunet: correctly-empty cases excluded from the mean"
        ),
    )


def report_to_json(report: EvalReport) -> dict:
    return {
        "mean_dice_challenge": report.mean_dice_challenge,
        "mean_dice_nnunet": report.mean_dice_nnunet,
        "mean_fp_volume_ml": report.mean_fp_volume,
        "mean_fn_volume_ml": report.mean_fn_volume,
        "convention_note": report.convention_note,
        "num_cases": len(report.cases),
        "cases": [
            {
                "case_id": c.case_id,
                "dice": c.dice,
                "fp_volume_ml": c.fp_volume_ml,
                "fn_volume_ml": c.fn_volume_ml,
                "gt_empty": c.gt_empty,
                "pred_empty": c.pred_empty,
            }
            for c in report.cases
        ],
    }


def save_report(report: EvalReport, json_path: Path, csv_path: Path | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report_to_json(report), indent=2) + "\n")
    if csv_path is not None:
        csv_path = Path(csv_path)
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["case_id", "dice", "fp_volume_ml", "fn_volume_ml", "gt_empty", "pred_empty"])
            for c in report.cases:
                d = "" if c.dice is UNDEFINED else f"{c.dice:.6f}"
                writer.writerow([c.case_id, d, f"{c.fp_volume_ml:.6f}", f"{c.fn_volume_ml:.6f}",
                                 int(c.gt_empty), int(c.pred_empty)])


def load_report(json_path: Path) -> EvalReport:
    obj = json.loads(Path(json_path).read_text())
    cases = [
        CaseMetrics(
            case_id=c["case_id"],
            dice=c["dice"],
            fp_volume_ml=c["fp_volume_ml"],
            fn_volume_ml=c["fn_volume_ml"],
            gt_empty=c["gt_empty"],
            pred_empty=c["pred_empty"],
        )
        for c in obj["cases"]
    ]
    report = aggregate(cases)
    # aggregation is recomputed; sanity-check against the stored values
    if not math.isclose(report.mean_dice_challenge, obj["mean_dice_challenge"], abs_tol=1e-9):
        raise ValueError(f"{json_path}: stored challenge mean disagrees with cases")
    return report
