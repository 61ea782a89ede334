"""Thresholded detection: calibrate a cutoff on ID scores, then label each
sample "in" (with its predicted class) or "out" ("unknown").

The cutoff is a discrete order statistic, not an interpolated quantile, so
the acceptance guarantee on the calibration set is exact: at least
``target_tpr`` of the ID scores pass, and for distinct scores no more than
``target_tpr + 1/N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class Threshold:
    """Score cutoff: samples scoring >= lambda_ are accepted as ID."""
    lambda_: float
    target_tpr: float
    method: str
    n_calibration: int


@dataclass(frozen=True)
class Detection:
    decision: str          # "in" | "out"
    predicted_label: int | str  # class index, or "unknown" when out
    score: float


def calibrate_threshold(id_scores: np.ndarray, target_tpr: float = 0.95,
                        method: str = "") -> Threshold:
    """Pick the k-th smallest ID score, k = N - ceil(target_tpr * N) + 1,
    so that at least ``target_tpr`` of the calibration scores pass."""
    s = np.asarray(id_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise DetectorError("cannot calibrate a threshold on zero ID scores")
    if not 0.0 < target_tpr < 1.0:
        raise DetectorError(f"target_tpr must be in (0, 1), got {target_tpr}")
    n = s.size
    k = n - math.ceil(target_tpr * n) + 1
    lam = float(np.sort(s)[k - 1])
    return Threshold(lambda_=lam, target_tpr=float(target_tpr),
                     method=method, n_calibration=n)


def detect(scores: np.ndarray, logits: np.ndarray,
           threshold: Threshold) -> list[Detection]:
    """Accept iff score >= lambda (inclusive); predicted label is the argmax
    logit for accepted samples, "unknown" otherwise."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    Z = np.asarray(logits, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != s.size:
        raise DetectorError(
            f"row count mismatch: {s.size} scores vs logits shape {Z.shape}")
    labels = Z.argmax(axis=1)  # ties resolve to the lowest class index
    out = []
    for i in range(s.size):
        if s[i] >= threshold.lambda_:
            out.append(Detection("in", int(labels[i]), float(s[i])))
        else:
            out.append(Detection("out", "unknown", float(s[i])))
    return out


def detections_to_table(detections: list[Detection], method: str,
                        delimiter: str = "\t") -> str:
    """Render detections as delimited text:
    sample_index, method, score, decision, predicted_label."""
    lines = [delimiter.join(
        ("sample_index", "method", "score", "decision", "predicted_label"))]
    for i, det in enumerate(detections):
        lines.append(delimiter.join((
            str(i), method, repr(det.score), det.decision,
            str(det.predicted_label))))
    return "\n".join(lines) + "\n"
