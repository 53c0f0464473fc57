"""HTER and AUC for spoofness scores (label 1 = spoof, higher score = more spoof-like)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise MetricError("scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")

    @property
    def live(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    @property
    def spoof(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    def check_both_classes(self) -> None:
        if self.live.size == 0 or self.spoof.size == 0:
            raise MetricError("both live and spoof samples are required")


def auc(s: ScoreSet) -> float:
    """Mann-Whitney statistic: P(spoof score > live score) with ties counted 1/2."""
    s.check_both_classes()
    live, spoof = np.sort(s.live), s.spoof
    below = np.searchsorted(live, spoof, side="left")
    not_above = np.searchsorted(live, spoof, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (live.size * spoof.size))


def candidate_thresholds(scores) -> np.ndarray:
    """``-inf``, midpoints between adjacent unique scores, ``+inf``."""
    u = np.unique(scores)
    return np.concatenate([[-np.inf], 0.5 * (u[:-1] + u[1:]), [np.inf]])


def error_rates(s: ScoreSet, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """FAR (spoof accepted: score <= t) and FRR (live rejected: score > t) per threshold."""
    s.check_both_classes()
    t = np.asarray(thresholds, dtype=np.float64)
    live, spoof = np.sort(s.live), np.sort(s.spoof)
    far_n, frr_n = _error_counts(live, spoof, t)
    return far_n / spoof.size, frr_n / live.size


def _error_counts(live, spoof, t) -> tuple[np.ndarray, np.ndarray]:
    far_n = np.searchsorted(spoof, t, side="right")
    frr_n = live.size - np.searchsorted(live, t, side="right")
    return far_n, frr_n


def hter(s: ScoreSet) -> tuple[float, float]:
    """HTER at the threshold where FAR and FRR are closest; returns ``(hter, threshold)``.

    Among equally close thresholds the first (lowest) wins.
    """
    s.check_both_classes()
    t = candidate_thresholds(s.scores)
    live, spoof = np.sort(s.live), np.sort(s.spoof)
    far_n, frr_n = _error_counts(live, spoof, t)
    # integer cross-multiplied gap so exact ties are not broken by rounding
    k = int(np.argmin(np.abs(far_n * live.size - frr_n * spoof.size)))
    far, frr = far_n[k] / spoof.size, frr_n[k] / live.size
    return float(0.5 * (far + frr)), float(t[k])


def write_report(path, rows) -> None:
    """One JSON object per line: protocol, hter, auc, threshold, n_live, n_spoof (plus any extras)."""
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def report_row(protocol: str, s: ScoreSet, **extra) -> dict:
    h, thr = hter(s)
    return {"protocol": protocol, "hter": h, "auc": auc(s), "threshold": thr,
            "n_live": int(s.live.size), "n_spoof": int(s.spoof.size), **extra}


def write_roc_csv(path, s: ScoreSet) -> None:
    t = candidate_thresholds(s.scores)
    far, frr = error_rates(s, t)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "frr"])
        for row in zip(t, far, frr):
            w.writerow([repr(float(v)) for v in row])
