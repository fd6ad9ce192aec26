"""Binary live/spoof scoring metrics.

Live is the positive class and scores are P(live); a sample is accepted as
live when ``score >= threshold``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (spoof) or 1 (live)")

    def check_both_classes(self) -> None:
        n_live = int(self.labels.sum())
        if n_live == 0 or n_live == len(self.labels):
            raise ValueError("both live and spoof samples are required")


@dataclass
class EvalReport:
    hter: float
    auc: float
    threshold: float
    far: float
    frr: float
    n_live: int
    n_spoof: int
    roc: list[tuple[float, float, float]] = field(default_factory=list)  # (threshold, FAR, TPR)
    threshold_policy: str = "eer-on-eval"

    def to_dict(self) -> dict:
        return asdict(self)


def roc(scored: ScoredSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (descending, starting at +inf), FAR and TPR at each."""
    scored.check_both_classes()
    s, y = scored.scores, scored.labels
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = np.cumsum(1 - y_sorted)[last]
    n_live, n_spoof = y.sum(), len(y) - y.sum()
    thresholds = np.r_[np.inf, s_sorted[last]]
    far = np.r_[0.0, fp / n_spoof]
    tpr = np.r_[0.0, tp / n_live]
    return thresholds, far, tpr


def auc(scored: ScoredSet) -> float:
    _, far, tpr = roc(scored)
    return float(np.sum(np.diff(far) * (tpr[1:] + tpr[:-1]) / 2.0))


def hter(scored: ScoredSet) -> tuple[float, float]:
    """HTER at the equal-error operating point and the chosen threshold.

    The threshold minimizes |FAR - FRR| over the ROC grid; ties go to the
    lower threshold.
    """
    thresholds, far, tpr = roc(scored)
    frr = 1.0 - tpr
    gap = np.abs(far - frr)
    best = np.flatnonzero(gap == gap.min())
    i = best[np.argmin(thresholds[best])]
    return float((far[i] + frr[i]) / 2.0), float(thresholds[i])


def evaluate(scores, labels) -> EvalReport:
    scored = ScoredSet(scores, labels)
    thresholds, far, tpr = roc(scored)
    h, tau = hter(scored)
    i = int(np.flatnonzero(thresholds == tau)[0])
    return EvalReport(
        hter=h, auc=auc(scored), threshold=tau, far=float(far[i]), frr=float(1 - tpr[i]),
        n_live=int(scored.labels.sum()), n_spoof=int((1 - scored.labels).sum()),
        roc=[(float(t), float(a), float(b)) for t, a, b in zip(thresholds, far, tpr)],
    )
