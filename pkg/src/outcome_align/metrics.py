"""Discrimination, calibration and embedding-geometry metrics.

All functions take plain arrays and are pure.  Brute-force counterparts used
to cross-check them live in :mod:`outcome_align.oracles`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class MetricUndefined(ValueError):
    """A metric was requested on data where it has no value (e.g. one class)."""


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties, via average ranks."""
    s, y = _prep(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise MetricUndefined("AUROC undefined: need both classes")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size)
    # average rank per tie group
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def auprc(scores, labels) -> float:
    """Average precision; items sharing a score enter the ranking together."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefined("AUPRC undefined: no positive labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tp = np.cumsum(y_sorted)[last_of_group]
    seen = last_of_group + 1
    precision = tp / seen
    recall = tp / n_pos
    recall_step = np.diff(np.r_[0.0, recall])
    return float(np.sum(precision * recall_step))


def brier(scores, labels) -> float:
    s, y = _prep(scores, labels)
    if np.any((s < 0) | (s > 1)):
        raise ValueError("brier: scores must lie in [0, 1]")
    return float(np.mean((s - y) ** 2))


def bin_index(scores, num_bins: int) -> np.ndarray:
    """Equal-width bins on [0, 1]; the last bin is closed at 1.0."""
    return np.minimum(np.floor(np.asarray(scores) * num_bins).astype(np.int64), num_bins - 1)


def ece(scores, labels, num_bins: int = 10) -> float:
    s, y = _prep(scores, labels)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if np.any((s < 0) | (s > 1)):
        raise ValueError("ece: scores must lie in [0, 1]")
    if s.size == 0:
        raise ValueError("ece on empty input")
    b = bin_index(s, num_bins)
    score_sum = np.bincount(b, weights=s, minlength=num_bins)
    pos_sum = np.bincount(b, weights=y, minlength=num_bins)
    gap = np.abs(score_sum - pos_sum)  # = n_b * |mean score - positive rate|
    return float(gap.sum() / s.size)


def gaussian_bayes_auroc(mahalanobis: float) -> float:
    """AUROC of the optimal linear score for two shared-covariance Gaussians.

    ``mahalanobis`` is the distance (not squared) between the class means.
    """
    if mahalanobis < 0:
        raise ValueError("Mahalanobis distance must be >= 0")
    # Phi(x) = erfc(-x / sqrt 2) / 2 with x = delta / sqrt 2
    return 0.5 * math.erfc(-mahalanobis / 2.0)


@dataclass(frozen=True)
class MetricsReport:
    auroc: float
    auprc: float
    brier: float
    ece: float
    n: int
    prevalence: float

    def to_dict(self):
        return asdict(self)

    def to_text(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.to_dict().items())


def metrics_report(scores, labels, num_bins: int = 10) -> MetricsReport:
    s, y = _prep(scores, labels)
    return MetricsReport(
        auroc=auroc(s, y), auprc=auprc(s, y), brier=brier(s, y),
        ece=ece(s, y, num_bins), n=int(y.size), prevalence=float(y.mean()),
    )


@dataclass(frozen=True)
class GeometryReport:
    mean_gap_sq: float
    scatter_trace: float
    rayleigh: float
    mahalanobis_sq: float | None  # None when the pooled covariance is singular
    epsilon: float

    def to_dict(self):
        return asdict(self)

    def to_text(self) -> str:
        rows = []
        for k, v in self.to_dict().items():
            rows.append(f"{k}={'n/a' if v is None else repr(v)}")
        return "\n".join(rows)


def geometry_report(embeddings, labels, epsilon: float = 1e-5) -> GeometryReport:
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise ValueError(f"embeddings {z.shape} do not match {y.shape[0]} labels")
    z0, z1 = z[y == 0], z[y == 1]
    if len(z0) == 0 or len(z1) == 0:
        raise MetricUndefined("geometry undefined: need both classes")
    mu0, mu1 = z0.mean(axis=0), z1.mean(axis=0)
    c0, c1 = z0 - mu0, z1 - mu1
    gap = mu1 - mu0
    gap_sq = float(gap @ gap)
    trace = float(np.sum(c0 * c0) / len(z0) + np.sum(c1 * c1) / len(z1))

    d = z.shape[1]
    pooled = 0.5 * (c0.T @ c0 / len(z0) + c1.T @ c1 / len(z1))
    pooled_trace = float(np.trace(pooled))
    maha = None
    if pooled_trace > 0:
        ridge = 1e-6 * pooled_trace / d
        try:
            chol = np.linalg.cholesky(pooled + ridge * np.eye(d))
            w = np.linalg.solve(chol, gap)
            maha = float(w @ w)
        except np.linalg.LinAlgError:
            maha = None
    return GeometryReport(gap_sq, trace, gap_sq / (trace + epsilon), maha, float(epsilon))
