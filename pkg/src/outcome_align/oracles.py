"""Slow, obviously-correct reference computations.

Nothing here shares code with the fast paths it checks: loops over pairs,
points and thresholds instead of sorting and vectorizing.
"""
from __future__ import annotations

import math


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                credit += 1.0
            elif sp == sn:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def average_precision_thresholds(scores, labels) -> float:
    """Sweep every distinct score as a threshold (score >= t is predicted positive)."""
    n_pos = sum(1 for y in labels if y == 1)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(chosen)
        recall = tp / n_pos
        ap += (tp / len(chosen)) * (recall - prev_recall)
        prev_recall = recall
    return ap


def brier_direct(scores, labels) -> float:
    return sum((p - y) ** 2 for p, y in zip(scores, labels)) / len(scores)


def ece_direct(scores, labels, num_bins: int) -> float:
    total = 0.0
    n = len(scores)
    for b in range(num_bins):
        lo, hi = b / num_bins, (b + 1) / num_bins
        members = [(p, y) for p, y in zip(scores, labels)
                   if (lo <= p < hi) or (b == num_bins - 1 and p == 1.0)]
        if not members:
            continue
        mean_p = sum(p for p, _ in members) / len(members)
        rate = sum(y for _, y in members) / len(members)
        total += len(members) / n * abs(mean_p - rate)
    return total


def class_statistics_loops(points, labels):
    """Return (mu0, mu1, n0, n1, scatter_trace) with plain nested loops."""
    d = len(points[0])
    out = {}
    trace = 0.0
    for c in (0, 1):
        members = [p for p, y in zip(points, labels) if y == c]
        if not members:
            out[c] = (None, 0)
            continue
        mu = [sum(p[j] for p in members) / len(members) for j in range(d)]
        ss = 0.0
        for p in members:
            for j in range(d):
                ss += (p[j] - mu[j]) ** 2
        trace += ss / len(members)
        out[c] = (mu, len(members))
    return out[0][0], out[1][0], out[0][1], out[1][1], trace


def geometry_loops(points, labels, epsilon):
    mu0, mu1, _, _, trace = class_statistics_loops(points, labels)
    gap_sq = sum((a - b) ** 2 for a, b in zip(mu1, mu0))
    return gap_sq, trace, gap_sq / (trace + epsilon)


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
