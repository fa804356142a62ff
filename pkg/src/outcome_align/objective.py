"""Cross-entropy plus the class-separation (Rayleigh quotient) regularizer.

    total = bce - lam * |mu1 - mu0|^2 / (tr(Sw) + eps)

``Sw`` sums the per-class covariances with 1/N_c weighting (not 1/(N_c - 1)
and not the unnormalized scatter of classical LDA).  Only its trace is ever
formed, in O(N d).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import EmbeddingBatch
from .ndcore import Tape

PROB_CLIP = 1e-7
SINGLE_CLASS_POLICIES = ("skip", "use_ema")


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.05
    epsilon: float = 1e-5
    ema_decay: float | None = None  # None disables EMA means
    single_class_policy: str = "skip"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.ema_decay is not None and not 0 <= self.ema_decay < 1:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.single_class_policy not in SINGLE_CLASS_POLICIES:
            raise ValueError(
                f"single_class_policy must be one of {SINGLE_CLASS_POLICIES}, "
                f"got {self.single_class_policy!r}")


@dataclass(frozen=True)
class BatchStats:
    tape: Tape
    mu0: int | None  # node (1, d); None when class absent
    mu1: int | None
    n0: int
    n1: int
    scatter_trace: int  # scalar node
    ema_mu0: np.ndarray | None = None  # (1, d) constants
    ema_mu1: np.ndarray | None = None

    @property
    def ema_initialized(self) -> tuple[bool, bool]:
        return self.ema_mu0 is not None, self.ema_mu1 is not None


class SkipCounter:
    def __init__(self):
        self.count = 0


def bce_loss(probs: int, labels, tape: Tape) -> int:
    p = tape.value(probs)
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    if p.size == 0:
        raise ValueError("bce_loss on an empty batch")
    pc = tape.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    ones = tape.const(np.ones(p.shape))
    pos = tape.multiply(tape.const(y), tape.log(pc))
    neg = tape.multiply(tape.const(1.0 - y), tape.log(tape.subtract(ones, pc)))
    return tape.scale(tape.mean(tape.add(pos, neg)), -1.0)


def class_statistics(emb: EmbeddingBatch, tape: Tape, prior: BatchStats | None = None) -> BatchStats:
    """Class means and the within-class scatter trace, all on the tape.

    ``prior`` carries EMA state forward from an earlier batch.
    """
    labels = np.asarray(emb.labels).reshape(-1)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("class_statistics on an empty batch")
    z = emb.embeddings
    means: dict[int, int | None] = {}
    trace = None
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            means[c] = None
            continue
        select = np.zeros((idx.size, n))
        select[np.arange(idx.size), idx] = 1.0
        zc = tape.matmul(tape.const(select), z)
        mu = tape.matmul(tape.const(np.full((1, idx.size), 1.0 / idx.size)), zc)
        centered = tape.add_row(zc, tape.scale(mu, -1.0))
        tr_c = tape.scale(tape.sum(tape.square(centered)), 1.0 / idx.size)
        trace = tr_c if trace is None else tape.add(trace, tr_c)
        means[c] = mu
    n1 = int(np.sum(labels == 1))
    return BatchStats(
        tape=tape, mu0=means[0], mu1=means[1], n0=n - n1, n1=n1, scatter_trace=trace,
        ema_mu0=None if prior is None else prior.ema_mu0,
        ema_mu1=None if prior is None else prior.ema_mu1,
    )


def update_ema(stats: BatchStats, decay: float) -> BatchStats:
    if not 0 <= decay < 1:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    new = {}
    for c, mu, old in ((0, stats.mu0, stats.ema_mu0), (1, stats.mu1, stats.ema_mu1)):
        if mu is None:
            new[c] = old
            continue
        cur = np.array(stats.tape.value(mu))
        new[c] = cur if old is None else decay * old + (1.0 - decay) * cur
    return replace(stats, ema_mu0=new[0], ema_mu1=new[1])


def rayleigh_quotient(stats: BatchStats, epsilon: float, tape: Tape, *,
                      use_ema_means: bool = False, single_class_policy: str = "skip") -> int | None:
    """|mu1 - mu0|^2 / (tr(Sw) + eps) as a tape node, or None when not applicable.

    With ``use_ema_means`` the numerator uses the (constant) EMA means and
    only the batch scatter in the denominator carries gradient.
    """
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    if use_ema_means:
        if stats.ema_mu0 is None or stats.ema_mu1 is None:
            return None
        mu0, mu1 = tape.const(stats.ema_mu0), tape.const(stats.ema_mu1)
    else:
        mu0, mu1 = stats.mu0, stats.mu1
        if mu0 is None or mu1 is None:
            if single_class_policy != "use_ema":
                return None
            if mu0 is None:
                if stats.ema_mu0 is None:
                    return None
                mu0 = tape.const(stats.ema_mu0)
            if mu1 is None:
                if stats.ema_mu1 is None:
                    return None
                mu1 = tape.const(stats.ema_mu1)
    gap = tape.sum(tape.square(tape.subtract(mu1, mu0)))
    denom = tape.add(stats.scatter_trace, tape.const(epsilon))
    return tape.divide(gap, denom)


def total_loss(sup: int, rdisc: int | None, lam: float, tape: Tape,
               counter: SkipCounter | None = None) -> int:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if rdisc is None:
        if counter is not None:
            counter.count += 1
        return sup
    if lam == 0:
        # keep the regularizer branch unreachable from the root
        return sup
    return tape.subtract(sup, tape.scale(rdisc, lam))


def rayleigh_value(mean_gap_sq: float, scatter_trace: float, epsilon: float) -> float:
    return mean_gap_sq / (scatter_trace + epsilon)
