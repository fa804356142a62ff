"""Reverse-mode vs central-difference comparison for the training pipeline.

Four components are checked on a random small configuration:

* ``encoder``  - a fixed random linear readout of the embeddings, w.r.t. encoder params
* ``bce``      - cross-entropy w.r.t. the probabilities
* ``rayleigh`` - R_disc w.r.t. the embedding matrix
* ``total``    - bce - lam * R_disc through encoder and head, w.r.t. all params
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import (Dims, EmbeddingBatch, Event, ModelParams, Schema, Trajectory, bind_params,
                    encode, init_params, predict_risk)
from .ndcore import Tape, finite_difference_gradient, gradient_discrepancy
from .objective import bce_loss, class_statistics, rayleigh_quotient, total_loss

COMPONENTS = ("encoder", "bce", "rayleigh", "total")
THRESHOLD = 1e-4


@dataclass(frozen=True)
class CheckDims:
    n_features: int = 6
    n_static: int = 2
    k: int = 4
    m: int = 2
    d: int = 3
    hidden: int = 5
    n: int = 8
    max_events: int = 6

    def __post_init__(self):
        for name in ("n_features", "k", "m", "d", "hidden", "n"):
            v = getattr(self, name)
            if not 1 <= v <= 8:
                raise ValueError(f"gradcheck dim {name}={v} must lie in [1, 8]")
        if not 0 <= self.n_static <= 8:
            raise ValueError("gradcheck dim n_static must lie in [0, 8]")
        if self.n < 4:
            raise ValueError("gradcheck needs n >= 4 so both classes have two members")


def random_batch(rng: np.random.Generator, dims: CheckDims) -> list[Trajectory]:
    labels = np.array([0, 0, 1, 1] + list(rng.integers(0, 2, dims.n - 4)))
    rng.shuffle(labels)
    batch = []
    for i, y in enumerate(labels):
        n_ev = int(rng.integers(0, dims.max_events + 1)) if i else dims.max_events
        times = np.sort(rng.uniform(0, 30, n_ev))
        events = tuple(Event(float(t), int(rng.integers(0, dims.n_features)), float(rng.normal()))
                       for t in times)
        static = tuple(float(x) for x in rng.normal(size=dims.n_static))
        batch.append(Trajectory(f"g{i}", events, static, int(y), 30.0))
    return batch


def _perturbed(grad: np.ndarray) -> np.ndarray:
    g = np.array(grad, dtype=np.float64)
    flat = g.reshape(-1)
    flat[0] += 0.1 * max(abs(flat[0]), 1e-2)
    return g


def _compare(value_fn: Callable[[dict], float], grad_fn: Callable[[dict], dict],
             arrays: dict[str, np.ndarray], perturb: bool, h: float) -> float:
    analytic = grad_fn(arrays)
    worst = 0.0
    for i, (name, arr) in enumerate(arrays.items()):
        def f(x, name=name):
            trial = dict(arrays)
            trial[name] = x
            return value_fn(trial)

        numeric = finite_difference_gradient(f, arr, h)
        a = analytic[name]
        if perturb and i == 0:
            a = _perturbed(a)
        worst = max(worst, gradient_discrepancy(a, numeric))
    return worst


def _model_check(params: ModelParams, scalar: Callable[[Tape, ModelParams], int],
                 names, perturb, h) -> float:
    def value_fn(arrays):
        tape = Tape(record=False)
        return float(tape.value(scalar(tape, params.replace(arrays))))

    def grad_fn(arrays):
        p = params.replace(arrays)
        tape = Tape()
        root = scalar(tape, p)
        leaf_grads = tape.backward(root)
        bound = bind_params(p, tape)
        shapes = p.trainable()
        return {n: leaf_grads[bound.nodes[n]].reshape(shapes[n].shape) for n in names}

    trainable = params.trainable()
    return _compare(value_fn, grad_fn, {n: trainable[n] for n in names}, perturb, h)


def run_gradcheck(seed: int = 1, dims: CheckDims = CheckDims(), *, lam: float = 0.5,
                  epsilon: float = 1e-3, h: float = 1e-5,
                  perturb: str | None = None) -> dict[str, float]:
    """Max gradient discrepancy per component (see ``gradient_discrepancy``)."""
    if perturb is not None and perturb not in COMPONENTS:
        raise ValueError(f"unknown component {perturb!r}")
    rng = np.random.default_rng(seed)
    schema = Schema(dims.n_features, dims.n_static)
    params = init_params(schema, Dims(k=dims.k, m=dims.m, d=dims.d, hidden=(dims.hidden,)),
                         seed=int(rng.integers(2**31)))
    batch = random_batch(rng, dims)
    labels = np.array([t.label for t in batch], dtype=np.float64)
    readout = rng.normal(size=(dims.n, dims.d))
    results = {}

    encoder_names = [n for n in params.trainable() if n not in ("head_weight", "head_bias")]

    def encoder_scalar(tape, p):
        emb = encode(batch, p, tape)
        return tape.sum(tape.multiply(emb.embeddings, tape.const(readout)))

    results["encoder"] = _model_check(params, encoder_scalar, encoder_names,
                                      perturb == "encoder", h)

    probs0 = rng.uniform(0.05, 0.95, size=(dims.n, 1))

    def bce_value(arrays):
        tape = Tape(record=False)
        return float(tape.value(bce_loss(tape.const(arrays["probs"]), labels, tape)))

    def bce_grad(arrays):
        tape = Tape()
        leaf = tape.leaf(arrays["probs"])
        return {"probs": tape.backward(bce_loss(leaf, labels, tape))[leaf]}

    results["bce"] = _compare(bce_value, bce_grad, {"probs": probs0}, perturb == "bce", h)

    z0 = rng.normal(size=(dims.n, dims.d))

    def rq(tape, z_node):
        emb = EmbeddingBatch(z_node, np.zeros((dims.n, 0)), labels)
        return rayleigh_quotient(class_statistics(emb, tape), epsilon, tape)

    def rq_value(arrays):
        tape = Tape(record=False)
        return float(tape.value(rq(tape, tape.const(arrays["z"]))))

    def rq_grad(arrays):
        tape = Tape()
        leaf = tape.leaf(arrays["z"])
        return {"z": tape.backward(rq(tape, leaf))[leaf]}

    results["rayleigh"] = _compare(rq_value, rq_grad, {"z": z0}, perturb == "rayleigh", h)

    def total_scalar(tape, p):
        emb = encode(batch, p, tape)
        sup = bce_loss(predict_risk(emb, p, tape), labels, tape)
        r = rayleigh_quotient(class_statistics(emb, tape), epsilon, tape)
        return total_loss(sup, r, lam, tape)

    results["total"] = _model_check(params, total_scalar, list(params.trainable()),
                                    perturb == "total", h)
    return results


def passed(results: dict[str, float], threshold: float = THRESHOLD) -> bool:
    return all(v < threshold for v in results.values())
