"""Longitudinal encoder and logistic risk head.

Each event becomes ``E[f] + value * V[f] + T @ [sin(w dt), cos(w dt)]`` with
``dt`` measured back from the prediction time.  Event vectors are averaged
per patient and passed through a tanh MLP whose last layer is linear; the
result is the embedding ``z``.  The head scores ``sigmoid(w . [z; static] + b)``.

Because everything before the MLP is linear, the mean-pooled event vector
equals ``counts @ E + values @ V + timefeat @ T`` where the three left
factors are per-patient averages that do not depend on parameters.
:func:`pool_events` computes those once; training reuses them across epochs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .ndcore import Tape


class Event(NamedTuple):
    time: float
    feature_id: int
    value: float


@dataclass(frozen=True)
class Trajectory:
    patient_id: str
    events: tuple[Event, ...]
    static_features: tuple[float, ...]
    label: int
    prediction_time: float

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"{self.patient_id}: label must be 0 or 1, got {self.label!r}")
        prev = -np.inf
        for ev in self.events:
            if ev.time < prev:
                raise ValueError(f"{self.patient_id}: events not sorted by time")
            if ev.time < 0 or ev.time > self.prediction_time:
                raise ValueError(
                    f"{self.patient_id}: event time {ev.time} outside [0, {self.prediction_time}]")
            prev = ev.time


@dataclass(frozen=True)
class Schema:
    n_features: int  # F
    n_static: int  # S


@dataclass(frozen=True)
class Dims:
    k: int = 16  # event embedding width
    m: int = 4  # number of time frequencies
    d: int = 16  # embedding width
    hidden: tuple[int, ...] = (32,)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("k", "m", "d"):
            if getattr(self, name) <= 0:
                raise ValueError(f"dims.{name} must be positive")
        if any(h <= 0 for h in self.hidden):
            raise ValueError("dims.hidden widths must be positive")


@dataclass
class ModelParams:
    feature_embedding: np.ndarray  # (F, k)
    value_projection: np.ndarray  # (F, k)
    time_frequencies: np.ndarray  # (m,), fixed
    time_projection: np.ndarray  # (2m, k)
    mlp_layers: list[tuple[np.ndarray, np.ndarray]]  # [(W (in, out), b (out,))]
    head_weight: np.ndarray  # (d + S,)
    head_bias: float

    @property
    def schema(self) -> Schema:
        return Schema(self.feature_embedding.shape[0], self.head_weight.shape[0] - self.dims.d)

    @property
    def dims(self) -> Dims:
        widths = [w.shape[1] for w, _ in self.mlp_layers]
        return Dims(k=self.feature_embedding.shape[1], m=self.time_frequencies.shape[0],
                    d=widths[-1], hidden=tuple(widths[:-1]))

    def trainable(self) -> dict[str, np.ndarray]:
        """Name -> array for every optimized parameter, in a fixed order."""
        out = {
            "feature_embedding": self.feature_embedding,
            "value_projection": self.value_projection,
            "time_projection": self.time_projection,
        }
        for i, (w, b) in enumerate(self.mlp_layers):
            out[f"mlp{i}.weight"] = w
            out[f"mlp{i}.bias"] = b
        out["head_weight"] = self.head_weight
        out["head_bias"] = np.array(self.head_bias)
        return out

    def replace(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """New params with the named trainable arrays swapped in."""
        cur = self.trainable()
        cur.update(arrays)
        n_layers = len(self.mlp_layers)
        return ModelParams(
            feature_embedding=cur["feature_embedding"],
            value_projection=cur["value_projection"],
            time_frequencies=self.time_frequencies,
            time_projection=cur["time_projection"],
            mlp_layers=[(cur[f"mlp{i}.weight"], cur[f"mlp{i}.bias"]) for i in range(n_layers)],
            head_weight=cur["head_weight"],
            head_bias=float(cur["head_bias"]),
        )

    def validate(self):
        for name, arr in self.trainable().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite entries")
        k = self.feature_embedding.shape[1]
        if self.value_projection.shape != self.feature_embedding.shape:
            raise ValueError("value_projection must match feature_embedding shape")
        if self.time_projection.shape != (2 * self.time_frequencies.shape[0], k):
            raise ValueError("time_projection must be (2m, k)")
        width = k
        for i, (w, b) in enumerate(self.mlp_layers):
            if w.shape[0] != width or b.shape != (w.shape[1],):
                raise ValueError(f"mlp layer {i} shape {w.shape}/{b.shape} does not compose")
            width = w.shape[1]


@dataclass
class BoundParams:
    """Tape node ids for one :class:`ModelParams`; shapes arranged for matmul."""

    nodes: dict[str, int]
    n_layers: int


def bind_params(params: ModelParams, tape: Tape) -> BoundParams:
    """Register ``params`` as tape leaves, once per tape."""
    key = id(params)
    cached = tape.bindings.get(key)
    if cached is not None and cached[0] is params:
        return cached[1]
    nodes = {}
    for name, arr in params.trainable().items():
        if name.endswith(".bias"):
            arr = arr.reshape(1, -1)
        elif name == "head_weight":
            arr = arr.reshape(-1, 1)
        elif name == "head_bias":
            arr = arr.reshape(1, 1)
        nodes[name] = tape.leaf(arr)
    bound = BoundParams(nodes, len(params.mlp_layers))
    tape.bindings[key] = (params, bound)
    return bound


def gradients_by_name(params: ModelParams, tape: Tape, leaf_grads: dict[int, np.ndarray]):
    """Map leaf gradients back to parameter names and native shapes."""
    bound = bind_params(params, tape)
    trainable = params.trainable()
    return {name: leaf_grads[nid].reshape(trainable[name].shape)
            for name, nid in bound.nodes.items()}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def time_frequencies(m: int) -> np.ndarray:
    """Angular frequencies 1/tau with tau geometric from 1 to 365 days."""
    if m == 1:
        return np.array([1.0])
    taus = 365.0 ** (np.arange(m) / (m - 1))
    return 1.0 / taus


def init_params(schema: Schema, dims: Dims, seed: int) -> ModelParams:
    if schema.n_features <= 0 or schema.n_static < 0:
        raise ValueError("schema sizes must be positive")
    rng = np.random.default_rng(seed)
    F, k, m, d = schema.n_features, dims.k, dims.m, dims.d
    feature_embedding = glorot(rng, F, k)
    value_projection = glorot(rng, F, k)
    time_projection = glorot(rng, 2 * m, k)
    layers = []
    width = k
    for out in (*dims.hidden, d):
        layers.append((glorot(rng, width, out), np.zeros(out)))
        width = out
    head_weight = glorot(rng, d + schema.n_static, 1, shape=(d + schema.n_static,))
    return ModelParams(feature_embedding, value_projection, time_frequencies(m),
                       time_projection, layers, head_weight, 0.0)


@dataclass
class PooledInputs:
    """Per-patient event averages; rows align with the trajectory list."""

    counts: np.ndarray  # (N, F) share of events per feature
    values: np.ndarray  # (N, F) value sum per feature / n_events
    time: np.ndarray  # (N, 2m) mean time features
    static: np.ndarray  # (N, S)
    labels: np.ndarray  # (N,)
    patient_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return self.counts.shape[0]

    def take(self, idx) -> "PooledInputs":
        idx = np.asarray(idx)
        return PooledInputs(self.counts[idx], self.values[idx], self.time[idx],
                            self.static[idx], self.labels[idx],
                            [self.patient_ids[i] for i in idx])


def time_features(dt: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """(E,) offsets -> (E, 2m) interleaved [sin(w1 dt), cos(w1 dt), sin(w2 dt), ...]."""
    phase = np.outer(dt, freqs)
    out = np.empty((dt.shape[0], 2 * freqs.shape[0]))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out


def pool_events(batch: Sequence[Trajectory], schema: Schema, freqs: np.ndarray) -> PooledInputs:
    if len(batch) == 0:
        raise ValueError("empty batch")
    F, S, m2 = schema.n_features, schema.n_static, 2 * freqs.shape[0]
    n = len(batch)
    counts = np.zeros((n, F))
    values = np.zeros((n, F))
    tfeat = np.zeros((n, m2))
    static = np.zeros((n, S))
    labels = np.zeros(n)
    for i, traj in enumerate(batch):
        if len(traj.static_features) != S:
            raise ValueError(
                f"{traj.patient_id}: expected {S} static features, got {len(traj.static_features)}")
        static[i] = traj.static_features
        labels[i] = traj.label
        if not traj.events:
            continue
        ev = np.array(traj.events, dtype=np.float64)
        fid = ev[:, 1].astype(np.int64)
        if fid.min() < 0 or fid.max() >= F:
            bad = int(fid[(fid < 0) | (fid >= F)][0])
            raise ValueError(f"{traj.patient_id}: feature_id {bad} outside [0, {F})")
        n_ev = ev.shape[0]
        counts[i] = np.bincount(fid, minlength=F) / n_ev
        values[i] = np.bincount(fid, weights=ev[:, 2], minlength=F) / n_ev
        tfeat[i] = time_features(traj.prediction_time - ev[:, 0], freqs).mean(axis=0)
    return PooledInputs(counts, values, tfeat, static, labels, [t.patient_id for t in batch])


@dataclass
class EmbeddingBatch:
    embeddings: int  # tape node, (N, d)
    static: np.ndarray  # (N, S)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        if self.static.shape[0] != self.labels.shape[0]:
            raise ValueError("static and labels row counts differ")


def encode_pooled(pooled: PooledInputs, params: ModelParams, tape: Tape) -> EmbeddingBatch:
    p = bind_params(params, tape)
    n = p.nodes
    h = tape.add(
        tape.add(tape.matmul(tape.const(pooled.counts), n["feature_embedding"]),
                 tape.matmul(tape.const(pooled.values), n["value_projection"])),
        tape.matmul(tape.const(pooled.time), n["time_projection"]),
    )
    for i in range(p.n_layers):
        h = tape.add_row(tape.matmul(h, n[f"mlp{i}.weight"]), n[f"mlp{i}.bias"])
        if i < p.n_layers - 1:
            h = tape.tanh(h)
    return EmbeddingBatch(h, pooled.static, pooled.labels)


def encode(batch: Sequence[Trajectory], params: ModelParams, tape: Tape) -> EmbeddingBatch:
    pooled = pool_events(batch, params.schema, params.time_frequencies)
    return encode_pooled(pooled, params, tape)


def predict_risk(emb: EmbeddingBatch, params: ModelParams, tape: Tape) -> int:
    """Node holding (N, 1) probabilities sigmoid(w . [z; static] + b)."""
    p = bind_params(params, tape)
    z = tape.value(emb.embeddings)
    width = z.shape[1] + emb.static.shape[1]
    if width != params.head_weight.shape[0]:
        raise ValueError(
            f"head expects input width {params.head_weight.shape[0]}, got {width}")
    features = tape.concat(emb.embeddings, tape.const(emb.static))
    logits = tape.add_row(tape.matmul(features, p.nodes["head_weight"]), p.nodes["head_bias"])
    return tape.sigmoid(logits)
