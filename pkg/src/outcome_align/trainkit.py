"""Training loop, evaluation, checkpoints and the sample-efficiency sweep."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import GeometryReport, MetricsReport, geometry_report, metrics_report
from .model import Dims, ModelParams, PooledInputs, Schema, encode_pooled, gradients_by_name, init_params, pool_events, predict_risk
from .ndcore import Tape
from .objective import ObjectiveConfig, SkipCounter, bce_loss, class_statistics, rayleigh_quotient, total_loss, update_ema
from .synthcohort import Cohort, subsample_fraction

CHECKPOINT_FORMAT = "outcome_align.checkpoint"
CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float, param_norm: float):
        super().__init__(
            f"non-finite loss {loss} at epoch {epoch}, batch {batch}; "
            f"parameter norm {param_norm:.6g}")
        self.epoch = epoch
        self.batch = batch
        self.param_norm = param_norm


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    batch_size: int = 64
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 1
    checkpoint_path: str | None = None
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.objective.lam > 0 and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when lambda > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    sup: float  # per-patient mean over the epoch
    rdisc: float | None  # mean over batches where the regularizer applied
    total: float  # per-patient mean over the epoch
    skipped_batches: int
    n_batches: int
    val_metrics: MetricsReport | None = None
    val_geometry: GeometryReport | None = None

    def to_dict(self):
        out = asdict(self)
        out["val_metrics"] = None if self.val_metrics is None else self.val_metrics.to_dict()
        out["val_geometry"] = None if self.val_geometry is None else self.val_geometry.to_dict()
        return out


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


def _param_norm(params: ModelParams) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in params.trainable().values()))


def _forward_batch(pooled: PooledInputs, params: ModelParams, obj: ObjectiveConfig,
                   ema_prior, counter: SkipCounter, regularizer: bool):
    tape = Tape()
    emb = encode_pooled(pooled, params, tape)
    probs = predict_risk(emb, params, tape)
    sup = bce_loss(probs, pooled.labels, tape)
    rdisc = None
    stats = None
    if regularizer and obj.lam > 0:
        stats = class_statistics(emb, tape, prior=ema_prior)
        if obj.ema_decay is not None:
            stats = update_ema(stats, obj.ema_decay)
        rdisc = rayleigh_quotient(stats, obj.epsilon, tape,
                                  use_ema_means=obj.ema_decay is not None,
                                  single_class_policy=obj.single_class_policy)
        root = total_loss(sup, rdisc, obj.lam, tape, counter)
    else:
        root = sup
    return tape, sup, rdisc, root, stats


def train(config: TrainConfig, train_cohort: Cohort, val_cohort: Cohort | None = None,
          schema: Schema | None = None, dims: Dims = Dims(), *, regularizer: bool = True,
          init: ModelParams | None = None):
    """Mini-batch SGD with classical momentum on bce - lam * R_disc.

    The class-statistics branch is built only when ``regularizer`` is set and
    ``lam > 0``; ``regularizer=False`` is the excised baseline.
    """
    schema = schema or train_cohort.schema
    if len(train_cohort) == 0:
        raise ValueError("empty training cohort")
    labels = train_cohort.labels
    if labels.min() == labels.max():
        raise ValueError("training cohort needs both classes")
    params = init if init is not None else init_params(schema, dims, config.seed)
    pooled = pool_events(train_cohort.trajectories, schema, params.time_frequencies)
    val_pooled = None
    if val_cohort is not None and len(val_cohort):
        val_pooled = pool_events(val_cohort.trajectories, schema, params.time_frequencies)

    obj = config.objective
    shuffle_rng = np.random.default_rng([config.seed, 1])
    velocity = {name: np.zeros_like(a) for name, a in params.trainable().items()}
    history = TrainHistory()
    ema = None
    n = len(pooled)

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
        batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        counter = SkipCounter()
        sup_sum = total_sum = r_sum = 0.0
        r_count = 0
        for b, idx in enumerate(batches, start=1):
            tape, sup, rdisc, root, stats = _forward_batch(
                pooled.take(idx), params, obj, ema, counter, regularizer)
            loss = float(tape.value(root))
            if not math.isfinite(loss):
                raise NumericalAbort(epoch, b, loss, _param_norm(params))
            grads = gradients_by_name(params, tape, tape.backward(root))
            updated = {}
            for name, arr in params.trainable().items():
                velocity[name] = config.momentum * velocity[name] + grads[name]
                updated[name] = arr - config.learning_rate * velocity[name]
            params = params.replace(updated)
            if stats is not None:
                ema = stats
            sup_sum += float(tape.value(sup)) * len(idx)
            total_sum += loss * len(idx)
            if rdisc is not None:
                r_sum += float(tape.value(rdisc))
                r_count += 1

        rec = EpochRecord(
            epoch=epoch, sup=sup_sum / n,
            rdisc=r_sum / r_count if r_count else None,
            total=total_sum / n, skipped_batches=counter.count,
            n_batches=len(batches),
        )
        if val_pooled is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            rec.val_metrics, rec.val_geometry = _evaluate_pooled(params, val_pooled, obj.epsilon)
        history.records.append(rec)

    if config.checkpoint_path:
        save_checkpoint(params, config.checkpoint_path)
    return params, history


def embed_and_score(params: ModelParams, pooled: PooledInputs):
    tape = Tape(record=False)
    emb = encode_pooled(pooled, params, tape)
    probs = predict_risk(emb, params, tape)
    return np.array(tape.value(emb.embeddings)), np.array(tape.value(probs)).reshape(-1)


def _evaluate_pooled(params, pooled, epsilon, num_bins=10):
    z, p = embed_and_score(params, pooled)
    return metrics_report(p, pooled.labels, num_bins), geometry_report(z, pooled.labels, epsilon)


def evaluate(params: ModelParams, cohort: Cohort, epsilon: float = 1e-5, num_bins: int = 10):
    """Metrics and geometry over the whole cohort from one gradient-free pass."""
    pooled = pool_events(cohort.trajectories, params.schema, params.time_frequencies)
    return _evaluate_pooled(params, pooled, epsilon, num_bins)


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    seed: int
    lam: float
    auroc: float
    auprc: float
    rdisc: float


SWEEP_COLUMNS = ("fraction", "seed", "lambda", "auroc", "auprc", "rdisc")


def sweep_sample_efficiency(config: TrainConfig, train_cohort: Cohort, val_cohort: Cohort,
                            fractions, seeds, dims: Dims = Dims()) -> list[SweepRow]:
    fractions = [float(f) for f in fractions]
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("seeds must be non-empty")
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {f}")
    rows = []
    for f in fractions:
        for s in seeds:
            subset = subsample_fraction(train_cohort, f, seed=s)
            for lam in (0.0, config.objective.lam):
                cfg = _with(config, lam=lam, seed=s)
                params, _ = train(cfg, subset, None, train_cohort.schema, dims)
                m, g = evaluate(params, val_cohort, cfg.objective.epsilon)
                rows.append(SweepRow(f, s, lam, m.auroc, m.auprc, g.rayleigh))
    return rows


def _with(config: TrainConfig, lam: float, seed: int) -> TrainConfig:
    obj = ObjectiveConfig(lam, config.objective.epsilon, config.objective.ema_decay,
                          config.objective.single_class_policy)
    d = {k: getattr(config, k) for k in config.__dataclass_fields__}
    d.update(objective=obj, seed=seed, checkpoint_path=None)
    return TrainConfig(**d)


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([repr(r.fraction), r.seed, repr(r.lam), repr(r.auroc),
                         repr(r.auprc), repr(r.rdisc)])
    return buf.getvalue()


def save_checkpoint(params: ModelParams, path) -> None:
    schema, dims = params.schema, params.dims
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "schema": asdict(schema),
        "dims": {"k": dims.k, "m": dims.m, "d": dims.d, "hidden": list(dims.hidden)},
        "time_frequencies": params.time_frequencies.tolist(),
        "params": {name: {"shape": list(np.shape(a)), "data": np.ravel(a).tolist()}
                   for name, a in params.trainable().items()},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path, expect_schema: Schema | None = None,
                    expect_dims: Dims | None = None) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    schema = Schema(**doc["schema"])
    dims = Dims(k=doc["dims"]["k"], m=doc["dims"]["m"], d=doc["dims"]["d"],
                hidden=tuple(doc["dims"]["hidden"]))
    if expect_schema is not None and schema != expect_schema:
        raise CheckpointError(f"checkpoint schema {schema} does not match {expect_schema}")
    if expect_dims is not None and dims != expect_dims:
        raise CheckpointError(f"checkpoint dims {dims} do not match {expect_dims}")

    template = init_params(schema, dims, seed=0)
    arrays = {}
    for name, ref in template.trainable().items():
        block = doc["params"].get(name)
        if block is None:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        arr = np.array(block["data"], dtype=np.float64).reshape(block["shape"])
        if arr.shape != ref.shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {ref.shape}")
        arrays[name] = arr
    params = template.replace(arrays)
    params.time_frequencies = np.array(doc["time_frequencies"], dtype=np.float64)
    params.validate()
    return params
