"""Synthetic longitudinal cohorts with a planted low-dimensional outcome signal.

Generative story per patient (independent substream per patient index):

* ``y ~ Bernoulli(prevalence)``
* signal latent ``u ~ N(0, I_s) + y * delta * e`` with a seed-fixed unit ``e``
* nuisance latent ``v ~ N(0, nuisance_scale^2 I_q)``, independent of ``y``
* events: feature ids in repeated shuffled passes over the vocabulary (a lab
  panel drawn again and again); feature ``f`` reads latent coordinate
  ``f mod (s + q)`` plus Gaussian noise; times uniform on the horizon
* static features: the first ``min(S, s)`` signal coordinates plus noise,
  pure noise for the rest

The class-conditional latents are shared-covariance Gaussians whose
Mahalanobis distance is exactly ``delta``, so the best achievable AUROC is
``gaussian_bayes_auroc(delta)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .model import Event, Schema, Trajectory

GENERATOR_VERSION = "synthcohort/1"
FORMAT_VERSION = 1


class CohortFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 5000
    n_features: int = 40
    n_static: int = 4
    prevalence: float = 0.3
    signal_dim: int = 4
    nuisance_dim: int = 32
    effect_size: float = 2.0
    events_min: int = 40
    events_max: int = 120
    horizon_days: float = 365.0
    nuisance_scale: float = 8.0
    value_noise: float = 0.5
    static_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.n_static < 0:
            raise ValueError("n_static must be >= 0")
        if not 0 < self.prevalence < 1:
            raise ValueError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        if self.signal_dim < 1 or self.nuisance_dim < 0:
            raise ValueError("signal_dim must be >= 1 and nuisance_dim >= 0")
        if self.signal_dim + self.nuisance_dim > self.n_features:
            raise ValueError("signal_dim + nuisance_dim must not exceed n_features")
        if not self.effect_size > 0:
            raise ValueError("effect_size must be > 0")
        if not 0 <= self.events_min <= self.events_max:
            raise ValueError("need 0 <= events_min <= events_max")
        if not self.horizon_days > 0:
            raise ValueError("horizon_days must be > 0")
        if not self.nuisance_scale > 0:
            raise ValueError("nuisance_scale must be > 0")
        if self.value_noise < 0 or self.static_noise < 0:
            raise ValueError("noise scales must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def schema(self) -> Schema:
        return Schema(self.n_features, self.n_static)


@dataclass(frozen=True)
class Cohort:
    schema: Schema
    trajectories: tuple[Trajectory, ...]
    provenance: dict

    def __len__(self):
        return len(self.trajectories)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trajectories], dtype=np.int64)

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())


def signal_direction(spec: CohortSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    e = rng.standard_normal(spec.signal_dim)
    return e / np.linalg.norm(e)


def _patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


def _draw_latents(rng, spec: CohortSpec, direction: np.ndarray):
    y = int(rng.random() < spec.prevalence)
    u = rng.standard_normal(spec.signal_dim) + y * spec.effect_size * direction
    v = spec.nuisance_scale * rng.standard_normal(spec.nuisance_dim)
    return y, u, v


def _patient(spec: CohortSpec, index: int, direction: np.ndarray) -> Trajectory:
    rng = _patient_rng(spec.seed, index)
    y, u, v = _draw_latents(rng, spec, direction)
    latent = np.concatenate([u, v])
    F = spec.n_features

    n_ev = int(rng.integers(spec.events_min, spec.events_max + 1))
    passes = -(-n_ev // F)
    feature_ids = np.concatenate([rng.permutation(F) for _ in range(passes)])[:n_ev]
    values = latent[feature_ids % latent.size] + spec.value_noise * rng.standard_normal(n_ev)
    times = rng.uniform(0.0, spec.horizon_days, n_ev)
    order = np.argsort(times, kind="stable")
    events = tuple(Event(float(times[j]), int(feature_ids[j]), float(values[j])) for j in order)

    k = min(spec.n_static, spec.signal_dim)
    static = np.empty(spec.n_static)
    static[:k] = u[:k] + spec.static_noise * rng.standard_normal(k)
    static[k:] = rng.standard_normal(spec.n_static - k)
    return Trajectory(f"p{index:06d}", events, tuple(float(x) for x in static), y,
                      float(spec.horizon_days))


def generate_cohort(spec: CohortSpec) -> Cohort:
    direction = signal_direction(spec)
    trajectories = tuple(_patient(spec, i, direction) for i in range(spec.n_patients))
    return Cohort(spec.schema, trajectories, {"spec": asdict(spec), "generator": GENERATOR_VERSION})


def generate_latents(spec: CohortSpec, n: int | None = None):
    """Labels and latents (y, u, v) exactly as :func:`generate_cohort` draws them.

    Skips event generation, so it is cheap enough for 1e5-patient checks.
    """
    n = spec.n_patients if n is None else n
    direction = signal_direction(spec)
    ys = np.empty(n, dtype=np.int64)
    us = np.empty((n, spec.signal_dim))
    vs = np.empty((n, spec.nuisance_dim))
    for i in range(n):
        ys[i], us[i], vs[i] = _draw_latents(_patient_rng(spec.seed, i), spec, direction)
    return ys, us, vs


def _subset(cohort: Cohort, idx, note: dict) -> Cohort:
    prov = dict(cohort.provenance)
    prov["derived"] = list(prov.get("derived", [])) + [note]
    return Cohort(cohort.schema, tuple(cohort.trajectories[i] for i in sorted(idx)), prov)


def split_cohort(cohort: Cohort, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Patient-level disjoint (train, val, test) partition."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(cohort)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    sizes = (n_train, n_val, n - n_train - n_val)
    if min(sizes) < 1:
        raise ValueError(f"split of {n} patients by {ratios} leaves an empty part {sizes}")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    parts = np.split(perm, cuts)
    names = ("train", "val", "test")
    return tuple(_subset(cohort, p, {"split": name, "ratios": list(ratios), "seed": seed})
                 for p, name in zip(parts, names))


def subsample_fraction(cohort: Cohort, fraction: float, seed: int = 0,
                       max_attempts: int = 100) -> Cohort:
    """Uniform patient subsample; for a fixed seed, larger fractions are supersets.

    Nesting holds whenever the first attempt retains both classes, which is the
    common case; a retry uses a different permutation.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(cohort)
    size = int(round(fraction * n))
    if size < 2:
        raise ValueError(f"fraction {fraction} of {n} patients leaves fewer than 2")
    labels = cohort.labels
    for attempt in range(max_attempts):
        perm = np.random.default_rng([seed, attempt]).permutation(n)
        idx = perm[:size]
        if 0 < labels[idx].sum() < size:
            return _subset(cohort, idx, {"fraction": fraction, "seed": seed})
    raise ValueError(f"no subsample of size {size} retains both classes")


def _header(cohort: Cohort) -> dict:
    return {"version": FORMAT_VERSION, "F": cohort.schema.n_features,
            "S": cohort.schema.n_static, "provenance": cohort.provenance}


def write_cohort(cohort: Cohort, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(cohort), sort_keys=True) + "\n")
        for t in cohort.trajectories:
            rec = {
                "patient_id": t.patient_id,
                "label": t.label,
                "prediction_time": t.prediction_time,
                "static": list(t.static_features),
                "events": [[e.time, e.feature_id, e.value] for e in t.events],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    tmp.replace(path)


def _number(value, what, lineno):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CohortFormatError(f"{what} must be a number", lineno)
    return float(value)


def _parse_patient(rec, schema: Schema, lineno: int) -> Trajectory:
    if not isinstance(rec, dict):
        raise CohortFormatError("patient record must be an object", lineno)
    missing = {"patient_id", "label", "prediction_time", "static", "events"} - rec.keys()
    if missing:
        raise CohortFormatError(f"missing fields {sorted(missing)}", lineno)
    static = rec["static"]
    if not isinstance(static, list) or len(static) != schema.n_static:
        raise CohortFormatError(f"static must be a list of {schema.n_static} numbers", lineno)
    events = []
    for ev in rec["events"]:
        if not isinstance(ev, list) or len(ev) != 3:
            raise CohortFormatError("event must be [time, feature_id, value]", lineno)
        fid = ev[1]
        if isinstance(fid, bool) or not isinstance(fid, int):
            raise CohortFormatError("feature_id must be an integer", lineno)
        if not 0 <= fid < schema.n_features:
            raise CohortFormatError(
                f"feature_id {fid} outside [0, {schema.n_features})", lineno)
        events.append(Event(_number(ev[0], "event time", lineno), fid,
                            _number(ev[2], "event value", lineno)))
    try:
        return Trajectory(str(rec["patient_id"]), tuple(events),
                          tuple(_number(x, "static value", lineno) for x in static),
                          rec["label"], _number(rec["prediction_time"], "prediction_time", lineno))
    except ValueError as exc:
        if isinstance(exc, CohortFormatError):
            raise
        raise CohortFormatError(str(exc), lineno) from None


def read_cohort(path, expect_schema: Schema | None = None) -> Cohort:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise CohortFormatError("no header record", 1 if lines else None)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"malformed header: {exc.msg}", 1) from None
    if not isinstance(header, dict) or not {"version", "F", "S"} <= header.keys():
        raise CohortFormatError("no header record", 1)
    if header["version"] != FORMAT_VERSION:
        raise CohortFormatError(f"unsupported format version {header['version']}", 1)
    schema = Schema(int(header["F"]), int(header["S"]))
    if expect_schema is not None and schema != expect_schema:
        raise CohortFormatError(f"schema {schema} does not match expected {expect_schema}", 1)
    trajectories = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CohortFormatError(f"malformed record: {exc.msg}", lineno) from None
        traj = _parse_patient(rec, schema, lineno)
        if traj.patient_id in seen:
            raise CohortFormatError(f"duplicate patient_id {traj.patient_id}", lineno)
        seen.add(traj.patient_id)
        trajectories.append(traj)
    return Cohort(schema, tuple(trajectories), header.get("provenance", {}))


def spec_field_names():
    return [f.name for f in fields(CohortSpec)]
