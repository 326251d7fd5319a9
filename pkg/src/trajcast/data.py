"""Ingestion, tensorization, normalization and splitting of event records.

Long-format measurement rows are discretized into an N x M x T sparse
tensor (patients x features x time bins) with an implied observation mask,
alongside a fully observed covariate matrix and binary labels. The
serialized form is the ``trajcast-ds/1`` container.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .containers import DATASET_TAG, read_container, write_container
from .errors import ConfigError, DataIntegrityError, ParseError

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")

RECORDS_HEADER = ["patient_id", "feature_id", "time_hours", "value"]
LABELS_HEADER = ["patient_id", "label"]


@dataclass(frozen=True)
class LongRecord:
    """One timestamped measurement for one patient."""

    patient_id: str
    feature_id: str
    time: float  # hours since the patient-level reference
    value: float


@dataclass
class BinningSpec:
    """How to discretize time: bin width in hours, horizon in bins, and a
    per-feature aggregator ("mean" or "sum", default mean)."""

    bin_width: float = 1.0
    horizon_bins: int = 48
    aggregators: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not (self.bin_width > 0 and math.isfinite(self.bin_width)):
            raise ConfigError(f"bin_width must be > 0, got {self.bin_width}")
        if self.horizon_bins <= 0:
            raise ConfigError(f"horizon_bins must be > 0, got {self.horizon_bins}")
        for feat, agg in self.aggregators.items():
            if agg not in ("mean", "sum"):
                raise ConfigError(f"aggregator for {feat!r} must be mean or sum, got {agg!r}")

    def aggregator_for(self, feature_id: str) -> str:
        return self.aggregators.get(feature_id, "mean")


@dataclass
class NormStats:
    """Per-feature and per-covariate mean/std from training observations only.

    Degenerate features (no training observations, or zero spread) keep
    mean 0 / std 1 so they pass through unchanged.
    """

    feature_mean: np.ndarray
    feature_std: np.ndarray
    covariate_mean: np.ndarray
    covariate_std: np.ndarray

    def to_payload(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "covariate_mean": self.covariate_mean.tolist(),
            "covariate_std": self.covariate_std.tolist(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "NormStats":
        return cls(*(np.asarray(payload[k], dtype=np.float64) for k in
                     ("feature_mean", "feature_std", "covariate_mean", "covariate_std")))


@dataclass
class TensorDataset:
    """Sparse order-3 tensor plus covariates, labels, and split assignment.

    Observed cells are stored as parallel index/value arrays sorted by
    (patient, feature, bin); the observation mask is implied (a cell is
    observed iff it appears). ``split`` is None until :func:`split` runs.
    """

    n_patients: int
    n_features: int
    n_bins: int
    entry_i: np.ndarray
    entry_j: np.ndarray
    entry_t: np.ndarray
    entry_v: np.ndarray
    covariates: np.ndarray
    covariate_names: list[str]
    labels: np.ndarray
    patient_ids: list[str]
    feature_ids: list[str]
    split: np.ndarray | None = None
    dropped_records: int = 0

    @property
    def n_entries(self) -> int:
        return int(self.entry_v.size)

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[1])

    def entries(self):
        """Iterate observed cells as (i, j, t, value) tuples."""
        return zip(self.entry_i.tolist(), self.entry_j.tolist(),
                   self.entry_t.tolist(), self.entry_v.tolist())

    def validate(self) -> None:
        n, m, t = self.n_patients, self.n_features, self.n_bins
        if self.entry_v.size:
            if self.entry_i.min() < 0 or self.entry_i.max() >= n:
                raise DataIntegrityError("patient index out of range")
            if m == 0 or self.entry_j.min() < 0 or self.entry_j.max() >= m:
                raise DataIntegrityError("feature index out of range")
            if self.entry_t.min() < 0 or self.entry_t.max() >= t:
                raise DataIntegrityError("bin index out of range")
            cells = np.stack([self.entry_i, self.entry_j, self.entry_t], axis=1)
            if len(np.unique(cells, axis=0)) != len(cells):
                raise DataIntegrityError("duplicate (i, j, t) cell")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataIntegrityError("labels must be 0 or 1")
        if self.covariates.shape[0] != n or not np.isfinite(self.covariates).all():
            raise DataIntegrityError("covariates must be fully observed and finite")
        if self.split is not None and not np.isin(self.split, (TRAIN, VAL, TEST)).all():
            raise DataIntegrityError("split entries must be train/val/test")

    def split_indices(self, which: int) -> np.ndarray:
        if self.split is None:
            raise ConfigError("dataset has no split assignment")
        return np.flatnonzero(self.split == which)

    def dense_values_mask(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (N, M, T) value tensor (zero where unobserved) and 0/1 mask."""
        values = np.zeros((self.n_patients, self.n_features, self.n_bins))
        mask = np.zeros_like(values)
        values[self.entry_i, self.entry_j, self.entry_t] = self.entry_v
        mask[self.entry_i, self.entry_j, self.entry_t] = 1.0
        return values, mask

    def to_payload(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "n_features": self.n_features,
            "n_bins": self.n_bins,
            "entry_i": self.entry_i.tolist(),
            "entry_j": self.entry_j.tolist(),
            "entry_t": self.entry_t.tolist(),
            "entry_v": self.entry_v.tolist(),
            "covariates": self.covariates.tolist(),
            "covariate_names": list(self.covariate_names),
            "labels": self.labels.tolist(),
            "patient_ids": list(self.patient_ids),
            "feature_ids": list(self.feature_ids),
            "split": None if self.split is None else self.split.tolist(),
            "dropped_records": self.dropped_records,
        }

    @classmethod
    def from_payload(cls, p: dict) -> "TensorDataset":
        ds = cls(
            n_patients=int(p["n_patients"]),
            n_features=int(p["n_features"]),
            n_bins=int(p["n_bins"]),
            entry_i=np.asarray(p["entry_i"], dtype=np.int64),
            entry_j=np.asarray(p["entry_j"], dtype=np.int64),
            entry_t=np.asarray(p["entry_t"], dtype=np.int64),
            entry_v=np.asarray(p["entry_v"], dtype=np.float64),
            covariates=np.asarray(p["covariates"], dtype=np.float64).reshape(
                int(p["n_patients"]), -1),
            covariate_names=list(p["covariate_names"]),
            labels=np.asarray(p["labels"], dtype=np.int64),
            patient_ids=list(p["patient_ids"]),
            feature_ids=list(p["feature_ids"]),
            split=None if p["split"] is None else np.asarray(p["split"], dtype=np.int64),
            dropped_records=int(p.get("dropped_records", 0)),
        )
        ds.validate()
        return ds

    def save(self, path) -> None:
        write_container(path, DATASET_TAG, self.to_payload())

    @classmethod
    def load(cls, path) -> "TensorDataset":
        return cls.from_payload(read_container(path, DATASET_TAG))


def _read_csv_rows(path, expected_min_cols: int):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ParseError(f"{path}: empty file, header row required")
    if len(rows[0]) < expected_min_cols:
        raise ParseError(f"{path}:1: header has {len(rows[0])} columns, "
                         f"expected at least {expected_min_cols}")
    return rows


def ingest_long_csv(records_path, covariates_path, labels_path):
    """Parse the three input CSVs and reconcile their patient sets.

    Returns (records, (covariate_names, covariates_by_patient), labels_by_patient).
    Any malformed row raises ParseError naming file and row number; a patient
    with records or covariates but no label, or a labeled patient without
    covariates, raises DataIntegrityError naming the patient.
    """
    rows = _read_csv_rows(labels_path, 2)
    if [c.strip() for c in rows[0]] != LABELS_HEADER:
        raise ParseError(f"{labels_path}:1: header must be {','.join(LABELS_HEADER)}")
    labels: dict[str, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ParseError(f"{labels_path}:{lineno}: expected 2 fields, got {len(row)}")
        pid, lab = row[0].strip(), row[1].strip()
        if lab not in ("0", "1"):
            raise ParseError(f"{labels_path}:{lineno}: label must be 0 or 1, got {lab!r}")
        if pid in labels:
            raise ParseError(f"{labels_path}:{lineno}: duplicate patient {pid!r}")
        labels[pid] = int(lab)

    rows = _read_csv_rows(covariates_path, 2)
    header = [c.strip() for c in rows[0]]
    if header[0] != "patient_id":
        raise ParseError(f"{covariates_path}:1: first column must be patient_id")
    covariate_names = header[1:]
    covariates: dict[str, np.ndarray] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{covariates_path}:{lineno}: expected {len(header)} "
                             f"fields, got {len(row)}")
        pid = row[0].strip()
        try:
            vals = np.array([float(v) for v in row[1:]], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"{covariates_path}:{lineno}: {exc}") from exc
        if not np.isfinite(vals).all():
            raise ParseError(f"{covariates_path}:{lineno}: non-finite covariate")
        covariates[pid] = vals

    rows = _read_csv_rows(records_path, 4)
    if [c.strip() for c in rows[0]] != RECORDS_HEADER:
        raise ParseError(f"{records_path}:1: header must be {','.join(RECORDS_HEADER)}")
    records: list[LongRecord] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ParseError(f"{records_path}:{lineno}: expected 4 fields, got {len(row)}")
        pid, feat = row[0].strip(), row[1].strip()
        try:
            time, value = float(row[2]), float(row[3])
        except ValueError as exc:
            raise ParseError(f"{records_path}:{lineno}: {exc}") from exc
        if not (math.isfinite(time) and time >= 0):
            raise ParseError(f"{records_path}:{lineno}: time must be finite and >= 0")
        if not math.isfinite(value):
            raise ParseError(f"{records_path}:{lineno}: value must be finite")
        records.append(LongRecord(pid, feat, time, value))

    for rec in records:
        if rec.patient_id not in labels:
            raise DataIntegrityError(
                f"patient {rec.patient_id!r} appears in records but has no label")
    for pid in labels:
        if pid not in covariates:
            raise DataIntegrityError(f"patient {pid!r} has a label but no covariates")

    return records, (covariate_names, covariates), labels


def tensorize(records, covariates, labels, spec: BinningSpec) -> TensorDataset:
    """Discretize records into bins and aggregate duplicates per cell.

    The bin index is floor(time / bin_width); a measurement exactly on a
    boundary belongs to the later bin. Records at or beyond the horizon are
    dropped and counted, not clamped.
    """
    spec.validate()
    if not records:
        raise ConfigError("tensorize requires at least one record")
    covariate_names, cov_by_pid = covariates

    patient_ids = sorted(labels)
    feature_ids = sorted({r.feature_id for r in records})
    pidx = {p: i for i, p in enumerate(patient_ids)}
    fidx = {f: j for j, f in enumerate(feature_ids)}

    sums: dict[tuple[int, int, int], float] = {}
    counts: dict[tuple[int, int, int], int] = {}
    dropped = 0
    for rec in records:
        if rec.patient_id not in pidx:
            raise DataIntegrityError(
                f"patient {rec.patient_id!r} appears in records but has no label")
        t = int(rec.time // spec.bin_width)
        if t >= spec.horizon_bins:
            dropped += 1
            continue
        key = (pidx[rec.patient_id], fidx[rec.feature_id], t)
        sums[key] = sums.get(key, 0.0) + rec.value
        counts[key] = counts.get(key, 0) + 1
    if dropped:
        log.info("tensorize: dropped %d records at or beyond the %d-bin horizon",
                 dropped, spec.horizon_bins)

    cells = sorted(sums)
    entry_i = np.array([c[0] for c in cells], dtype=np.int64)
    entry_j = np.array([c[1] for c in cells], dtype=np.int64)
    entry_t = np.array([c[2] for c in cells], dtype=np.int64)
    entry_v = np.empty(len(cells), dtype=np.float64)
    for k, cell in enumerate(cells):
        if spec.aggregator_for(feature_ids[cell[1]]) == "sum":
            entry_v[k] = sums[cell]
        else:
            entry_v[k] = sums[cell] / counts[cell]

    n_cov = len(covariate_names)
    cov = np.zeros((len(patient_ids), n_cov), dtype=np.float64)
    for pid, i in pidx.items():
        row = cov_by_pid.get(pid)
        if row is None:
            raise DataIntegrityError(f"patient {pid!r} has a label but no covariates")
        if row.size != n_cov:
            raise DataIntegrityError(
                f"patient {pid!r} has {row.size} covariates, expected {n_cov}")
        cov[i] = row

    ds = TensorDataset(
        n_patients=len(patient_ids),
        n_features=len(feature_ids),
        n_bins=spec.horizon_bins,
        entry_i=entry_i, entry_j=entry_j, entry_t=entry_t, entry_v=entry_v,
        covariates=cov,
        covariate_names=list(covariate_names),
        labels=np.array([labels[p] for p in patient_ids], dtype=np.int64),
        patient_ids=patient_ids,
        feature_ids=feature_ids,
        dropped_records=dropped,
    )
    ds.validate()
    return ds


def fill_rate(ds: TensorDataset) -> float:
    """Fraction of tensor cells observed; 0.0 for a degenerate empty tensor."""
    total = ds.n_patients * ds.n_features * ds.n_bins
    if total == 0:
        return 0.0
    return ds.n_entries / total


def compute_norm_stats(ds: TensorDataset) -> NormStats:
    """Mean/std per feature over observed training-split entries only, plus
    train-split z-scoring statistics for each covariate column."""
    train_idx = ds.split_indices(TRAIN)
    in_train = np.isin(ds.entry_i, train_idx)
    fmean = np.zeros(ds.n_features)
    fstd = np.ones(ds.n_features)
    for j in range(ds.n_features):
        vals = ds.entry_v[in_train & (ds.entry_j == j)]
        if vals.size:
            fmean[j] = vals.mean()
            sd = vals.std()
            fstd[j] = sd if sd > 0 else 1.0
    cov = ds.covariates[train_idx]
    cmean = cov.mean(axis=0) if cov.size else np.zeros(ds.n_covariates)
    cstd = cov.std(axis=0) if cov.size else np.ones(ds.n_covariates)
    cstd = np.where(cstd > 0, cstd, 1.0)
    return NormStats(fmean, fstd, cmean, cstd)


def normalize(ds: TensorDataset, stats: NormStats) -> TensorDataset:
    """Standardize observed values and covariates; mask and labels untouched."""
    if stats.feature_mean.shape != (ds.n_features,):
        raise ConfigError(
            f"stats cover {stats.feature_mean.size} features, dataset has {ds.n_features}")
    if stats.covariate_mean.shape != (ds.n_covariates,):
        raise ConfigError(
            f"stats cover {stats.covariate_mean.size} covariates, "
            f"dataset has {ds.n_covariates}")
    values = (ds.entry_v - stats.feature_mean[ds.entry_j]) / stats.feature_std[ds.entry_j]
    cov = (ds.covariates - stats.covariate_mean) / stats.covariate_std
    return replace(ds, entry_v=values, covariates=cov)


def split(ds: TensorDataset, fractions: tuple[float, float, float],
          seed: int) -> TensorDataset:
    """Assign patients to train/val/test, stratified by label.

    Within each class, patients are shuffled with the seeded generator and
    apportioned by largest remainder, so per-split positive rates track the
    global rate whenever sizes permit. Deterministic given the seed.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    assignment = np.full(ds.n_patients, -1, dtype=np.int64)
    for cls in (0, 1):
        members = np.flatnonzero(ds.labels == cls)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        quotas = np.array([f * members.size for f in fractions])
        counts = np.floor(quotas).astype(np.int64)
        remainder = quotas - counts
        for k in np.argsort(-remainder)[: members.size - counts.sum()]:
            counts[k] += 1
        offsets = np.concatenate([[0], np.cumsum(counts)])
        for which in (TRAIN, VAL, TEST):
            assignment[members[offsets[which]:offsets[which + 1]]] = which
    for which in (TRAIN, VAL, TEST):
        if not (assignment == which).any():
            raise ConfigError(f"{SPLIT_NAMES[which]} split received zero patients")
    return replace(ds, split=assignment)
