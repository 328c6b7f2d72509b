"""Dataset container, CSV ingestion, and the three-way fold plan.

The fold plan splits the data into ``K`` folds and, for every fold ``k``,
designates two disjoint groups of companion folds: ``h1[k]`` (used to build
the rough initial estimate) and ``h2[k]`` (used to fit the localized,
estimand-dependent nuisances).  Keeping those groups disjoint is what makes
the localized nuisance a fixed function relative to the data it is trained
on.  Fold indices are 0-based throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    EmptyFile,
    InvalidKPrime,
    MissingColumn,
    NonBinaryTreatment,
    NonFiniteValue,
    TooFewRows,
)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ObservationTable:
    """Immutable rows of (covariates X, treatment T, outcome Y, optional instrument W)."""

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    instrument: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=np.float64)
        if x.ndim != 2:
            raise NonFiniteValue("covariates must be a 2-d matrix")
        t = np.asarray(self.treatment, dtype=np.float64)
        y = np.asarray(self.outcome, dtype=np.float64)
        if t.shape != (x.shape[0],) or y.shape != (x.shape[0],):
            raise NonFiniteValue("treatment/outcome length must match covariate rows")
        if not np.isfinite(x).all():
            raise NonFiniteValue("covariates contain non-finite values")
        if not np.isfinite(y).all():
            raise NonFiniteValue("outcomes contain non-finite values")
        if not np.isin(t, (0.0, 1.0)).all():
            raise NonBinaryTreatment("treatment entries must be exactly 0 or 1")
        object.__setattr__(self, "covariates", _readonly(x))
        object.__setattr__(self, "treatment", _readonly(t.astype(np.int8)))
        object.__setattr__(self, "outcome", _readonly(y))
        if self.instrument is not None:
            w = np.asarray(self.instrument, dtype=np.float64)
            if w.shape != (x.shape[0],):
                raise NonFiniteValue("instrument length must match covariate rows")
            if not np.isin(w, (0.0, 1.0)).all():
                raise NonBinaryTreatment("instrument entries must be exactly 0 or 1")
            object.__setattr__(self, "instrument", _readonly(w.astype(np.int8)))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def subset(self, idx: np.ndarray) -> "ObservationTable":
        w = None if self.instrument is None else self.instrument[idx]
        return ObservationTable(self.covariates[idx], self.treatment[idx], self.outcome[idx], w)


def load_csv(path, schema: dict) -> ObservationTable:
    """Read an observation table from a UTF-8, comma-separated, headed CSV.

    ``schema`` maps roles to column names: ``treatment`` and ``outcome`` are
    required, ``instrument`` is optional, and ``covariates`` is an optional
    list of column names (default: every remaining column, in file order).
    Numeric parsing is strict; treatment/instrument cells must be literal
    0/1.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path}: no header row")
        rows = [r for r in reader if r]
    if not rows:
        raise EmptyFile(f"{path}: no data rows")

    col = {name: i for i, name in enumerate(header)}
    for role in ("treatment", "outcome"):
        if role not in schema:
            raise MissingColumn(f"schema must name a {role} column")
        if schema[role] not in col:
            raise MissingColumn(f"{path}: column {schema[role]!r} not in header")
    instrument_name = schema.get("instrument")
    if instrument_name is not None and instrument_name not in col:
        raise MissingColumn(f"{path}: column {instrument_name!r} not in header")

    reserved = {schema["treatment"], schema["outcome"]}
    if instrument_name:
        reserved.add(instrument_name)
    cov_names = schema.get("covariates")
    if cov_names is None:
        cov_names = [c for c in header if c not in reserved]
    else:
        for c in cov_names:
            if c not in col:
                raise MissingColumn(f"{path}: covariate column {c!r} not in header")
    if not cov_names:
        raise MissingColumn(f"{path}: no covariate columns")

    def parse(cell: str, name: str, line: int) -> float:
        try:
            v = float(cell)
        except ValueError:
            raise NonFiniteValue(f"{path}:{line}: cannot parse {cell!r} in column {name!r}")
        if not math.isfinite(v):
            raise NonFiniteValue(f"{path}:{line}: non-finite value in column {name!r}")
        return v

    n = len(rows)
    x = np.empty((n, len(cov_names)))
    t = np.empty(n)
    y = np.empty(n)
    w = np.empty(n) if instrument_name else None
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise NonFiniteValue(f"{path}:{line}: expected {len(header)} cells, got {len(row)}")
        for j, c in enumerate(cov_names):
            x[i, j] = parse(row[col[c]], c, line)
        t[i] = parse(row[col[schema["treatment"]]], schema["treatment"], line)
        if t[i] not in (0.0, 1.0):
            raise NonBinaryTreatment(
                f"{path}:{line}: treatment value {t[i]!r} not in {{0, 1}}"
            )
        y[i] = parse(row[col[schema["outcome"]]], schema["outcome"], line)
        if w is not None:
            w[i] = parse(row[col[instrument_name]], instrument_name, line)
            if w[i] not in (0.0, 1.0):
                raise NonBinaryTreatment(
                    f"{path}:{line}: instrument value {w[i]!r} not in {{0, 1}}"
                )
    return ObservationTable(x, t, y, w)


@dataclass(frozen=True)
class FoldPlan:
    """K-fold partition plus, per fold, the two disjoint companion-fold groups."""

    K: int
    Kprime: int
    permutation: np.ndarray          # row indices in fold order
    fold_of: np.ndarray              # row index -> fold id
    h1: tuple                        # h1[k]: fold ids used for the initial estimate
    h2: tuple                        # h2[k]: fold ids used for localized nuisances
    seed: int
    fold_sizes: np.ndarray = field(repr=False, default=None)

    def fold_rows(self, k: int) -> np.ndarray:
        """Row indices of fold ``k``."""
        bounds = np.concatenate(([0], np.cumsum(self.fold_sizes)))
        return self.permutation[bounds[k]:bounds[k + 1]]

    def rows_of_folds(self, folds: Sequence[int]) -> np.ndarray:
        if len(folds) == 0:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([self.fold_rows(k) for k in folds])

    def same_partition(self, other: "FoldPlan") -> bool:
        return (
            self.K == other.K
            and self.Kprime == other.Kprime
            and np.array_equal(self.permutation, other.permutation)
        )


def _fold_sizes(n: int, K: int) -> np.ndarray:
    # fold k (1-based) holds permutation slots ceil((k-1)n/K)+1 .. ceil(kn/K)
    bounds = np.array([math.ceil(k * n / K) for k in range(K + 1)], dtype=np.int64)
    return np.diff(bounds)


def _companion_sets(K: int, Kprime: int, k: int) -> tuple:
    # 1-based formulas; k is 0-based here
    k1 = k + 1
    cut = Kprime + (1 if k1 <= Kprime else 0)
    h1 = tuple(j - 1 for j in range(1, cut + 1) if j != k1)
    h2 = tuple(j - 1 for j in range(cut + 1, K + 1) if j != k1)
    return h1, h2


def _stratified_permutation(rng: np.random.Generator, flags: np.ndarray,
                            sizes: np.ndarray) -> np.ndarray:
    """Permutation whose contiguous folds each hold a quota share of flagged rows.

    Quotas follow the largest-remainder rule, so each fold's flagged count
    deviates from its proportional share by less than one unit.
    """
    n = len(flags)
    ones = np.flatnonzero(flags == 1)
    zeros = np.flatnonzero(flags == 0)
    rng.shuffle(ones)
    rng.shuffle(zeros)
    quota = sizes * (len(ones) / n)
    take = np.floor(quota).astype(np.int64)
    rem = len(ones) - take.sum()
    if rem > 0:
        order = np.argsort(-(quota - take), kind="stable")
        for k in order[:rem]:
            take[k] += 1
    perm = np.empty(n, dtype=np.int64)
    pos = o = z = 0
    for k, size in enumerate(sizes):
        t_k = int(take[k])
        block = np.concatenate((ones[o:o + t_k], zeros[z:z + size - t_k]))
        o += t_k
        z += size - t_k
        rng.shuffle(block)
        perm[pos:pos + size] = block
        pos += size
    return perm


def make_fold_plan(n: int, K: int, Kprime: int, seed: int,
                   stratify: Optional[np.ndarray] = None) -> FoldPlan:
    """Build the randomized three-way fold plan.

    With ``stratify`` given (0/1 flags, typically the treatment column) the
    permutation interleaves the two groups so every fold's flagged share
    deviates from the global share by at most one unit.
    """
    if Kprime < 1 or Kprime > K - 2:
        raise InvalidKPrime(f"need 1 <= K' <= K-2, got K={K}, K'={Kprime}")
    if n < K:
        raise TooFewRows(f"need n >= K, got n={n}, K={K}")
    rng = np.random.default_rng(seed)
    sizes = _fold_sizes(n, K)
    if stratify is not None:
        flags = np.asarray(stratify).astype(np.int8)
        if flags.shape != (n,):
            raise TooFewRows(f"stratify flags must have length {n}")
        perm = _stratified_permutation(rng, flags, sizes)
    else:
        perm = rng.permutation(n).astype(np.int64)
    fold_of = np.empty(n, dtype=np.int64)
    bounds = np.concatenate(([0], np.cumsum(sizes)))
    for k in range(K):
        fold_of[perm[bounds[k]:bounds[k + 1]]] = k
    pairs = [_companion_sets(K, Kprime, k) for k in range(K)]
    return FoldPlan(
        K=K,
        Kprime=Kprime,
        permutation=_readonly(perm),
        fold_of=_readonly(fold_of),
        h1=tuple(p[0] for p in pairs),
        h2=tuple(p[1] for p in pairs),
        seed=seed,
        fold_sizes=_readonly(sizes),
    )
