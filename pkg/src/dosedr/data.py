"""Observational data model, CSV ingestion and fold splitting.

A :class:`Dataset` holds covariates ``V``, surrogates ``S``, treatment ``A``,
a partially missing outcome ``Y`` (``NaN`` where missing) and the label
indicator ``R``. Arrays are made read-only on construction so a dataset can
be shared between workers.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

MISSING_TOKENS = ("", "NA")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def _as_2d(arr, n: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None] if arr.size else np.zeros((n, 0))
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of ``(V, S, A, Y, R)``.

    Parameters
    ----------
    V : ndarray of shape (n, p)
        Pre-treatment covariates.
    S : ndarray of shape (n, q)
        Surrogate outcomes; ``q`` may be 0.
    A : ndarray of shape (n,)
        Continuous treatment.
    Y : ndarray of shape (n,)
        Primary outcome with ``NaN`` marking missing entries.
    R : ndarray of shape (n,), optional
        Label indicator. Inferred from ``Y`` when omitted.
    """

    V: np.ndarray
    S: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    R: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    surrogate_names: tuple[str, ...] = ()
    treatment_name: str = "A"
    outcome_name: str = "Y"
    label_name: str | None = None

    def __post_init__(self):
        A = _frozen(np.ravel(self.A))
        n = A.shape[0]
        V = _frozen(_as_2d(self.V, n))
        S = _frozen(_as_2d(self.S, n))
        Y = _frozen(np.ravel(self.Y))
        if V.shape[0] != n or S.shape[0] != n or Y.shape[0] != n:
            raise DataError("V, S, A and Y must have the same number of rows")
        present = ~np.isnan(Y)
        if self.R is None:
            R = present.astype(np.int8)
        else:
            R = np.ravel(np.asarray(self.R))
            if R.shape[0] != n:
                raise DataError("R must have one entry per row")
            if not np.all((R == 0) | (R == 1)):
                raise DataError("R must be binary")
            R = R.astype(np.int8)
            bad = np.flatnonzero((R == 1) != present)
            if bad.size:
                i = int(bad[0])
                kind = "labeled row has missing outcome" if R[i] == 1 else "unlabeled row has an outcome"
                raise DataError(f"R/Y inconsistency: {kind}", row=i + 1, column=self.outcome_name)
        R.setflags(write=False)
        p, q = V.shape[1], S.shape[1]
        cov_names = tuple(self.covariate_names) or tuple(f"V{j + 1}" for j in range(p))
        sur_names = tuple(self.surrogate_names) or tuple(f"S{j + 1}" for j in range(q))
        if len(cov_names) != p or len(sur_names) != q:
            raise DataError("column name count does not match array width")
        for name, value in [("V", V), ("S", S), ("A", A), ("Y", Y), ("R", R),
                            ("covariate_names", cov_names), ("surrogate_names", sur_names)]:
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.V.shape[1]

    @property
    def q(self) -> int:
        return self.S.shape[1]

    @property
    def n_labeled(self) -> int:
        return int(self.R.sum())

    @cached_property
    def X(self) -> np.ndarray:
        """Covariates and surrogates side by side, ``(V, S)``."""
        X = np.hstack([self.V, self.S])
        X.setflags(write=False)
        return X

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return Dataset(self.V[idx], self.S[idx], self.A[idx], self.Y[idx], self.R[idx],
                       self.covariate_names, self.surrogate_names,
                       self.treatment_name, self.outcome_name, self.label_name)

    def labeled(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.R == 1))

    def without_surrogates(self) -> "Dataset":
        return Dataset(self.V, np.zeros((self.n, 0)), self.A, self.Y, self.R,
                       self.covariate_names, (), self.treatment_name,
                       self.outcome_name, self.label_name)

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality of arrays (NaN == NaN) and column names."""
        same_arrays = all(
            np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
            for k in ("V", "S", "A", "Y", "R")
        )
        same_names = (self.covariate_names, self.surrogate_names, self.treatment_name,
                      self.outcome_name) == (other.covariate_names, other.surrogate_names,
                                             other.treatment_name, other.outcome_name)
        return same_arrays and same_names


@dataclass(frozen=True)
class ColumnRoles:
    """Maps CSV columns onto dataset roles."""

    treatment: str
    outcome: str
    covariates: tuple[str, ...]
    surrogates: tuple[str, ...] = ()
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "surrogates", tuple(self.surrogates))
        if not self.covariates:
            raise DataError("at least one covariate column is required")
        names = [self.treatment, self.outcome, *self.covariates, *self.surrogates]
        if self.label is not None:
            names.append(self.label)
        dup = {c for c in names if names.count(c) > 1}
        if dup:
            raise DataError(f"column assigned to more than one role: {sorted(dup)}")


def _parse_float(token: str, row: int, column: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"cannot parse {token!r} as a number", row=row, column=column) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value {token!r}", row=row, column=column)
    return value


def load_csv(path: str | Path, schema: ColumnRoles) -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    Outcome cells that are empty or ``NA`` mark a missing outcome. When the
    schema has no label column, ``R`` is inferred from outcome missingness.
    Any missing or malformed covariate, surrogate or treatment cell raises
    :class:`~dosedr.errors.DataError` naming the row and column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty; a header row is required") from None
        col = {name: j for j, name in enumerate(header)}
        required = [schema.treatment, schema.outcome, *schema.covariates, *schema.surrogates]
        if schema.label is not None:
            required.append(schema.label)
        for name in required:
            if name not in col:
                raise DataError(f"column {name!r} not found in header of {path}", column=name)

        V, S, A, Y, R = [], [], [], [], []
        for r, cells in enumerate(reader, start=1):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) < len(header):
                raise DataError("row has fewer cells than the header", row=r)

            def num(name):
                token = cells[col[name]].strip()
                if token in MISSING_TOKENS:
                    raise DataError("missing value", row=r, column=name)
                return _parse_float(token, r, name)

            A.append(num(schema.treatment))
            V.append([num(c) for c in schema.covariates])
            S.append([num(c) for c in schema.surrogates])
            token = cells[col[schema.outcome]].strip()
            Y.append(math.nan if token in MISSING_TOKENS else _parse_float(token, r, schema.outcome))
            if schema.label is not None:
                token = cells[col[schema.label]].strip()
                if token not in ("0", "1"):
                    raise DataError(f"label must be 0 or 1, got {token!r}", row=r, column=schema.label)
                R.append(int(token))

    n = len(A)
    return Dataset(
        V=np.asarray(V, dtype=float).reshape(n, len(schema.covariates)),
        S=np.asarray(S, dtype=float).reshape(n, len(schema.surrogates)),
        A=np.asarray(A, dtype=float),
        Y=np.asarray(Y, dtype=float),
        R=np.asarray(R) if schema.label is not None else None,
        covariate_names=schema.covariates,
        surrogate_names=schema.surrogates,
        treatment_name=schema.treatment,
        outcome_name=schema.outcome,
        label_name=schema.label,
    )


def save_csv(data: Dataset, path: str | Path, label: str | None = None) -> ColumnRoles:
    """Write ``data`` as CSV and return the schema that reads it back.

    Floats are written with ``repr`` so a load round-trip is bit-exact.
    Missing outcomes are written as empty cells.
    """
    label = label or data.label_name
    header = [data.treatment_name, data.outcome_name, *data.covariate_names, *data.surrogate_names]
    if label is not None:
        header.append(label)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            y = data.Y[i]
            row = [repr(float(data.A[i])), "" if np.isnan(y) else repr(float(y))]
            row += [repr(float(v)) for v in data.V[i]]
            row += [repr(float(s)) for s in data.S[i]]
            if label is not None:
                row.append(str(int(data.R[i])))
            w.writerow(row)
    return ColumnRoles(data.treatment_name, data.outcome_name, data.covariate_names,
                       data.surrogate_names, label)


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold id per row (``0..k-1``); for ``k=3`` the ids stand for D1, D2, T."""

    folds: np.ndarray
    seed: int
    k: int

    def indices(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.folds == j)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.folds == j)) for j in range(self.k)]


def split_folds(data: Dataset | int, seed: int, k: int = 3) -> FoldAssignment:
    """Random balanced partition of the rows into ``k`` folds.

    The rows are shuffled with a generator seeded by ``seed`` and cut into
    contiguous blocks; the first ``n % k`` blocks get one extra row.
    """
    n = data if isinstance(data, (int, np.integer)) else data.n
    if k not in (2, 3):
        raise ValueError("k must be 2 or 3")
    if n < k:
        raise DataError(f"need at least {k} rows to make {k} folds, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds = np.empty(n, dtype=np.int8)
    start = 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        folds[perm[start:start + size]] = j
        start += size
    folds.setflags(write=False)
    return FoldAssignment(folds, int(seed), k)


@dataclass
class ValidationReport:
    n: int
    n_labeled: int
    n_unlabeled: int
    p: int
    q: int
    treatment_min: float
    treatment_max: float
    label_rate: float
    flags: list[str] = field(default_factory=list)

    @property
    def fatal(self) -> bool:
        return bool(self.flags)

    def raise_if_fatal(self) -> None:
        if self.fatal:
            raise DataError("dataset not usable for estimation: " + "; ".join(self.flags))


def validate(data: Dataset) -> ValidationReport:
    """Summarize a dataset and flag conditions that block estimation."""
    n = data.n
    n1 = data.n_labeled if n else 0
    flags = []
    if n == 0:
        flags.append("empty dataset")
    elif n1 == 0:
        flags.append("no labeled rows")
    present_y = data.Y[~np.isnan(data.Y)]
    finite = all(np.all(np.isfinite(arr)) for arr in (data.V, data.S, data.A, present_y))
    if not finite:
        flags.append("non-finite values")
    return ValidationReport(
        n=n,
        n_labeled=n1,
        n_unlabeled=n - n1,
        p=data.p,
        q=data.q,
        treatment_min=float(np.min(data.A)) if n else math.nan,
        treatment_max=float(np.max(data.A)) if n else math.nan,
        label_rate=n1 / n if n else math.nan,
        flags=flags,
    )


def empty_dataset(p: int = 1, q: int = 0) -> Dataset:
    return Dataset(np.zeros((0, p)), np.zeros((0, q)), np.zeros(0), np.zeros(0))


def names_to_indices(names: Sequence[str], pool: Sequence[str]) -> tuple[int, ...]:
    out = []
    for nm in names:
        if nm not in pool:
            raise DataError(f"unknown covariate {nm!r}")
        out.append(list(pool).index(nm))
    return tuple(out)
