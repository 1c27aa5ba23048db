"""Observation storage, validation, CSV ingestion and train/test splitting."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "Dataset",
    "DataSplit",
    "DatasetError",
    "validate",
    "load_dataset",
    "save_dataset",
    "split_train_test",
]

_COVARIATE_RE = re.compile(r"^x_(\d+)$")
MAX_SPLIT_RETRIES = 100


class DatasetError(ValueError):
    """Raised for malformed input data or degenerate splits."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """n observations of (X, Z, A, Y), optionally with the simulated oracle CATE.

    Arrays are copied on construction and frozen, so a Dataset can be shared
    freely between readers.
    """

    covariates: np.ndarray
    instrument: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    oracle_cate: Optional[np.ndarray] = None

    def __post_init__(self):
        _coerce(self)
        problem = validate(self)
        if problem is not None:
            raise DatasetError(problem)

    @classmethod
    def unchecked(cls, covariates, instrument, treatment, outcome, oracle_cate=None) -> "Dataset":
        """Build without running the invariant checks (for validation tests)."""
        d = object.__new__(cls)
        object.__setattr__(d, "covariates", covariates)
        object.__setattr__(d, "instrument", instrument)
        object.__setattr__(d, "treatment", treatment)
        object.__setattr__(d, "outcome", outcome)
        object.__setattr__(d, "oracle_cate", oracle_cate)
        _coerce(d)
        return d

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        tau = None if self.oracle_cate is None else self.oracle_cate[idx]
        return Dataset(
            self.covariates[idx], self.instrument[idx], self.treatment[idx], self.outcome[idx], tau
        )


def _frozen(a, dtype, ndim) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    arr.setflags(write=False)
    return arr


def _coerce(d: Dataset) -> None:
    object.__setattr__(d, "covariates", _frozen(d.covariates, float, 2))
    for name in ("instrument", "treatment", "outcome"):
        object.__setattr__(d, name, _frozen(getattr(d, name), float, 1))
    if d.oracle_cate is not None:
        object.__setattr__(d, "oracle_cate", _frozen(d.oracle_cate, float, 1))


def validate(d: Dataset) -> Optional[str]:
    """Return the first violated invariant as a message, or None if the data are valid."""
    if d.covariates.ndim != 2:
        return "covariates must be a 2-D matrix"
    n = d.covariates.shape[0]
    vectors = [("instrument", d.instrument), ("treatment", d.treatment), ("outcome", d.outcome)]
    if d.oracle_cate is not None:
        vectors.append(("oracle_cate", d.oracle_cate))
    for name, v in vectors:
        if v.ndim != 1 or v.shape[0] != n:
            return f"length mismatch: {name} has {v.shape[0]} entries, covariates have {n} rows"
    if n < 2:
        return f"need at least 2 observations, got {n}"
    if not np.all(np.isfinite(d.covariates)):
        return "non-finite value in covariates"
    for name, v in vectors:
        if not np.all(np.isfinite(v)):
            return f"non-finite value in {name}"
    for name, v in vectors[:2]:
        bad = np.flatnonzero((v != 0) & (v != 1))
        if bad.size:
            return f"non-binary {name} at row {bad[0]}"
    if np.all(d.instrument == 1) or np.all(d.instrument == 0):
        return "instrument arm empty"
    return None


def load_dataset(path, has_oracle: Optional[bool] = None) -> Dataset:
    """Read a CSV with header ``x_1..x_p,z,a,y[,tau]``.

    ``has_oracle=None`` accepts the ``tau`` column if present; True requires
    it, False ignores it. Row numbers in error messages are 0-based data rows.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    cov_cols = sorted(
        ((int(m.group(1)), i) for i, h in enumerate(header) if (m := _COVARIATE_RE.match(h))),
    )
    if not cov_cols:
        raise DatasetError("missing column: no covariate columns x_1..x_p")
    if [k for k, _ in cov_cols] != list(range(1, len(cov_cols) + 1)):
        raise DatasetError("missing column: covariates must be numbered x_1..x_p without gaps")
    for name in ("z", "a", "y"):
        if name not in header:
            raise DatasetError(f"missing column `{name}`")
    if has_oracle and "tau" not in header:
        raise DatasetError("missing column `tau`")
    known = {h for h in header if _COVARIATE_RE.match(h)} | {"z", "a", "y", "tau"}
    extra = [h for h in header if h not in known]
    if extra:
        raise DatasetError(f"unknown column(s): {', '.join(extra)}")
    use_tau = "tau" in header and has_oracle is not False

    cols = [i for _, i in cov_cols] + [header.index(c) for c in ("z", "a", "y")]
    if use_tau:
        cols.append(header.index("tau"))
    values = np.empty((len(rows), len(cols)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DatasetError(f"parse failure at row {r}: expected {len(header)} fields, got {len(row)}")
        for j, c in enumerate(cols):
            try:
                values[r, j] = float(row[c])
            except ValueError:
                raise DatasetError(f"parse failure at row {r}: {row[c]!r} in column {header[c]}") from None
    p = len(cov_cols)
    for r in range(len(rows)):
        if not np.all(np.isfinite(values[r])):
            raise DatasetError(f"non-finite number at row {r}")
        if values[r, p] not in (0.0, 1.0):
            raise DatasetError(f"non-binary instrument at row {r}")
        if values[r, p + 1] not in (0.0, 1.0):
            raise DatasetError(f"non-binary treatment at row {r}")
    return Dataset(
        values[:, :p],
        values[:, p],
        values[:, p + 1],
        values[:, p + 2],
        values[:, p + 3] if use_tau else None,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(d: Dataset, path) -> None:
    """Write ``d`` in the loader's CSV schema (shortest round-trip float repr)."""
    header = [f"x_{j + 1}" for j in range(d.p)] + ["z", "a", "y"]
    if d.oracle_cate is not None:
        header.append("tau")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(d.n):
            row = [_fmt(v) for v in d.covariates[i]]
            row += [str(int(d.instrument[i])), str(int(d.treatment[i])), _fmt(d.outcome[i])]
            if d.oracle_cate is not None:
                row.append(_fmt(d.oracle_cate[i]))
            w.writerow(row)


@dataclass(frozen=True, eq=False)
class DataSplit:
    train_indices: np.ndarray
    test_indices: np.ndarray

    def __post_init__(self):
        for name in ("train_indices", "test_indices"):
            arr = np.array(getattr(self, name), dtype=np.intp)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def split_train_test(d: Dataset, test_fraction: float, seed: int) -> DataSplit:
    """Random split with ``round(n * test_fraction)`` test rows.

    The training part must contain both instrument arms; the permutation is
    re-drawn up to 100 times before giving up.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = d.n
    n_test = int(math.floor(n * test_fraction + 0.5))
    if n_test < 1 or n - n_test < 1:
        raise DatasetError(f"degenerate split: n={n}, test_fraction={test_fraction}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_SPLIT_RETRIES):
        perm = rng.permutation(n)
        train, test = np.sort(perm[n_test:]), np.sort(perm[:n_test])
        z = d.instrument[train]
        if z.min() == 0 and z.max() == 1:
            return DataSplit(train, test)
    raise DatasetError(f"degenerate split: an instrument arm is empty in train after {MAX_SPLIT_RETRIES} draws")

