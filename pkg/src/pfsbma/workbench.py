"""Data ingestion, simulated designs and the prediction metric.

The simulated design has unit-variance normal predictors whose correlation
decays linearly with index distance and vanishes beyond 20:
``corr(X_i, X_j) = (1 - 0.05|i - j|) * 1{|i - j| <= 20}``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import cholesky, toeplitz

from .bayes import RegressionData
from .errors import DataError, DomainError

log = logging.getLogger(__name__)

# 1-based predictor labels and coefficients of the two simulated responses
VARIANTS = {
    "ex3": ((2, 30, 58, 75, 97), (3.0, -3.0, 3.0, -3.0, 3.0)),
    "ex4": ((120, 280, 400, 560, 807), (3.0, -3.0, 3.0, -3.0, 3.0)),
}
INTERCEPT = 10.0
NOISE_SD = 10.0


@dataclass(frozen=True)
class Dataset:
    """Raw design and response with column names.

    ``regression`` is the centered view used for Bayes factors; the raw
    means it subtracts are kept there as ``x_mean`` and ``y_mean``.
    """

    X: np.ndarray
    y: np.ndarray
    names: tuple
    response: str = "y"
    regression: RegressionData = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.size:
            raise DataError(f"design has shape {X.shape} but response has {y.size} rows")
        if len(self.names) != X.shape[1]:
            raise DataError("number of names does not match number of columns")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("data contain non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "regression", RegressionData(X, y))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows], self.names, self.response)


def read_table(path: Union[str, Path]):
    """Header and numeric body of a CSV file.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        seen = set()
        for col, name in enumerate(header):
            if not name:
                raise DataError("empty column name", row=1, column=col + 1)
            if name in seen:
                raise DataError(f"duplicate column name {name!r}", row=1, column=name)
            seen.add(name)
        rows = []
        for rownum, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise DataError(f"expected {len(header)} fields, found {len(raw)}", row=rownum)
            vals = []
            for name, cell in zip(header, raw):
                cell = cell.strip()
                if not cell:
                    raise DataError("missing value", row=rownum, column=name)
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"non-numeric value {cell!r}", row=rownum, column=name) from None
                if not math.isfinite(v):
                    raise DataError(f"non-finite value {cell!r}", row=rownum, column=name)
                vals.append(v)
            rows.append(vals)
    table = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, table


def load_csv(path: Union[str, Path], response: Union[str, int, None] = None) -> Dataset:
    """Read a numeric CSV with a header row.

    ``response`` is a column name or a 0-based column index; the last column
    is used when it is omitted.  Every other column becomes a predictor.
    """
    header, table = read_table(path)
    if table.shape[0] < 3:
        raise DataError(f"{path} has {table.shape[0]} data rows; at least 3 are needed")
    col = _response_column(header, response)
    keep = [c for c in range(len(header)) if c != col]
    return Dataset(table[:, keep], table[:, col], tuple(header[c] for c in keep), header[col])


def load_rows(path: Union[str, Path], names: Sequence[str], response: Optional[str] = None):
    """Predictor rows (by column name) and, if present, the response of a CSV file."""
    header, table = read_table(path)
    if table.shape[0] == 0:
        raise DataError(f"{path} has no data rows")
    missing = [nm for nm in names if nm not in header]
    if missing:
        raise DataError(f"{path} lacks predictor column {missing[0]!r}", row=1)
    X = table[:, [header.index(nm) for nm in names]]
    y = table[:, header.index(response)] if response is not None and response in header else None
    return X, y


def _response_column(header, response) -> int:
    if response is None:
        return len(header) - 1
    if isinstance(response, int) or (isinstance(response, str) and response.isdigit()
                                     and response not in header):
        col = int(response)
        if not 0 <= col < len(header):
            raise DataError(f"response column index {col} out of range")
        return col
    if response not in header:
        raise DataError(f"no column named {response!r}")
    return header.index(response)


def write_csv(path: Union[str, Path], X: np.ndarray, y: Optional[np.ndarray] = None,
              names: Optional[Sequence[str]] = None, response: str = "y") -> None:
    X = np.asarray(X, dtype=float)
    names = list(names) if names is not None else [f"X{j + 1}" for j in range(X.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ([response] if y is not None else []))
        for i in range(X.shape[0]):
            row = [fmt(v) for v in X[i]]
            if y is not None:
                row.append(fmt(y[i]))
            w.writerow(row)


def fmt(v: float) -> str:
    """Ten significant digits, the format used in every output file."""
    return f"{float(v):.10g}"


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_test: int
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 3 or self.n_test < 1:
            raise DomainError("need at least 3 training rows and 1 test row")

    def split(self, n: int, p: Optional[int] = None):
        """Disjoint random (train, test) row indices."""
        if self.n_train + self.n_test > n:
            raise DomainError(f"split of {self.n_train}+{self.n_test} rows exceeds n={n}")
        if p is not None and self.n_train < p + 2:
            log.warning("training set of %d rows is small for %d predictors", self.n_train, p)
        perm = np.random.default_rng(self.seed).permutation(n)
        return np.sort(perm[:self.n_train]), np.sort(perm[self.n_train:self.n_train + self.n_test])


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def banded_correlation(p: int, band: int = 20, step: float = 0.05) -> np.ndarray:
    lag = np.arange(p)
    col = np.where(lag <= band, 1.0 - step * lag, 0.0)
    return toeplitz(col)


def simulate_design(n: int, p: int, seed: int) -> np.ndarray:
    """``n`` draws from the banded-correlation normal design."""
    if n < 1 or p < 1:
        raise DomainError("n and p must be positive")
    corr = banded_correlation(p)
    try:
        upper = cholesky(corr, lower=False)
    except np.linalg.LinAlgError:
        raise DomainError(f"banded correlation is not positive definite at p={p}") from None
    Z = np.random.default_rng(seed).standard_normal((n, p))
    return Z @ upper


def simulate_response(X: np.ndarray, variant: str = "ex3", seed: int = 0,
                      indices: Optional[Sequence[int]] = None, coefs: Optional[Sequence[float]] = None,
                      noise_sd: float = NOISE_SD, intercept: float = INTERCEPT) -> np.ndarray:
    """Linear signal plus normal noise.

    ``indices`` are 1-based labels; when given they replace the variant's
    index set (coefficients default to the alternating ``+3, -3, ...``).
    """
    X = np.asarray(X, dtype=float)
    if indices is None:
        if variant not in VARIANTS:
            raise DomainError(f"unknown response variant {variant!r}")
        indices, default = VARIANTS[variant]
        coefs = default if coefs is None else coefs
    idx = np.asarray(indices, dtype=np.int64)
    if coefs is None:
        coefs = [3.0 * (-1) ** i for i in range(idx.size)]
    coefs = np.asarray(coefs, dtype=float)
    if coefs.shape != idx.shape:
        raise DomainError("indices and coefficients differ in length")
    if idx.size and (idx.min() < 1 or idx.max() > X.shape[1]):
        raise DomainError(f"signal index {int(idx.max())} needs p >= {int(idx.max())}, got {X.shape[1]}")
    if noise_sd < 0:
        raise DomainError("noise SD must be nonnegative")
    signal = intercept + X[:, idx - 1] @ coefs
    cov = banded_correlation(X.shape[1])[np.ix_(idx - 1, idx - 1)]
    log.info("signal variance / noise variance = %.3f",
             float(coefs @ cov @ coefs) / noise_sd ** 2 if noise_sd > 0 else np.inf)
    noise = np.random.default_rng(seed).standard_normal(X.shape[0]) * noise_sd
    return signal + noise


def simulate_dataset(n: int, p: int, seed: int, variant: str = "ex3", **kwargs) -> Dataset:
    """Design and response drawn from independent streams of one seed."""
    ds, rs = np.random.SeedSequence(seed).spawn(2)
    X = simulate_design(n, p, int(ds.generate_state(1)[0]))
    y = simulate_response(X, variant, int(rs.generate_state(1)[0]), **kwargs)
    return Dataset(X, y, tuple(f"X{j + 1}" for j in range(p)))


def ase(predictions, truths) -> float:
    """Average squared prediction error."""
    a = np.asarray(predictions, dtype=float).ravel()
    b = np.asarray(truths, dtype=float).ravel()
    if a.size != b.size or a.size == 0:
        raise DomainError("predictions and truths must have the same nonzero length")
    return float(np.mean((a - b) ** 2))
