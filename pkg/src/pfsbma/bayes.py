"""Bayes factors against the null model under g and hyper-g coefficient priors.

Everything is computed in log space.  ``RegressionState`` carries the
Cholesky factor of one model's Gram matrix so a forward path can be
extended one column at a time.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.linalg import solve_triangular
from scipy.special import betainc, betaln, gammaln

from .errors import CollinearityError, DomainError
from .models import ModelVector, combinations_array

PIVOT_TOL = 1e-10
R2_CEILING = 1.0 - 1e-12


@dataclass(frozen=True)
class RegressionData:
    """Centered design and response.

    Parameters
    ----------
    X : ndarray, shape (n, p)
        Design matrix; columns are centered on construction.
    y : ndarray, shape (n,)
        Response; centered on construction.
    """

    X: np.ndarray
    y: np.ndarray
    x_mean: np.ndarray = field(init=False, repr=False, compare=False)
    y_mean: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2:
            raise DomainError("X must be a matrix")
        if X.shape[0] != y.size:
            raise DomainError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if y.size < 3:
            raise DomainError("need at least 3 observations")
        object.__setattr__(self, "x_mean", X.mean(axis=0))
        object.__setattr__(self, "y_mean", float(y.mean()))
        object.__setattr__(self, "X", X - self.x_mean)
        object.__setattr__(self, "y", y - self.y_mean)
        self.X.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def ssy(self) -> float:
        return float(self.y @ self.y)

    @cached_property
    def gram(self) -> np.ndarray:
        return self.X.T @ self.X

    @cached_property
    def xty(self) -> np.ndarray:
        return self.X.T @ self.y

    @cached_property
    def column_floor(self) -> np.ndarray:
        """Smallest admissible squared pivot for each column."""
        diag = np.diag(self.gram)
        scale = max(float(diag.max()) if diag.size else 0.0, 1.0)
        return np.maximum(PIVOT_TOL * diag, 1e-14 * scale)

    def default_max_size(self) -> int:
        return min(self.p, self.n - 2)


@dataclass(frozen=True)
class CoefficientPrior:
    """Zellner g-prior (``kind="g"``) or hyper-g prior (``kind="hyper-g"``)."""

    kind: str
    g: Optional[float] = None
    a: Optional[float] = None

    def __post_init__(self):
        if self.kind == "g":
            if self.g is None or not self.g > 0:
                raise DomainError("g-prior needs g > 0")
        elif self.kind == "hyper-g":
            if self.a is None or not self.a > 2:
                raise DomainError("hyper-g prior needs a > 2")
        else:
            raise DomainError(f"unknown coefficient prior {self.kind!r}")

    @classmethod
    def g_prior(cls, g: float) -> "CoefficientPrior":
        return cls("g", g=float(g))

    @classmethod
    def hyper_g(cls, a: float = 3.0) -> "CoefficientPrior":
        return cls("hyper-g", a=float(a))

    def describe(self) -> dict:
        return {"kind": self.kind, "g": self.g} if self.kind == "g" else {"kind": self.kind, "a": self.a}


@dataclass(frozen=True)
class RegressionState:
    """Least-squares summary of one model, extendable one column at a time.

    ``factor`` is the lower Cholesky factor of the Gram matrix of the
    included columns taken in ``columns`` order (the order they were added);
    ``z`` solves ``factor @ z = X_colsᵀ y``.
    """

    model: ModelVector
    columns: tuple
    factor: np.ndarray
    z: np.ndarray
    rss: float
    ssy: float

    @property
    def r2(self) -> float:
        if self.ssy <= 0:
            return 0.0
        return min(max(1.0 - self.rss / self.ssy, 0.0), R2_CEILING)

    @property
    def size(self) -> int:
        return len(self.columns)

    def coefficients(self) -> np.ndarray:
        """OLS slopes on the centered columns as a length-``p`` vector."""
        beta = np.zeros(self.model.p)
        if self.columns:
            beta[list(self.columns)] = solve_triangular(self.factor, self.z, lower=True, trans="T")
        return beta


def null_state(data: RegressionData) -> RegressionState:
    return RegressionState(ModelVector.null(data.p), (), np.zeros((0, 0)), np.zeros(0),
                           data.ssy, data.ssy)


def extend_state(state: RegressionState, j: int, data: RegressionData) -> RegressionState:
    """Append column ``j`` to the factor; the input state is left untouched.

    Raises
    ------
    CollinearityError
        If the new squared pivot falls below ``1e-10`` times the column's
        squared norm.
    """
    if not 0 <= j < data.p:
        raise DomainError(f"predictor index {j} out of range for p={data.p}")
    if j in state.model:
        raise DomainError(f"predictor {j} is already in the model")
    if state.size >= data.default_max_size():
        raise DomainError("model is already at its maximum size")
    idx = list(state.columns)
    row = solve_triangular(state.factor, data.gram[idx, j], lower=True) if idx else np.zeros(0)
    pivot2 = data.gram[j, j] - row @ row
    if pivot2 < data.column_floor[j]:
        raise CollinearityError(j)
    pivot = math.sqrt(pivot2)
    k = len(idx)
    factor = np.zeros((k + 1, k + 1))
    factor[:k, :k] = state.factor
    factor[k, :k] = row
    factor[k, k] = pivot
    zj = (data.xty[j] - row @ state.z) / pivot
    return RegressionState(state.model.add(j), (*state.columns, j), factor,
                           np.append(state.z, zj), state.rss - zj * zj, state.ssy)


def state_from_scratch(model: ModelVector, data: RegressionData) -> RegressionState:
    """Build the state by adding the model's columns in increasing index order."""
    state = null_state(data)
    for j in model.indices():
        state = extend_state(state, j, data)
    return state


# ---------------------------------------------------------------------------
# Bayes factor formulas
# ---------------------------------------------------------------------------


def log_bf0_g_from_r2(r2, size, n: int, g: float):
    r2 = np.clip(r2, 0.0, R2_CEILING)
    return 0.5 * (n - 1 - size) * np.log1p(g) - 0.5 * (n - 1) * np.log1p(g * (1.0 - r2))


def log_bf0_g(state: RegressionState, n: int, g: float) -> float:
    """Log Bayes factor of ``state.model`` versus the null under a g-prior."""
    if not g > 0:
        raise DomainError("g must be positive")
    if state.size == 0:
        return 0.0
    return float(log_bf0_g_from_r2(state.r2, state.size, n, g))


def _log_euler_integral(a, b, c, z):
    """log of ∫_0^1 t^(b-1) (1-t)^(c-b-1) (1-tz)^(-a) dt by adaptive quadrature.

    The endpoint singularities are handled with algebraic weights.  For ``z``
    near one the mass piles up within ``(1-z)/z`` of ``t = 1``, so the
    interval is split there.
    """
    # scaled so the smooth factor is at most one (no overflow for large a)
    log_scale = -a * math.log1p(-z)

    def smooth(t):
        return math.exp(-a * math.log1p(-t * z) - log_scale)

    width = (1.0 - z) / z
    cuts = sorted({1.0 - k * width for k in (1000.0, 100.0, 10.0, 1.0) if 1.0 - k * width > 0.0})
    edges = [0.0, *cuts, 1.0]
    opts = dict(epsabs=0.0, epsrel=1e-12, limit=200)
    total = 0.0
    last = len(edges) - 2
    for i, (lo, hi) in enumerate(zip(edges, edges[1:])):
        if i == 0 and i == last:
            val, _ = integrate.quad(smooth, lo, hi, weight="alg", wvar=(b - 1.0, c - b - 1.0), **opts)
        elif i == 0:
            val, _ = integrate.quad(lambda t: smooth(t) * (1.0 - t) ** (c - b - 1.0), lo, hi,
                                    weight="alg", wvar=(b - 1.0, 0.0), **opts)
        elif i == last:
            val, _ = integrate.quad(lambda t: smooth(t) * t ** (b - 1.0), lo, hi,
                                    weight="alg", wvar=(0.0, c - b - 1.0), **opts)
        else:
            val, _ = integrate.quad(lambda t: smooth(t) * t ** (b - 1.0) * (1.0 - t) ** (c - b - 1.0),
                                    lo, hi, **opts)
        total += val
    return math.log(total) + log_scale


def log_gauss_2f1(a: float, b: float, c: float, z: float) -> float:
    """Natural log of the Gauss hypergeometric function via its Euler integral.

    Valid for ``c > b > 0`` and ``0 <= z < 1``.
    """
    if not c > b > 0:
        raise DomainError("need c > b > 0")
    if not 0 <= z < 1:
        raise DomainError("need 0 <= z < 1")
    if z == 0:
        return 0.0
    return _log_euler_integral(a, b, c, z) - float(betaln(b, c - b))


def gauss_2f1(a: float, b: float, c: float, z: float) -> float:
    """Gauss hypergeometric function ₂F₁(a, b; c; z) for ``c > b > 0``, ``0 <= z < 1``."""
    return math.exp(log_gauss_2f1(a, b, c, z))


def log_2f1_unit_b(a, c, z):
    """Vectorized ``log ₂F₁(a, 1; c; z)`` through the incomplete beta function.

    Uses ``₂F₁(a,1;c;z) = (c-1) z^(1-c) (1-z)^(c-a-1) B(z; c-1, a-c+1)``,
    which needs ``c > 1`` and ``a - c + 1 > 0``.
    """
    z = np.asarray(z, dtype=float)
    c = np.broadcast_to(np.asarray(c, dtype=float), z.shape)
    alpha = c - 1.0
    beta = a - c + 1.0
    out = np.zeros(z.shape)
    pos = z > 0
    if np.any(pos):
        zp, al, be = z[pos], alpha[pos], beta[pos]
        with np.errstate(divide="ignore"):
            out[pos] = (np.log(al) - al * np.log(zp) - be * np.log1p(-zp)
                        + np.log(betainc(al, be, zp)) + betaln(al, be))
    return out


def log_bf0_hyperg_from_r2(r2, size, n: int, a: float):
    r2 = np.clip(np.asarray(r2, dtype=float), 0.0, R2_CEILING)
    shape = np.broadcast_shapes(r2.shape, np.shape(size))
    r2 = np.broadcast_to(r2, shape).ravel()
    size = np.broadcast_to(np.asarray(size, dtype=float), shape).ravel()
    c = (size + a) / 2.0
    half = (n - 1) / 2.0
    lead = np.log(a - 2.0) - np.log(size + a - 2.0)
    out = lead + log_2f1_unit_b(half, c, r2)
    # the incomplete-beta identity needs (n-1)/2 - c + 1 > 0; use quadrature otherwise
    edge = (half - c + 1.0 <= 1e-9) & (r2 > 0)
    for i in np.nonzero(edge)[0]:
        out[i] = lead[i] + log_gauss_2f1(half, 1.0, c[i], r2[i])
    out = np.where(size == 0, 0.0, out)
    return out.reshape(shape)


def log_bf0_hyperg(state: RegressionState, n: int, a: float) -> float:
    """Log Bayes factor of ``state.model`` versus the null under a hyper-g prior."""
    if not a > 2:
        raise DomainError("hyper-g needs a > 2")
    s = state.size
    if s == 0:
        return 0.0
    return float(math.log(a - 2.0) - math.log(s + a - 2.0)
                 + log_gauss_2f1((n - 1) / 2.0, 1.0, (s + a) / 2.0, state.r2))


def log_bf0(state: RegressionState, n: int, prior: CoefficientPrior) -> float:
    if prior.kind == "g":
        return log_bf0_g(state, n, prior.g)
    return log_bf0_hyperg(state, n, prior.a)


def log_bf_step(state_next: RegressionState, state_prev: RegressionState, n: int,
                prior: CoefficientPrior) -> float:
    """Log Bayes factor of ``state_next.model`` against ``state_prev.model``."""
    if state_next.model == state_prev.model:
        return 0.0
    return log_bf0(state_next, n, prior) - log_bf0(state_prev, n, prior)


def posterior_shrinkage(r2: float, size: int, n: int, prior: CoefficientPrior) -> float:
    """Posterior mean of ``g / (1 + g)`` for a model with the given fit."""
    if prior.kind == "g":
        return prior.g / (1.0 + prior.g)
    if size == 0:
        return 0.0
    # density of u = g/(1+g): (1-u)^((s+a)/2 - 2) (1 - u R²)^(-(n-1)/2)
    a_half = (n - 1) / 2.0
    c = (size + prior.a) / 2.0
    r2 = min(max(r2, 0.0), R2_CEILING)
    log_scale = -a_half * math.log1p(-r2)

    def dens(u):
        return math.exp(-a_half * math.log1p(-u * r2) - log_scale)

    num, _ = integrate.quad(lambda u: u * dens(u), 0.0, 1.0, weight="alg",
                            wvar=(0.0, c - 2.0), epsabs=0.0, epsrel=1e-11, limit=200)
    den, _ = integrate.quad(dens, 0.0, 1.0, weight="alg", wvar=(0.0, c - 2.0),
                            epsabs=0.0, epsrel=1e-11, limit=200)
    return num / den


# ---------------------------------------------------------------------------
# Evaluators
# ---------------------------------------------------------------------------


class BayesFactor:
    """Log Bayes factor versus the null as a function of the model.

    Subclasses implement ``compute``; results are memoized by model.
    ``lookahead`` returns log Bayes factors for every model reachable from
    ``base`` within ``depth`` additions and may be overridden with a
    vectorized version.
    """

    p: int

    def __init__(self, p: int):
        self.p = p
        self._cache = {}

    def __call__(self, model: ModelVector) -> float:
        key = model.mask
        val = self._cache.get(key)
        if val is None:
            val = self.compute(model)
            self._cache[key] = val
        return val

    def compute(self, model: ModelVector) -> float:
        raise NotImplementedError

    def batch(self, masks: np.ndarray) -> np.ndarray:
        """Log Bayes factors for integer masks (``p <= 62``)."""
        return np.array([self(ModelVector(self.p, int(m))) for m in masks])

    def lookahead(self, base: ModelVector, free: np.ndarray, depth: int):
        """Log Bayes factors of ``base`` plus subsets of ``free``.

        Returns ``(levels, leaves)``: ``levels[d]`` holds one value per
        ``d``-subset of ``range(len(free))`` in colex order, for
        ``d < depth``; ``leaves[i, m]`` is the value for level ``depth - 1``
        node ``i`` with local predictor ``m`` added (``-inf`` where ``m`` is
        already in the node).
        """
        nf = len(free)
        levels = []
        for d in range(depth):
            combos = colex_combinations(nf, d)
            levels.append(np.array([
                self(ModelVector(self.p, base.mask | _bits(free[c]))) for c in combos]))
        combos = colex_combinations(nf, depth - 1)
        leaves = np.full((len(combos), nf), -np.inf)
        for i, c in enumerate(combos):
            inner = base.mask | _bits(free[c])
            for m in range(nf):
                if m in c:
                    continue
                leaves[i, m] = self(ModelVector(self.p, inner | (1 << int(free[m]))))
        return levels, leaves


def _bits(indices) -> int:
    mask = 0
    for j in indices:
        mask |= 1 << int(j)
    return mask


_COLEX_CACHE = {}


def colex_combinations(n: int, r: int) -> np.ndarray:
    """All ``r``-subsets of ``range(n)`` (rows sorted ascending) in colex order."""
    key = (n, r)
    hit = _COLEX_CACHE.get(key)
    if hit is not None:
        return hit
    combos = combinations_array(n, r)
    if r > 0:
        order = np.argsort(colex_rank(combos), kind="stable")
        combos = combos[order]
    combos.setflags(write=False)
    if len(_COLEX_CACHE) > 256:
        _COLEX_CACHE.clear()
    _COLEX_CACHE[key] = combos
    return combos


def colex_rank(combos: np.ndarray) -> np.ndarray:
    """Colex rank of each sorted row: ``sum_i C(c_i, i + 1)``."""
    combos = np.asarray(combos, dtype=np.int64)
    rank = np.zeros(combos.shape[0], dtype=np.int64)
    for i in range(combos.shape[1]):
        rank += _comb_vec(combos[:, i], i + 1)
    return rank


def _comb_vec(n: np.ndarray, k: int) -> np.ndarray:
    out = np.ones(n.shape, dtype=np.int64)
    for i in range(k):
        out = out * (n - i) // (i + 1)
    return np.where(n >= k, out, 0)


class TableBayesFactor(BayesFactor):
    """Log Bayes factors given explicitly, indexed by integer mask."""

    def __init__(self, log_values: np.ndarray):
        log_values = np.asarray(log_values, dtype=float)
        p = int(round(math.log2(log_values.size)))
        if 1 << p != log_values.size:
            raise DomainError("table length must be a power of two")
        super().__init__(p)
        self.table = log_values

    def compute(self, model):
        return float(self.table[model.mask])

    def batch(self, masks):
        return self.table[np.asarray(masks, dtype=np.int64)]


class ConstantBayesFactor(BayesFactor):
    """Every model equally supported by the data (``BF = 1``)."""

    def compute(self, model):
        return 0.0

    def batch(self, masks):
        return np.zeros(len(masks))

    def lookahead(self, base, free, depth):
        nf = len(free)
        levels = [np.zeros(len(colex_combinations(nf, d))) for d in range(depth)]
        combos = colex_combinations(nf, depth - 1)
        leaves = np.zeros((len(combos), nf))
        for i, c in enumerate(combos):
            leaves[i, c] = -np.inf
        return levels, leaves


class RegressionBayesFactor(BayesFactor):
    """Closed-form Bayes factors for linear regression data.

    Collinear models (a squared pivot below the floor along any addition
    order used) get ``-inf``, i.e. they are never selected.
    """

    def __init__(self, data: RegressionData, prior: CoefficientPrior, max_size: Optional[int] = None):
        super().__init__(data.p)
        self.data = data
        self.prior = prior
        self.max_size = data.default_max_size() if max_size is None else max_size

    def from_r2(self, r2, size):
        n = self.data.n
        if self.prior.kind == "g":
            return log_bf0_g_from_r2(r2, size, n, self.prior.g)
        return log_bf0_hyperg_from_r2(r2, size, n, self.prior.a)

    def log_bf_from_rss(self, rss: np.ndarray, size: int, bad: np.ndarray) -> np.ndarray:
        """Log Bayes factors from residual sums of squares; ``rss`` is overwritten."""
        if size > self.max_size:
            return np.full(rss.shape, -np.inf)
        data = self.data
        if data.ssy > 0:
            u = rss
            u /= data.ssy
        else:
            u = np.ones(rss.shape)
        # u = 1 - R², clamped like every other route
        np.clip(u, 1.0 - R2_CEILING, 1.0, out=u)
        if self.prior.kind == "g":
            g, n = self.prior.g, data.n
            u *= g
            np.log1p(u, out=u)
            u *= -0.5 * (n - 1)
            u += 0.5 * (n - 1 - size) * math.log1p(g)
        else:
            u = np.asarray(self.from_r2(1.0 - u, size), dtype=float)
        np.copyto(u, -np.inf, where=np.broadcast_to(bad, u.shape))
        return u

    def state(self, model: ModelVector) -> RegressionState:
        return state_from_scratch(model, self.data)

    def compute(self, model):
        if model.size == 0:
            return 0.0
        if model.size > self.max_size:
            return -np.inf
        try:
            st = self.state(model)
        except CollinearityError:
            return -np.inf
        return float(self.from_r2(st.r2, st.size))

    def batch(self, masks):
        masks = np.asarray(masks, dtype=np.int64)
        out = np.empty(masks.size)
        sizes = np.array([bin(int(m)).count("1") for m in masks])
        for s in np.unique(sizes):
            sel = np.nonzero(sizes == s)[0]
            out[sel] = self._batch_same_size(masks[sel], int(s))
        return out

    def _batch_same_size(self, masks, s, chunk=20000):
        if s == 0:
            return np.zeros(masks.size)
        if s > self.max_size:
            return np.full(masks.size, -np.inf)
        p = self.p
        bits = (masks[:, None] >> np.arange(p, dtype=np.int64)) & 1
        idx = np.nonzero(bits)[1].reshape(masks.size, s)
        out = np.empty(masks.size)
        for lo in range(0, masks.size, chunk):
            sl = idx[lo:lo + chunk]
            gain, bad = _batched_fit(self.data, sl)
            r2 = 1.0 - (self.data.ssy - gain) / self.data.ssy if self.data.ssy > 0 else np.zeros(len(sl))
            vals = self.from_r2(r2, s)
            out[lo:lo + chunk] = np.where(bad, -np.inf, vals)
        return out

    def lookahead(self, base, free, depth):
        return _regression_lookahead(self, base, np.asarray(free, dtype=np.int64), depth)


def _batched_fit(data: RegressionData, idx: np.ndarray):
    """Explained sum of squares for many same-size models via batched Cholesky."""
    G = data.gram[idx[:, :, None], idx[:, None, :]]
    c = data.xty[idx]
    m, s = idx.shape
    L = np.zeros((m, s, s))
    bad = np.zeros(m, dtype=bool)
    floor = data.column_floor[idx]
    for k in range(s):
        row = G[:, k, :k].copy()
        for i in range(k):
            row[:, i] = (row[:, i] - np.einsum("mj,mj->m", row[:, :i], L[:, i, :i])) / L[:, i, i]
        piv2 = G[:, k, k] - np.einsum("mj,mj->m", row, row)
        bad |= piv2 < floor[:, k]
        L[:, k, :k] = row
        L[:, k, k] = np.sqrt(np.where(piv2 > 0, piv2, 1.0))
    z = np.zeros((m, s))
    for k in range(s):
        z[:, k] = (c[:, k] - np.einsum("mj,mj->m", L[:, k, :k], z[:, :k])) / L[:, k, k]
    return np.einsum("mj,mj->m", z, z), bad


def _regression_lookahead(bf: RegressionBayesFactor, base: ModelVector, free: np.ndarray, depth: int):
    data = bf.data
    idx = base.indices()
    G = data.gram
    if idx:
        try:
            st = bf.state(base)
        except CollinearityError:
            # every extension of a collinear model is collinear as well
            nf = len(free)
            levels = [np.full(len(colex_combinations(nf, d)), -np.inf) for d in range(depth)]
            return levels, np.full((len(colex_combinations(nf, depth - 1)), nf), -np.inf)
        A = solve_triangular(st.factor, G[idx][:, free], lower=True)
        M = G[np.ix_(free, free)] - A.T @ A
        b = data.xty[free] - A.T @ st.z
        rss0 = st.rss
    else:
        M = G[np.ix_(free, free)].copy()
        b = data.xty[free].copy()
        rss0 = data.ssy
    floor = data.column_floor[free]
    nf = len(free)
    s0 = base.size

    # M and b are the Gram matrix and cross products of the free columns
    # after projecting out the current node's columns; each level applies
    # one rank-one downdate per node.  Full matrices are kept only up to
    # level depth-3; level depth-2 is held as (grandparent matrix, rank-one
    # term) and the last level keeps only diagonals.
    levels = [np.array([bf(base)])]
    full = M[None, :, :]
    vec = b[None, :].copy()
    rss = np.array([rss0])
    bad = np.zeros(1, dtype=bool)
    diag = np.diagonal(M)[None, :].copy()
    held = None
    for d in range(1, depth - 1):
        combos = colex_combinations(nf, d)
        parent = colex_rank(combos[:, :-1]) if d > 1 else np.zeros(len(combos), dtype=np.int64)
        add = combos[:, -1]
        prow = full[parent, add, :]
        piv = full[parent, add, add]
        pvec = vec[parent]
        bad = bad[parent] | (piv < floor[add])
        safe = np.where(bad, 1.0, piv)
        bb = pvec[np.arange(len(combos)), add]
        rss = rss[parent] - bb * bb / safe
        scaled = prow / safe[:, None]
        if d < depth - 2:
            full = full[parent] - prow[:, :, None] * scaled[:, None, :]
        else:
            held = (full, parent, prow, scaled)
            full = None
        diag = diag[parent] - prow * scaled
        pvec -= scaled * bb[:, None]
        vec = pvec
        levels.append(bf.log_bf_from_rss(rss.copy(), s0 + d, bad))

    # last level: the bulk of the work, done in reusable buffers
    d = depth - 1
    if d >= 1:
        combos = colex_combinations(nf, d)
        m = len(combos)
        parent = colex_rank(combos[:, :-1]) if d > 1 else np.zeros(m, dtype=np.int64)
        add = combos[:, -1]
        prow, work, pdiag, pvec = (_scratch(name, (m, nf)) for name in ("row", "work", "diag", "vec"))
        if held is None:
            np.take(full.reshape(-1, nf), parent * nf + add, axis=0, out=prow)
        else:
            upper, up_parent, up_row, up_scaled = held
            np.take(upper.reshape(-1, nf), up_parent[parent] * nf + add, axis=0, out=prow)
            np.take(up_scaled, parent, axis=0, out=work)
            work *= up_row[parent, add][:, None]
            prow -= work
        np.take(diag, parent, axis=0, out=pdiag)
        np.take(vec, parent, axis=0, out=pvec)
        piv = pdiag[np.arange(m), add]
        bad = bad[parent] | (piv < floor[add])
        safe = np.where(bad, 1.0, piv)
        bb = pvec[np.arange(m), add]
        rss = rss[parent] - bb * bb / safe
        np.divide(prow, safe[:, None], out=work)
        np.multiply(prow, work, out=prow)
        pdiag -= prow
        work *= bb[:, None]
        pvec -= work
        diag, vec = pdiag, pvec
        levels.append(bf.log_bf_from_rss(rss.copy(), s0 + d, bad))

    leaf_bad = diag < floor[None, :]
    leaf_bad |= bad[:, None]
    np.copyto(diag, 1.0, where=leaf_bad)
    leaf_rss = np.multiply(vec, vec)
    leaf_rss /= diag
    np.subtract(rss[:, None], leaf_rss, out=leaf_rss)
    leaves = bf.log_bf_from_rss(leaf_rss, s0 + depth, leaf_bad)
    if depth > 1:
        rows = np.repeat(np.arange(len(combos)), depth - 1)
        leaves[rows, combos.ravel()] = -np.inf
    return levels, leaves


_SCRATCH = threading.local()


def _scratch(name: str, shape) -> np.ndarray:
    """Per-thread work array reused across calls (contents undefined)."""
    pool = getattr(_SCRATCH, "pool", None)
    if pool is None:
        pool = _SCRATCH.pool = {}
    size = int(np.prod(shape))
    buf = pool.get(name)
    if buf is None or buf.size < size:
        buf = pool[name] = np.empty(size)
    return buf[:size].reshape(shape)
