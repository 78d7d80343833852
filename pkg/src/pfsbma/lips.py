"""Sequential importance sampling over stepwise paths with look-ahead proposals.

Each island holds ``N`` particles that start at the null model and take one
stepwise decision per step.  Decisions are drawn from the look-ahead
proposal; the log weight collects ``log prior kernel - log proposal kernel``
plus the log Bayes factor of every accepted addition, so a particle's final
weight targets the posterior over final models.

Randomness: step ``t`` of island ``l`` owns a Philox stream keyed by
``(seed, l, t)``; particle ``i`` uses the ``i``-th uniform of that stream for
its stop decision and the ``i``-th of a second draw for its selection.  The
output therefore does not depend on how islands are scheduled over threads.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .bayes import BayesFactor, CoefficientPrior, RegressionData, posterior_shrinkage, state_from_scratch
from .errors import CollinearityError, ConfigError, DomainError
from .models import ModelVector
from .priors import PfsPrior
from .proposal import ProposalCache, ProposalDistribution

log = logging.getLogger(__name__)

THREADS_ENV = "LIPS_THREADS"


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class LipsConfig:
    """Sampler settings.

    ``lookahead = 0`` uses the prior itself as the proposal.
    """

    particles: int = 1000
    islands: int = 1
    lookahead: int = 3
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.particles < 1:
            raise ConfigError("need at least one particle")
        if self.islands < 1:
            raise ConfigError("need at least one island")
        if self.lookahead < 0:
            raise ConfigError("look-ahead depth must be nonnegative")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.threads < 1:
            raise ConfigError("thread count must be positive")


@dataclass(frozen=True)
class Particle:
    """One particle: its tentative model, log weight and position."""

    model: ModelVector
    log_weight: float = 0.0
    step: int = 0
    stopped: bool = False
    log_bf: float = 0.0
    path: tuple = ()


def step_uniforms(seed: int, island: int, step: int, size: int):
    """The two uniform vectors (stop, select) used at one step of one island."""
    ss = np.random.SeedSequence(seed, spawn_key=(island, step))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.random(size), gen.random(size)


def _choose(lam_hat: np.ndarray, v):
    cdf = np.cumsum(lam_hat)
    j = np.searchsorted(cdf, np.asarray(v) * cdf[-1], side="right")
    return np.minimum(j, lam_hat.size - 1)


def propagate_step(particle: Particle, t: int, proposals: Callable[[ModelVector], ProposalDistribution],
                   u: float, v: float) -> Particle:
    """Advance one particle through step ``t`` using uniforms ``u`` (stop) and ``v`` (select)."""
    if particle.stopped:
        return particle
    if particle.model.size != t - 1 or particle.step != t - 1:
        raise DomainError(f"particle at step {particle.step} cannot take step {t}")
    prop = proposals(particle.model)
    if u < prop.rho_hat:
        return replace(particle, log_weight=particle.log_weight + prop.stop_increment, step=t,
                       stopped=True, path=particle.path + (None,))
    j = int(_choose(prop.lam_hat, v))
    if not prop.lam[j] > 0:
        raise AssertionError(f"proposal selected predictor {j} outside the prior support")
    return Particle(particle.model.add(j), particle.log_weight + float(prop.select_increment[j]), t,
                    False, float(prop.log_bf_children[j]), particle.path + (j,))


@dataclass
class IslandResult:
    """Final models (boolean rows) and log weights of one island."""

    island: int
    models: np.ndarray
    log_weights: np.ndarray
    log_bf: np.ndarray
    steps_taken: int

    @property
    def ess(self) -> float:
        return effective_sample_size(self.log_weights)

    def model(self, i: int) -> ModelVector:
        return ModelVector.from_array(self.models[i])


def _group_rows(rows: np.ndarray):
    """Group identical boolean rows; yields ``(mask, member positions)``."""
    packed = np.packbits(rows, axis=1, bitorder="little")
    uniq, inverse = np.unique(packed, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    for g in range(len(uniq)):
        yield int.from_bytes(uniq[g].tobytes(), "little"), order[bounds[g]:bounds[g + 1]]


def run_island(config: LipsConfig, island: int, prior: PfsPrior, bf: BayesFactor,
               proposals: Optional[ProposalCache] = None) -> IslandResult:
    """Propagate one island of particles to completion."""
    p = prior.p
    if bf.p != p:
        raise ConfigError(f"prior has p={p} but the Bayes factor has p={bf.p}")
    if proposals is None:
        proposals = ProposalCache(config.lookahead, prior, bf)
    N = config.particles
    models = np.zeros((N, p), dtype=bool)
    logw = np.zeros(N)
    logbf = np.zeros(N)
    alive = np.ones(N, dtype=bool)
    t = 0
    for t in range(1, p + 1):
        live = np.nonzero(alive)[0]
        if live.size == 0:
            t -= 1
            break
        u, v = step_uniforms(config.seed, island, t, N)
        for mask, members in _group_rows(models[live]):
            idx = live[members]
            prop = proposals(ModelVector(p, mask))
            stop = u[idx] < prop.rho_hat
            halt = idx[stop]
            logw[halt] += prop.stop_increment
            alive[halt] = False
            go = idx[~stop]
            if go.size:
                j = _choose(prop.lam_hat, v[go])
                logw[go] += prop.select_increment[j]
                logbf[go] = prop.log_bf_children[j]
                models[go, j] = True
    if not np.all(np.isfinite(logw)):
        raise ArithmeticError("non-finite log weight produced")
    return IslandResult(island, models, logw, logbf, t)


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HtEstimate:
    """Weighted estimate with its standard error (arrays for vector quantities)."""

    value: np.ndarray
    se: np.ndarray
    ess: float
    islands: int = 1


def effective_sample_size(log_weights) -> float:
    lw = np.asarray(log_weights, dtype=float)
    w = np.exp(lw - lw.max())
    return float(w.sum() ** 2 / (w * w).sum())


def ht_from_values(log_weights, values) -> HtEstimate:
    """Horvitz-Thompson estimate from log weights and per-sample values.

    ``values`` has shape ``(N,)`` or ``(N, m)``.  Weights are rescaled to
    mean one before the three-term variance formula, which makes it the
    usual delta-method variance of a ratio and independent of any common
    scaling of the weights.  It is evaluated in the equivalent form
    ``Σ (w_i (z_i - v))² / (N (N - 1))``.
    """
    lw = np.asarray(log_weights, dtype=float)
    z = np.asarray(values, dtype=float)
    if lw.ndim != 1 or lw.size == 0:
        raise DomainError("need a nonempty vector of log weights")
    if z.shape[0] != lw.size:
        raise DomainError("values and weights differ in length")
    top = lw.max()
    if not np.isfinite(top):
        raise DomainError("all weights are zero")
    w = np.exp(lw - top)
    w /= w.mean()
    N = lw.size
    wz = w.reshape((N,) + (1,) * (z.ndim - 1))
    # zero-weight samples contribute nothing even where their value is undefined
    z = np.where(wz > 0, z, 0.0)
    value = (wz * z).sum(axis=0) / w.sum()
    ess = float(w.sum() ** 2 / (w * w).sum())
    if N < 2:
        return HtEstimate(value, np.full(np.shape(value), np.inf), ess)
    # with mean-one weights the three-term sum  v² Σ(w-1)² + Σ(wz - v)² - 2v Σ(w-1)(wz - v)
    # collapses to Σ(w(z - v))², which is free of cancellation
    var = ((wz * (z - value)) ** 2).sum(axis=0) / ((N - 1) * N)
    return HtEstimate(value, np.sqrt(np.maximum(var, 0.0)), ess)


def ht_estimate(result: IslandResult, delta: "DeltaEvaluator") -> HtEstimate:
    return ht_from_values(result.log_weights, delta.batch(result.models))


def islanded_estimate(estimates: Sequence[HtEstimate]) -> HtEstimate:
    """Average of per-island estimates with the between-island standard error."""
    if not estimates:
        raise DomainError("no island estimates")
    vals = np.array([np.asarray(e.value, dtype=float) for e in estimates])
    L = len(estimates)
    mean = vals.mean(axis=0)
    if L < 2:
        se = np.full(np.shape(mean), np.inf)
    else:
        se = np.sqrt(((vals - mean) ** 2).sum(axis=0) / (L * (L - 1)))
    return HtEstimate(mean, se, float(sum(e.ess for e in estimates)), L)


# ---------------------------------------------------------------------------
# Quantities to average
# ---------------------------------------------------------------------------


class DeltaEvaluator:
    """A per-model quantity ``E(Δ | γ, D)``; may be vector valued."""

    kind = "custom"

    def __init__(self, func: Optional[Callable[[ModelVector], object]] = None, p: Optional[int] = None):
        self.func = func
        self.p = p

    def __call__(self, model: ModelVector):
        if self.func is None:
            raise NotImplementedError
        return self.func(model)

    def batch(self, models: np.ndarray) -> np.ndarray:
        """Values for the rows of a boolean model matrix (evaluated once per distinct model)."""
        models = np.asarray(models, dtype=bool)
        p = models.shape[1]
        out = None
        for mask, members in _group_rows(models):
            val = np.asarray(self(ModelVector(p, mask)), dtype=float)
            if out is None:
                out = np.empty((models.shape[0],) + val.shape)
            out[members] = val
        return out


class InclusionDelta(DeltaEvaluator):
    """Indicator that each listed predictor is in the model."""

    kind = "inclusion"

    def __init__(self, indices: Sequence[int], p: int):
        super().__init__(p=p)
        self.indices = np.asarray(indices, dtype=np.int64)
        if np.any((self.indices < 0) | (self.indices >= p)):
            raise DomainError("predictor index out of range")

    def __call__(self, model):
        arr = model.to_array()[self.indices].astype(float)
        return arr if arr.size > 1 else float(arr[0])

    def batch(self, models):
        vals = np.asarray(models, dtype=float)[:, self.indices]
        return vals if self.indices.size > 1 else vals[:, 0]


def pip_delta(j: int, p: int) -> InclusionDelta:
    return InclusionDelta([j], p)


def all_pips_delta(p: int) -> InclusionDelta:
    return InclusionDelta(range(p), p)


class PredictionDelta(DeltaEvaluator):
    """Posterior predictive mean of new responses given a model.

    ``ȳ + s(γ) (x_new - x̄)ᵀ β̂_γ`` where ``β̂_γ`` is least squares on the
    centered design and ``s(γ)`` the posterior mean of ``g / (1 + g)``.
    """

    kind = "prediction"

    def __init__(self, x_new, data: RegressionData, coef_prior: CoefficientPrior):
        x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
        if x_new.shape[1] != data.p:
            raise DomainError(f"new rows have {x_new.shape[1]} columns, expected {data.p}")
        super().__init__(p=data.p)
        self.offsets = x_new - data.x_mean
        self.data = data
        self.coef_prior = coef_prior
        self._memo = {}

    def __call__(self, model):
        hit = self._memo.get(model.mask)
        if hit is not None:
            return hit
        data = self.data
        if model.size == 0:
            val = np.full(len(self.offsets), data.y_mean)
        else:
            try:
                st = state_from_scratch(model, data)
            except CollinearityError:
                val = np.full(len(self.offsets), np.nan)
            else:
                shrink = posterior_shrinkage(st.r2, st.size, data.n, self.coef_prior)
                val = data.y_mean + shrink * (self.offsets @ st.coefficients())
        self._memo[model.mask] = val
        return val


def prediction_delta(x_new, data: RegressionData, coef_prior: CoefficientPrior) -> PredictionDelta:
    return PredictionDelta(x_new, data, coef_prior)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class LipsResult:
    config: LipsConfig
    islands: list
    wall_time: float = 0.0
    proposals_built: int = 0
    extra: dict = field(default_factory=dict)

    def estimate(self, delta: DeltaEvaluator) -> HtEstimate:
        """Islanded estimate when there are several islands, plain H-T otherwise."""
        per = [ht_estimate(r, delta) for r in self.islands]
        if len(per) == 1:
            return per[0]
        return islanded_estimate(per)

    def pips(self) -> HtEstimate:
        p = self.islands[0].models.shape[1]
        return self.estimate(all_pips_delta(p))

    def island_ess(self) -> list:
        return [r.ess for r in self.islands]


def run_lips(prior: PfsPrior, bf: BayesFactor, config: LipsConfig,
             proposals: Optional[ProposalCache] = None) -> LipsResult:
    """Run all islands, in parallel when ``config.threads > 1``."""
    if proposals is None:
        proposals = ProposalCache(config.lookahead, prior, bf)
    start = time.perf_counter()
    ids = range(config.islands)
    if config.threads > 1 and config.islands > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            islands = list(pool.map(lambda l: run_island(config, l, prior, bf, proposals), ids))
    else:
        islands = [run_island(config, l, prior, bf, proposals) for l in ids]
    elapsed = time.perf_counter() - start
    log.info("ran %d islands of %d particles in %.2fs (%d proposals)", config.islands,
             config.particles, elapsed, proposals.built)
    return LipsResult(config, islands, elapsed, proposals.built)
