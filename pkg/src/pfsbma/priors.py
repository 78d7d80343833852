"""Stopping and selection rules for forward-stepwise model-space priors.

A prior is a pair of mappings on non-full models: a stopping probability
``rho(model)`` and a selection distribution ``lam(model)`` over the predictors
not yet included.  Rules are evaluated one model at a time (``__call__``) or
on a boolean matrix of models, one row per model (``batch``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import betaln, gammaln

from .errors import ConfigError, DomainError
from .models import (
    ENUMERATION_LIMIT,
    ModelVector,
    PathStep,
    check_enumerable,
    masks_by_size,
    masks_to_bool,
)

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


# ---------------------------------------------------------------------------
# Stopping rules
# ---------------------------------------------------------------------------


class StoppingRule:
    """Base class; subclasses implement ``batch``."""

    p: int
    s_max: int

    def __call__(self, model: ModelVector) -> float:
        return float(self.batch(model.to_array()[None, :])[0])

    def batch(self, models: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def by_size(self, size: int) -> Optional[float]:
        """The stopping probability if it depends on the model only through ``size``."""
        return None


class SizeStopping(StoppingRule):
    """Stopping probability that depends on the model only through its size.

    ``h[s]`` is the probability of stopping at a model of size ``s``.
    """

    def __init__(self, h: Sequence[float], s_max: Optional[int] = None):
        h = np.asarray(h, dtype=float)
        if h.ndim != 1 or h.size < 1:
            raise DomainError("h must be a nonempty vector")
        if np.any(h < 0) or np.any(h > 1):
            raise DomainError("stopping probabilities must lie in [0, 1]")
        self.p = h.size - 1
        self.s_max = self.p if s_max is None else min(int(s_max), self.p)
        h = h.copy()
        h[self.s_max:] = 1.0
        self.h = h

    def __call__(self, model):
        return float(self.h[model.size])

    def batch(self, models):
        return self.h[models.sum(axis=1)]

    def by_size(self, size):
        return float(self.h[size])

    def __repr__(self):
        return f"SizeStopping(h={np.array2string(self.h, precision=4)}, s_max={self.s_max})"


class CappedStopping(StoppingRule):
    """Force ``rho = 1`` at and above ``s_max``; defer to ``base`` below it."""

    def __init__(self, base: StoppingRule, s_max: int):
        self.base = base
        self.p = base.p
        self.s_max = min(int(s_max), base.s_max)

    def __call__(self, model):
        if model.size >= self.s_max:
            return 1.0
        return self.base(model)

    def batch(self, models):
        out = np.asarray(self.base.batch(models), dtype=float).copy()
        out[models.sum(axis=1) >= self.s_max] = 1.0
        return out

    def by_size(self, size):
        return 1.0 if size >= self.s_max else self.base.by_size(size)


class TabulatedStopping(StoppingRule):
    """Stopping probabilities stored for every model (``p <= 20``)."""

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        p = int(round(math.log2(table.size)))
        if 1 << p != table.size:
            raise DomainError("table length must be a power of two")
        check_enumerable(p)
        self.p = p
        self.s_max = p
        self.table = table
        self._weights = 1 << np.arange(p, dtype=np.int64)

    def __call__(self, model):
        return float(self.table[model.mask])

    def batch(self, models):
        return self.table[models.astype(np.int64) @ self._weights]


def size_prior_to_h(q: Sequence[float]) -> SizeStopping:
    """Stopping rule that induces the size distribution ``q = (q_0, ..., q_p)``.

    ``h(s) = q_s / (1 - sum_{r<s} q_r)``; where no mass remains at or above
    ``s`` the rule stops with probability one.
    """
    q = _check_size_distribution(q)
    tail = np.cumsum(q[::-1])[::-1]
    h = np.ones_like(q)
    live = tail > 0
    h[live] = np.clip(q[live] / tail[live], 0.0, 1.0)
    positive = np.nonzero(q > 0)[0]
    return SizeStopping(h, s_max=int(positive[-1]))


def _check_size_distribution(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.size < 1:
        raise DomainError("size distribution must be a nonempty vector")
    if np.any(q < 0):
        raise DomainError("size distribution has negative entries")
    if abs(q.sum() - 1.0) > SIMPLEX_TOL:
        raise DomainError(f"size distribution sums to {q.sum():.12g}, not 1")
    return q


def beta_binomial_size_prior(p: int, a: float = 1.0, b: float = 1.0) -> np.ndarray:
    """Beta-Binomial(a, b) distribution on the model size ``0..p``."""
    s = np.arange(p + 1)
    logq = (gammaln(p + 1) - gammaln(s + 1) - gammaln(p - s + 1)
            + betaln(s + a, p - s + b) - betaln(a, b))
    q = np.exp(logq)
    return q / q.sum()


# ---------------------------------------------------------------------------
# Selection rules
# ---------------------------------------------------------------------------


class SelectionRule:
    """Base class; subclasses implement ``batch`` returning one row per model."""

    p: int

    def __call__(self, model: ModelVector) -> np.ndarray:
        return self.batch(model.to_array()[None, :])[0]

    def batch(self, models: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    uniform = False


def _normalize_rows(weights: np.ndarray) -> np.ndarray:
    total = weights.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, weights / np.where(total > 0, total, 1.0), 0.0)
    return out


class UniformSelection(SelectionRule):
    """Equal selection mass on every excluded predictor."""

    uniform = True

    def __init__(self, p: int):
        if p < 1:
            raise DomainError("p must be at least 1")
        self.p = p

    def batch(self, models):
        count = models.shape[1] - models.sum(axis=1)
        inv = np.divide(1.0, count, out=np.zeros(count.shape), where=count > 0)
        return np.multiply(~models, inv[:, None])

    def __repr__(self):
        return f"UniformSelection(p={self.p})"


class WeightedSelection(SelectionRule):
    """Selection mass proportional to ``w_j``, multiplied by ``boost`` on a favoured set."""

    def __init__(self, weights: Sequence[float], boost: float = 1.0, boosted: Sequence[int] = ()):
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise DomainError("selection weights must be nonnegative")
        if boost < 1:
            raise DomainError("boost factor must be >= 1")
        self.p = w.size
        scale = np.ones(self.p)
        for j in boosted:
            if not 0 <= j < self.p:
                raise DomainError(f"boosted index {j} out of range")
            scale[j] = boost
        self.weights = w * scale

    def batch(self, models):
        return _normalize_rows(np.where(models, 0.0, self.weights))


@dataclass(frozen=True)
class ConditionalRule:
    """Adjust the selection weight of ``target`` depending on other predictors.

    ``kind="pathway"`` multiplies the weight by ``factor`` when any trigger is
    in the model; ``kind="interaction"`` zeroes the weight unless every
    trigger is in the model.
    """

    triggers: tuple
    target: int
    factor: float = 1.0
    kind: str = "pathway"

    def __post_init__(self):
        if self.kind not in ("pathway", "interaction"):
            raise DomainError(f"unknown conditional rule kind {self.kind!r}")
        if self.factor < 0:
            raise DomainError("conditional factor must be nonnegative")


def pathway_rule(triggers, target, factor):
    return ConditionalRule(tuple(triggers), int(target), float(factor), "pathway")


def interaction_rule(parents, target):
    return ConditionalRule(tuple(parents), int(target), 0.0, "interaction")


class ConditionalSelection(SelectionRule):
    """Decorate a base selection rule with conditional adjustments, then renormalize."""

    def __init__(self, base: SelectionRule, rules: Sequence[ConditionalRule]):
        self.base = base
        self.p = base.p
        for r in rules:
            for j in (*r.triggers, r.target):
                if not 0 <= j < self.p:
                    raise DomainError(f"rule index {j} out of range")
        self.rules = tuple(rules)

    def batch(self, models):
        lam = np.array(self.base.batch(models), dtype=float)
        for r in self.rules:
            trig = models[:, list(r.triggers)]
            if r.kind == "pathway":
                hit = trig.any(axis=1)
                lam[hit, r.target] *= r.factor
            else:
                lam[~trig.all(axis=1), r.target] = 0.0
        return _normalize_rows(lam)


class BlockStopping(StoppingRule):
    def __init__(self, base: StoppingRule, blocks):
        self.base = base
        self.p = base.p
        self.s_max = base.s_max
        self.blocks = blocks

    def batch(self, models):
        rho = np.array(self.base.batch(models), dtype=float)
        rho[_partial_block(models, self.blocks) >= 0] = 0.0
        return rho


class BlockSelection(SelectionRule):
    def __init__(self, base: SelectionRule, blocks):
        self.base = base
        self.p = base.p
        self.blocks = blocks

    def batch(self, models):
        lam = np.array(self.base.batch(models), dtype=float)
        which = _partial_block(models, self.blocks)
        for b, block in enumerate(self.blocks):
            rows = which == b
            if not rows.any():
                continue
            missing = np.zeros((rows.sum(), self.p))
            missing[:, list(block)] = ~models[rows][:, list(block)]
            lam[rows] = _normalize_rows(missing)
        return lam


def _partial_block(models, blocks) -> np.ndarray:
    """Index of the first partially included block per row, or -1."""
    which = np.full(models.shape[0], -1)
    for b in reversed(range(len(blocks))):
        inside = models[:, list(blocks[b])]
        partial = inside.any(axis=1) & ~inside.all(axis=1)
        which[partial] = b
    return which


def block_rule(stopping: StoppingRule, selection: SelectionRule, blocks):
    """Wrap rules so that blocks of predictors always enter together."""
    blocks = [tuple(sorted(int(j) for j in b)) for b in blocks]
    seen = set()
    for b in blocks:
        for j in b:
            if not 0 <= j < selection.p:
                raise DomainError(f"block index {j} out of range")
            if j in seen:
                raise DomainError("blocks must be disjoint")
            seen.add(j)
    return BlockStopping(stopping, blocks), BlockSelection(selection, blocks)


def complete_linkage_clusters(corr: np.ndarray, threshold: float) -> list:
    """Cluster predictors by complete linkage on ``|corr|``, cut at ``threshold``.

    Two predictors end up together only if every cross pair of the merged
    clusters has absolute correlation of at least ``threshold``.  Ties merge
    the pair with the smallest indices first.
    """
    corr = np.asarray(corr, dtype=float)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise DomainError("correlation matrix must be square")
    if not np.allclose(corr, corr.T, atol=1e-10):
        raise DomainError("correlation matrix must be symmetric")
    if not 0 < threshold <= 1:
        raise DomainError("threshold must lie in (0, 1]")
    p = corr.shape[0]
    sim = np.abs(corr).copy()
    np.fill_diagonal(sim, -np.inf)
    members = {j: [j] for j in range(p)}
    while len(members) > 1:
        flat = int(np.argmax(sim))
        i, j = divmod(flat, p)
        if sim[i, j] < threshold:
            break
        i, j = min(i, j), max(i, j)
        merged = np.minimum(sim[i], sim[j])
        sim[i, :] = merged
        sim[:, i] = merged
        sim[i, i] = -np.inf
        sim[j, :] = -np.inf
        sim[:, j] = -np.inf
        members[i].extend(members.pop(j))
    return sorted(sorted(m) for m in members.values())


class DilutionSelection(SelectionRule):
    """Equal mass per available cluster, split evenly within each cluster."""

    def __init__(self, clusters, p: Optional[int] = None):
        self.clusters = [sorted(int(j) for j in c) for c in clusters]
        self.p = p if p is not None else sum(len(c) for c in self.clusters)
        membership = np.zeros((len(self.clusters), self.p))
        for k, c in enumerate(self.clusters):
            membership[k, c] = 1.0
        if not np.all(membership.sum(axis=0) == 1):
            raise DomainError("clusters must partition the predictors")
        self.membership = membership
        self.cluster_of = membership.argmax(axis=0)

    def batch(self, models):
        excl = (~models).astype(float)
        counts = excl @ self.membership.T
        available = (counts > 0).sum(axis=1, keepdims=True)
        per_var = counts[:, self.cluster_of]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(excl > 0, 1.0 / (available * np.where(per_var > 0, per_var, 1.0)), 0.0)
        return lam


def dilution_prior(corr: np.ndarray, threshold: float = 0.9) -> DilutionSelection:
    """Selection rule that spreads mass evenly over correlation clusters."""
    return DilutionSelection(complete_linkage_clusters(corr, threshold), p=np.shape(corr)[0])


class TabulatedSelection(SelectionRule):
    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        self.p = table.shape[1]
        check_enumerable(self.p)
        self.table = table
        self._weights = 1 << np.arange(self.p, dtype=np.int64)

    def __call__(self, model):
        return self.table[model.mask].copy()

    def batch(self, models):
        return self.table[models.astype(np.int64) @ self._weights]


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PfsPrior:
    """A model-space prior given by its stopping and selection rules.

    ``size_distribution`` is set only for symmetric priors (uniform
    selection with size-based stopping), where it yields the closed-form
    marginal ``q_s / C(p, s)``.
    """

    stopping: StoppingRule
    selection: SelectionRule
    size_distribution: Optional[np.ndarray] = field(default=None, compare=False)
    name: str = "custom"

    def __post_init__(self):
        if self.stopping.p != self.selection.p:
            raise ConfigError("stopping and selection rules disagree on p")

    @property
    def p(self) -> int:
        return self.selection.p

    @property
    def s_max(self) -> int:
        return self.stopping.s_max

    def rho(self, model: ModelVector) -> float:
        if model.is_full() or model.size >= self.s_max:
            return 1.0
        return float(self.stopping(model))

    def lam(self, model: ModelVector) -> np.ndarray:
        lam = np.asarray(self.selection(model), dtype=float)
        if not model.is_full() and lam.sum() <= 0 and self.rho(model) < 1:
            raise ConfigError(f"no predictor is selectable at {model} although rho < 1")
        return lam

    def rho_batch(self, models: np.ndarray) -> np.ndarray:
        rho = np.array(self.stopping.batch(models), dtype=float)
        rho[models.sum(axis=1) >= min(self.s_max, self.p)] = 1.0
        return rho

    def lam_batch(self, models: np.ndarray, rho: Optional[np.ndarray] = None) -> np.ndarray:
        lam = np.asarray(self.selection.batch(models), dtype=float)
        if rho is None:
            rho = self.rho_batch(models)
        dead = (lam.sum(axis=1) <= 0) & (rho < 1)
        if dead.any():
            bad = ModelVector.from_array(models[np.argmax(dead)])
            raise ConfigError(f"no predictor is selectable at {bad} although rho < 1")
        return lam

    def size_only_rho(self, size: int) -> Optional[float]:
        """``rho`` shared by all models of ``size`` when both rules depend on size alone.

        Returns ``None`` unless selection is uniform and stopping is a
        function of the size, in which case ``lam_j = 1 / (p - size)`` on
        every excluded predictor.
        """
        if not self.selection.uniform:
            return None
        if size >= min(self.s_max, self.p):
            return 1.0
        return self.stopping.by_size(size)

    def capped(self, s_max: int) -> "PfsPrior":
        """The same prior forced to stop once ``s_max`` predictors are in."""
        if s_max >= self.s_max:
            return self
        q = self.size_distribution
        if q is not None:
            q = q.copy()
            q[s_max] = q[s_max:].sum()
            q[s_max + 1:] = 0.0
        return replace(self, stopping=CappedStopping(self.stopping, s_max), size_distribution=q)

    def log_prior(self, model: ModelVector) -> float:
        """Closed-form log prior probability (symmetric priors only)."""
        if self.size_distribution is None:
            raise ConfigError("closed-form prior needs a symmetric prior")
        s = model.size
        q = self.size_distribution[s]
        if q <= 0:
            return -np.inf
        return float(np.log(q) - (gammaln(self.p + 1) - gammaln(s + 1) - gammaln(self.p - s + 1)))


class TabulatedPfs(PfsPrior):
    """A prior stored as explicit tables over all ``2**p`` models."""

    @classmethod
    def from_tables(cls, rho: np.ndarray, lam: np.ndarray, name="tabulated") -> "TabulatedPfs":
        return cls(TabulatedStopping(rho), TabulatedSelection(lam), None, name)

    @property
    def rho_table(self) -> np.ndarray:
        return self.stopping.table

    @property
    def lam_table(self) -> np.ndarray:
        return self.selection.table


def uniform_selection(p: int) -> UniformSelection:
    return UniformSelection(p)


def weighted_selection(weights, boost=1.0, boosted=()) -> WeightedSelection:
    return WeightedSelection(weights, boost, boosted)


def conditional_selection(base: SelectionRule, rules) -> ConditionalSelection:
    return ConditionalSelection(base, rules)


def symmetric_pfs(q: Sequence[float]) -> PfsPrior:
    """Prior giving every model of size ``s`` probability ``q_s / C(p, s)``.

    Built with uniform selection and the stopping recursion
    ``h(t) = pi(γ) C(p, t) / prod_{s<t} (1 - h(s))``.
    """
    q = _check_size_distribution(q)
    p = q.size - 1
    h = np.ones(p + 1)
    survive = 1.0
    for t in range(p):
        if survive <= 0:
            break
        h[t] = min(1.0, q[t] / survive) if survive > 0 else 1.0
        survive *= 1.0 - h[t]
    positive = np.nonzero(q > 0)[0]
    stop = SizeStopping(h, s_max=int(positive[-1]))
    return PfsPrior(stop, UniformSelection(p), q.copy(), "symmetric")


def beta_binomial_pfs(p: int, a: float = 1.0, b: float = 1.0) -> PfsPrior:
    prior = symmetric_pfs(beta_binomial_size_prior(p, a, b))
    return replace(prior, name=f"beta-binomial({a:g},{b:g})")


def size_vector_pfs(q: Sequence[float]) -> PfsPrior:
    """Size prior ``q`` with uniform selection (a symmetric prior)."""
    q = _check_size_distribution(q)
    return PfsPrior(size_prior_to_h(q), UniformSelection(q.size - 1), q.copy(), "size-vector")


# ---------------------------------------------------------------------------
# Constructing a representation for an arbitrary distribution
# ---------------------------------------------------------------------------


def pfs_from_distribution(pi: np.ndarray) -> TabulatedPfs:
    """Stepwise representation of an arbitrary distribution over models.

    ``pi`` is indexed by integer model mask.  The last predictor is peeled
    off, the collapsed distribution is represented recursively, and the
    last predictor is then always added last.
    """
    pi = np.asarray(pi, dtype=float)
    p = int(round(math.log2(pi.size))) if pi.size else -1
    if p < 1 or (1 << p) != pi.size:
        raise DomainError("distribution length must be 2**p with p >= 1")
    check_enumerable(p)
    if np.any(pi < 0):
        raise DomainError("distribution has negative entries")
    if abs(pi.sum() - 1.0) > SIMPLEX_TOL:
        raise DomainError(f"distribution sums to {pi.sum():.12g}, not 1")
    rho, lam = _represent(pi, p)
    return TabulatedPfs.from_tables(rho, lam)


def _represent(pi: np.ndarray, p: int):
    size = 1 << p
    rho = np.ones(size)
    lam = np.zeros((size, p))
    if p == 1:
        rho[0] = pi[0]
        lam[0, 0] = 1.0
        return rho, lam

    half = size >> 1
    low = pi[:half]
    high = pi[half:]
    collapsed = low + high
    sub_rho, sub_lam = _represent(collapsed, p - 1)

    # the collapsed model space, viewed inside p dimensions
    bar_rho = sub_rho.copy()
    bar_lam = np.zeros((half, p))
    bar_lam[:, :p - 1] = sub_lam
    bar_rho[half - 1] = 1.0
    bar_lam[half - 1] = 0.0
    bar_lam[half - 1, p - 1] = 1.0

    rho[:half] = bar_rho
    lam[:half] = bar_lam

    with np.errstate(invalid="ignore", divide="ignore"):
        frac_up = np.where(collapsed > 0, high / collapsed, 0.0)
    # 1 - rho * (1 - frac_up) written without cancellation; skip rows where it underflows
    go = (1.0 - bar_rho) + bar_rho * frac_up
    case_i = (frac_up > 0) & (go > 0)
    if case_i.any():
        go = go[case_i]
        new_lam = np.empty((case_i.sum(), p))
        new_lam[:, :p - 1] = ((1.0 - bar_rho[case_i]) / go)[:, None] * bar_lam[case_i, :p - 1]
        new_lam[:, p - 1] = frac_up[case_i] * bar_rho[case_i] / go
        rho[:half][case_i] = bar_rho[case_i] * (1.0 - frac_up[case_i])
        lam[:half][case_i] = new_lam

    # models containing the last predictor always stop
    upper = masks_to_bool(np.arange(half, size), p)
    lam[half:] = _normalize_rows((~upper).astype(float))
    rho[half:] = 1.0
    lam[size - 1] = 0.0
    return rho, lam


# ---------------------------------------------------------------------------
# Marginal distribution of the final model
# ---------------------------------------------------------------------------


def level_tables(prior: PfsPrior, limit: int = ENUMERATION_LIMIT):
    """Per-size lists of masks with their ``rho`` and ``lam`` values."""
    p = prior.p
    check_enumerable(p, limit)
    out = []
    for masks in masks_by_size(p):
        models = masks_to_bool(masks, p)
        if models.shape[1] and models[0].all():
            rho = np.ones(1)
            lam = np.zeros((1, p))
        else:
            rho = prior.rho_batch(models)
            lam = prior.lam_batch(models, rho)
        out.append((masks, rho, lam))
    return out


def marginal_model_probability(prior: PfsPrior, model: Optional[ModelVector] = None,
                               limit: int = ENUMERATION_LIMIT):
    """Probability that the procedure ends at ``model``.

    Without ``model`` returns the whole distribution as an array indexed by
    integer mask.
    """
    p = prior.p
    levels = level_tables(prior, limit)
    reach = np.zeros(1 << p)
    reach[0] = 1.0
    for s in range(p):
        masks, rho, lam = levels[s]
        mass = reach[masks] * (1.0 - rho)
        for j in range(p):
            bit = np.int64(1) << j
            flow = mass * lam[:, j]
            hit = flow > 0
            if hit.any():
                np.add.at(reach, masks[hit] | bit, flow[hit])
    final = np.zeros(1 << p)
    for masks, rho, _ in levels:
        final[masks] = reach[masks] * rho
    if model is not None:
        return float(final[model.mask])
    return final


# ---------------------------------------------------------------------------
# Generative sampling
# ---------------------------------------------------------------------------


def simulate_pfs(prior: PfsPrior, rng: np.random.Generator):
    """Run the stepwise procedure once; return the final model and its decisions."""
    p = prior.p
    model = ModelVector.null(p)
    steps = []
    stopped = False
    for _ in range(p):
        if stopped:
            steps.append(PathStep(True))
            continue
        if rng.random() < prior.rho(model):
            stopped = True
            steps.append(PathStep(True))
            continue
        lam = prior.lam(model)
        j = int(rng.choice(p, p=lam / lam.sum()))
        steps.append(PathStep(False, j))
        model = model.add(j)
    return model, steps


def sample_final_models(prior: PfsPrior, size: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized draws of final models; returns a boolean matrix, one row per draw."""
    p = prior.p
    models = np.zeros((size, p), dtype=bool)
    live = np.ones(size, dtype=bool)
    for _ in range(p):
        idx = np.nonzero(live)[0]
        if idx.size == 0:
            break
        cur = models[idx]
        rho = prior.rho_batch(cur)
        stop = rng.random(idx.size) < rho
        live[idx[stop]] = False
        go = idx[~stop]
        if go.size == 0:
            continue
        lam = prior.lam_batch(cur[~stop], rho[~stop])
        cdf = np.cumsum(lam, axis=1)
        u = rng.random(go.size) * cdf[:, -1]
        j = np.minimum((cdf <= u[:, None]).sum(axis=1), p - 1)
        models[go, j] = True
    return models
