"""Depth-limited look-ahead proposals for the sequential sampler.

At a model ``γ`` the expected-Bayes-factor recursion is unrolled ``k``
levels (leaves use the plain Bayes factor).  The parent value and the child
values come from one shared tree, so the parent always equals its own
one-step combination of the children and the selection probabilities sum
to one without renormalization.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .bayes import BayesFactor, colex_combinations
from .models import ModelVector
from .priors import PfsPrior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProposalDistribution:
    """Proposal stopping/selection probabilities at one model, with the
    log-weight increments each decision implies."""

    model: ModelVector
    rho: float
    lam: np.ndarray
    rho_hat: float
    lam_hat: np.ndarray
    log_phi: float
    log_phi_children: np.ndarray
    log_bf: float
    log_bf_children: np.ndarray
    stop_increment: float
    select_increment: np.ndarray
    forced_stop: bool = False


def default_lookahead(p: int) -> int:
    return 3 if p <= 500 else 2


@lru_cache(maxsize=64)
def _child_rank_table(nf: int, d: int) -> np.ndarray:
    """Colex rank of ``node ∪ {m}`` for each level-``d`` node and local index ``m``.

    Entries where ``m`` is already in the node are set to 0; their selection
    probability is zero so the value is never used.
    """
    combos = colex_combinations(nf, d)
    m = np.arange(nf, dtype=np.int64)
    if d == 0:
        return m[None, :].copy()
    i = np.arange(d, dtype=np.int64)
    low = _comb(combos, i + 1)                 # element keeps its position
    high = _comb(combos, i + 2)                # element shifted right by the insert
    less = combos[:, :, None] < m[None, None, :]
    q = less.sum(axis=1)
    rank = np.where(less, low[:, :, None], high[:, :, None]).sum(axis=1) + _comb(m[None, :], q + 1)
    member = (combos[:, :, None] == m[None, None, :]).any(axis=1)
    rank[member] = 0
    return rank


def _comb(n, k):
    n = np.asarray(n, dtype=np.int64)
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), np.broadcast_shapes(n.shape, np.shape(k)))
    n = np.broadcast_to(n, k.shape)
    out = np.ones(k.shape, dtype=np.int64)
    for i in range(int(k.max()) if k.size else 0):
        active = i < k
        out = np.where(active, out * (n - i) // (i + 1), out)
    return np.where(n >= k, out, 0)


def _node_models(base: ModelVector, free: np.ndarray, combos: np.ndarray) -> np.ndarray:
    models = np.repeat(base.to_array()[None, :], len(combos), axis=0)
    if combos.shape[1]:
        rows = np.repeat(np.arange(len(combos)), combos.shape[1])
        models[rows, free[combos.ravel()]] = True
    return models


def _expand(base: ModelVector, k: int, prior: PfsPrior, bf: BayesFactor):
    """Unroll the recursion ``k`` levels below ``base``.

    Returns ``(log_phi_root, log_phi_children, log_bf_children, free)``;
    child arrays are indexed by local (free) position.
    """
    free = np.array(base.excluded(), dtype=np.int64)
    nf = free.size
    levels, leaves = bf.lookahead(base, free, k)
    log_bf_children = np.array(levels[1] if k >= 2 else leaves[0], dtype=float)
    shift = max(float(np.max(v)) for v in (*levels, leaves))
    if not np.isfinite(shift):
        shift = 0.0

    phi_next = None
    for d in range(k - 1, -1, -1):
        own = np.exp(levels[d] - shift)
        if d == k - 1:
            below = leaves
            below -= shift
            np.exp(below, out=below)
            shared = prior.size_only_rho(base.size + d)
            if shared is not None:
                # uniform selection: members of the node have below == 0
                phi_next = shared * own + (1.0 - shared) / (prior.p - base.size - d) * below.sum(axis=1)
                if d == 0:
                    children = below[0]
                continue
        else:
            below = phi_next[_child_rank_table(nf, d)]
        combos = colex_combinations(nf, d)
        models = _node_models(base, free, combos)
        rho = prior.rho_batch(models)
        lam = prior.lam_batch(models, rho)[:, free]
        # every entry of ``below`` is finite, so zero-probability branches drop out
        phi_next = rho * own + (1.0 - rho) * np.einsum("ij,ij->i", lam, below)
        if d == 0:
            children = below[0]
    with np.errstate(divide="ignore"):
        log_root = float(np.log(phi_next[0])) + shift
        log_children = np.log(children) + shift
    return log_root, log_children, log_bf_children, free


def phi_hat(model: ModelVector, k: int, prior: PfsPrior, bf: BayesFactor) -> float:
    """Log of the ``k``-level look-ahead value at ``model`` (anchored at itself)."""
    if k < 1:
        raise ValueError("look-ahead depth must be at least 1")
    depth = _depth(model, k, prior)
    if depth == 0:
        return float(bf(model))
    return _expand(model, depth, prior, bf)[0]


def _depth(model: ModelVector, k: int, prior: PfsPrior) -> int:
    return max(0, min(k, prior.p - model.size, prior.s_max - model.size))


def proposal_at(model: ModelVector, k: int, prior: PfsPrior, bf: BayesFactor) -> ProposalDistribution:
    """Proposal mappings at ``model`` from a ``k``-level look-ahead.

    ``k = 0`` returns the prior mappings themselves (with the Bayes-factor
    increments needed for the weight update).
    """
    p = prior.p
    rho = prior.rho(model)
    log_bf = float(bf(model))
    nan = np.full(p, np.nan)
    if rho >= 1.0:
        return ProposalDistribution(model, 1.0, np.zeros(p), 1.0, np.zeros(p), log_bf, nan, log_bf,
                                    nan, 0.0, nan)
    lam = prior.lam(model)
    free = np.array(model.excluded(), dtype=np.int64)
    if k == 0:
        _, leaves = bf.lookahead(model, free, 1)
        bf_children = np.full(p, -np.inf)
        bf_children[free] = leaves[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            inc = np.where(lam > 0, bf_children - log_bf, np.nan)
        return ProposalDistribution(model, rho, lam, rho, lam.copy(), np.nan, nan, log_bf,
                                    bf_children, 0.0, inc)

    depth = _depth(model, k, prior)
    log_root, log_children_local, bf_children_local, free = _expand(model, depth, prior, bf)
    log_children = np.full(p, -np.inf)
    log_children[free] = log_children_local
    bf_children = np.full(p, -np.inf)
    bf_children[free] = bf_children_local

    with np.errstate(divide="ignore", invalid="ignore"):
        log_rho = np.log(rho)
        log_go = np.log1p(-rho)
        log_lam = np.log(lam)
        weighted = np.where(lam > 0, log_lam + log_children, -np.inf)
    top = weighted.max()
    forced = not np.isfinite(top)
    if forced:
        log.debug("no selectable child at %s; forcing a stop", model)
        return ProposalDistribution(model, rho, lam, 1.0, lam.copy(), log_root, log_children, log_bf,
                                    bf_children, log_rho, np.full(p, np.nan), True)
    log_sum = top + np.log(np.exp(weighted - top).sum())
    lam_hat = np.exp(weighted - log_sum)
    log_rho_hat = log_rho + log_bf - log_root
    log_go_hat = log_go + log_sum - log_root
    rho_hat = float(np.clip(np.exp(log_rho_hat), 0.0, 1.0))
    with np.errstate(invalid="ignore"):
        stop_inc = float(log_rho - log_rho_hat) if rho > 0 else np.nan
        sel_inc = np.where(lam_hat > 0,
                           (log_go + log_lam) - (log_go_hat + weighted - log_sum)
                           + bf_children - log_bf, np.nan)
    return ProposalDistribution(model, rho, lam, rho_hat, lam_hat, log_root, log_children, log_bf,
                                bf_children, stop_inc, sel_inc)


class ProposalCache:
    """Memoize proposals by model; the proposal is a pure function of the model."""

    def __init__(self, k: int, prior: PfsPrior, bf: BayesFactor, max_entries: int = 200_000):
        self.k = k
        self.prior = prior
        self.bf = bf
        self.max_entries = max_entries
        self._store = {}
        self._lock = threading.Lock()
        self.built = 0

    def __call__(self, model: ModelVector) -> ProposalDistribution:
        hit = self._store.get(model.mask)
        if hit is None:
            # built outside the lock; two threads may race to the same entry, which is harmless
            hit = proposal_at(model, self.k, self.prior, self.bf)
            with self._lock:
                self.built += 1
                if len(self._store) >= self.max_entries:
                    self._store.clear()
                self._store[model.mask] = hit
        return hit
