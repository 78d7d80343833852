"""Exact posterior computation by full enumeration (small ``p``).

``compute_phi`` is the backward sweep over model sizes that turns the prior
stepwise mappings into posterior ones; ``exact_posterior`` is the direct
prior-times-likelihood computation.  Agreement between the two routes is the
main correctness check for the posterior mappings.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .bayes import BayesFactor
from .models import ENUMERATION_LIMIT, canonical_masks, check_enumerable
from .priors import PfsPrior, TabulatedPfs, level_tables, marginal_model_probability

log = logging.getLogger(__name__)

RENORM_TOL = 1e-9


def _all_log_bf(bf: BayesFactor, p: int) -> np.ndarray:
    masks = np.arange(1 << p, dtype=np.int64)
    return np.asarray(bf.batch(masks), dtype=float)


def _child_terms(masks, rho, lam, log_phi, p):
    """``log((1 - rho) lam_j phi(γ+j))`` for every row and predictor."""
    with np.errstate(divide="ignore"):
        log_go = np.log1p(-rho)
        log_lam = np.log(lam)
    children = masks[:, None] | (np.int64(1) << np.arange(p, dtype=np.int64))[None, :]
    terms = log_go[:, None] + log_lam + log_phi[children]
    terms[lam <= 0] = -np.inf
    return terms


def compute_phi(prior: PfsPrior, bf: BayesFactor, limit: int = ENUMERATION_LIMIT,
                log_bf: Optional[np.ndarray] = None) -> np.ndarray:
    """Log of the expected-Bayes-factor table over all ``2**p`` models.

    Returned array is indexed by integer mask.  Sizes are processed from
    ``p`` down to ``0``; each entry combines the model's own stopping term
    with its one-predictor extensions.
    """
    p = prior.p
    check_enumerable(p, limit)
    if log_bf is None:
        log_bf = _all_log_bf(bf, p)
    levels = level_tables(prior, limit)
    log_phi = np.full(1 << p, -np.inf)
    full = (1 << p) - 1
    log_phi[full] = log_bf[full]
    for s in range(p - 1, -1, -1):
        masks, rho, lam = levels[s]
        with np.errstate(divide="ignore"):
            stop_term = np.log(rho) + log_bf[masks]
        terms = _child_terms(masks, rho, lam, log_phi, p)
        log_phi[masks] = logsumexp(np.column_stack([stop_term, terms]), axis=1)
    return log_phi


def posterior_pfs(prior: PfsPrior, log_phi: np.ndarray, bf: BayesFactor,
                  limit: int = ENUMERATION_LIMIT, log_bf: Optional[np.ndarray] = None,
                  diagnostics: Optional[dict] = None) -> TabulatedPfs:
    """Posterior stopping and selection tables from a ``compute_phi`` table."""
    p = prior.p
    if log_bf is None:
        log_bf = _all_log_bf(bf, p)
    levels = level_tables(prior, limit)
    rho_post = np.ones(1 << p)
    lam_post = np.zeros((1 << p, p))
    fallback = renormalized = 0
    for s in range(p):
        masks, rho, lam = levels[s]
        certain = rho >= 1.0
        # rows with log φ = -inf give nan here; they are reset below
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.exp(np.log(rho) + log_bf[masks] - log_phi[masks])
        r = np.clip(r, 0.0, 1.0)
        r[certain] = 1.0
        terms = _child_terms(masks, rho, lam, log_phi, p)
        # φ(γ) - ρ(γ)BF(γ), evaluated as the sum it stands for
        denom = logsumexp(terms, axis=1)
        with np.errstate(invalid="ignore"):
            post = np.exp(terms - denom[:, None])
        dead = ~np.isfinite(denom) | certain
        post[dead] = lam[dead]
        fallback += int(np.sum(~np.isfinite(denom) & ~certain))
        total = post.sum(axis=1)
        off = np.abs(total - 1.0) > RENORM_TOL
        if off.any():
            renormalized += int(off.sum())
            log.debug("renormalized %d posterior selection rows at size %d", off.sum(), s)
            post[off] /= total[off, None]
        r[~np.isfinite(denom)] = 1.0
        rho_post[masks] = r
        lam_post[masks] = post
    if fallback:
        log.info("posterior selection fell back to prior at %d models", fallback)
    if diagnostics is not None:
        diagnostics["prior_fallback"] = fallback
        diagnostics["renormalized"] = renormalized
    return TabulatedPfs.from_tables(rho_post, lam_post, name="posterior")


def exact_posterior(prior: PfsPrior, bf: BayesFactor, limit: int = ENUMERATION_LIMIT,
                    log_bf: Optional[np.ndarray] = None) -> np.ndarray:
    """Posterior model probabilities by enumeration, indexed by integer mask."""
    p = prior.p
    check_enumerable(p, limit)
    if log_bf is None:
        log_bf = _all_log_bf(bf, p)
    marg = marginal_model_probability(prior, limit=limit)
    with np.errstate(divide="ignore"):
        logpost = np.log(marg) + log_bf
    logpost -= logsumexp(logpost)
    return np.exp(logpost)


def exact_pip(posterior: np.ndarray) -> np.ndarray:
    """Inclusion probability of each predictor under a posterior table."""
    posterior = np.asarray(posterior, dtype=float)
    p = int(np.log2(posterior.size))
    masks = np.arange(posterior.size, dtype=np.int64)
    return np.array([posterior[(masks >> j) & 1 == 1].sum() for j in range(p)])


def exact_mean(posterior: np.ndarray, values: np.ndarray) -> float:
    """Posterior mean of a per-model quantity (both indexed by integer mask)."""
    return float(np.dot(posterior, values))


def canonical_table(table: np.ndarray, p: int) -> tuple:
    """Masks in canonical order together with the table re-ordered to match."""
    masks = canonical_masks(p)
    return masks, np.asarray(table)[masks]
