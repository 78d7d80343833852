"""Metropolis-Hastings over models with add, delete and swap moves.

At each iteration a move type is drawn uniformly from those feasible at the
current model (add needs an excluded predictor, delete an included one,
swap both), then a move of that type uniformly at random.  The Hastings
ratio accounts for the reverse move being drawn from a possibly different
number of feasible types and moves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .bayes import BayesFactor
from .errors import ConfigError
from .models import ENUMERATION_LIMIT, ModelVector
from .priors import PfsPrior, marginal_model_probability

log = logging.getLogger(__name__)

ADD, DELETE, SWAP = 0, 1, 2


def prior_log_evaluator(prior: PfsPrior, limit: int = ENUMERATION_LIMIT) -> Callable[[int], float]:
    """Pointwise log prior as a function of the integer mask.

    Symmetric priors use the closed form; other priors need the full
    dynamic-programming table and so ``p <= limit``.
    """
    p = prior.p
    q = prior.size_distribution
    if q is not None:
        with np.errstate(divide="ignore"):
            by_size = np.log(q) - np.array([math.lgamma(p + 1) - math.lgamma(s + 1) - math.lgamma(p - s + 1)
                                            for s in range(p + 1)])
        return lambda mask: float(by_size[bin(mask).count("1")])
    if p > limit:
        raise ConfigError(f"pointwise prior for a non-symmetric prior needs p <= {limit}")
    with np.errstate(divide="ignore"):
        table = np.log(marginal_model_probability(prior, limit=limit))
    return lambda mask: float(table[mask])


def _feasible(size: int, p: int) -> tuple:
    moves = []
    if size < p:
        moves.append(ADD)
    if size > 0:
        moves.append(DELETE)
    if 0 < size < p:
        moves.append(SWAP)
    return tuple(moves)


def _log_move_prob(kind: int, size: int, p: int) -> float:
    """Log probability of proposing one specific move of ``kind`` from a model of ``size``."""
    n_types = len(_feasible(size, p))
    count = {ADD: p - size, DELETE: size, SWAP: size * (p - size)}[kind]
    return -math.log(n_types) - math.log(count)


_REVERSE = {ADD: DELETE, DELETE: ADD, SWAP: SWAP}


@dataclass
class Mc3Result:
    """Post-burn-in chain (bit-packed rows) with inclusion estimates."""

    p: int
    chain: np.ndarray
    pips: np.ndarray
    se: np.ndarray
    accepted: int
    iterations: int
    burnin: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / max(self.iterations, 1)

    def models(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Boolean rows of the stored chain."""
        return np.unpackbits(self.chain[start:stop], axis=1, count=self.p, bitorder="little").astype(bool)

    def model(self, i: int) -> ModelVector:
        return ModelVector.from_array(self.models(i, i + 1)[0])


def _pack(mask: int, nbytes: int) -> np.ndarray:
    return np.frombuffer(mask.to_bytes(nbytes, "little"), dtype=np.uint8)


def mc3_run(bf: BayesFactor, log_prior: Union[PfsPrior, Callable[[int], float]], iterations: int,
            burnin: int = 0, seed: int = 0, start: Optional[ModelVector] = None,
            batches: int = 50) -> Mc3Result:
    """Run one chain for ``burnin + iterations`` steps.

    Parameters
    ----------
    bf : BayesFactor
        Log Bayes factor against the null.
    log_prior : PfsPrior or callable
        The prior, or a function from integer mask to log prior probability.
    iterations, burnin : int
        Retained and discarded iterations.
    batches : int
        Number of batches for the batch-means standard errors.
    """
    p = bf.p
    if p < 1:
        raise ConfigError("no feasible move when p = 0")
    if iterations < 1 or burnin < 0:
        raise ConfigError("iterations must be positive and burn-in nonnegative")
    if isinstance(log_prior, PfsPrior):
        if log_prior.p != p:
            raise ConfigError(f"prior has p={log_prior.p} but the Bayes factor has p={p}")
        log_prior = prior_log_evaluator(log_prior)

    def target(mask: int) -> float:
        lp = log_prior(mask)
        if lp == -math.inf:
            return lp
        return lp + bf(ModelVector(p, mask))

    mask = start.mask if start is not None else 0
    inc = [j for j in range(p) if (mask >> j) & 1]
    exc = [j for j in range(p) if not (mask >> j) & 1]
    cur = target(mask)
    if cur == -math.inf:
        raise ConfigError("starting model has zero posterior probability")

    nbytes = (p + 7) // 8
    chain = np.empty((iterations, nbytes), dtype=np.uint8)
    rng = np.random.default_rng(seed)
    accepted = 0
    total = burnin + iterations
    chunk = 65536
    for lo in range(0, total, chunk):
        n = min(chunk, total - lo)
        u_type, u_move, u_acc = rng.random((3, n))
        for k in range(n):
            it = lo + k
            size = len(inc)
            types = _feasible(size, p)
            kind = types[int(u_type[k] * len(types))]
            if kind == ADD:
                r = int(u_move[k] * len(exc))
                j_in, j_out = exc[r], None
                new = mask | (1 << j_in)
                new_size = size + 1
            elif kind == DELETE:
                r = int(u_move[k] * len(inc))
                j_in, j_out = None, inc[r]
                new = mask & ~(1 << j_out)
                new_size = size - 1
            else:
                r = int(u_move[k] * size * len(exc))
                j_out, j_in = inc[r // len(exc)], exc[r % len(exc)]
                new = (mask & ~(1 << j_out)) | (1 << j_in)
                new_size = size
            prop = target(new)
            log_ratio = (prop - cur + _log_move_prob(_REVERSE[kind], new_size, p)
                         - _log_move_prob(kind, size, p))
            if prop > -math.inf and (log_ratio >= 0 or u_acc[k] < math.exp(log_ratio)):
                mask, cur = new, prop
                if j_in is not None:
                    exc.remove(j_in)
                    inc.append(j_in)
                if j_out is not None:
                    inc.remove(j_out)
                    exc.append(j_out)
                if it >= burnin:
                    accepted += 1
            if it >= burnin:
                chain[it - burnin] = _pack(mask, nbytes)

    pips, se = _batch_means(chain, p, batches)
    log.info("MC3: %d iterations, acceptance %.3f", iterations, accepted / iterations)
    return Mc3Result(p, chain, pips, se, accepted, iterations, burnin)


def mc3_estimate(result: Mc3Result, delta, batches: int = 50):
    """Chain average of a per-model quantity with its batch-means standard error.

    ``delta`` is any object with a ``batch(bool_models)`` method, such as the
    evaluators in :mod:`pfsbma.lips`.
    """
    n = result.chain.shape[0]
    b = max(1, min(batches, n))
    edges = np.linspace(0, n, b + 1).astype(int)
    means = np.array([np.asarray(delta.batch(result.models(edges[i], edges[i + 1])), dtype=float).mean(axis=0)
                      for i in range(b)])
    sizes = np.diff(edges).reshape((b,) + (1,) * (means.ndim - 1))
    value = (means * sizes).sum(axis=0) / n
    if b < 2:
        return value, np.full(np.shape(value), np.inf)
    return value, means.std(axis=0, ddof=1) / math.sqrt(b)


def _batch_means(chain: np.ndarray, p: int, batches: int):
    n = chain.shape[0]
    b = max(1, min(batches, n))
    edges = np.linspace(0, n, b + 1).astype(int)
    means = np.empty((b, p))
    for i in range(b):
        rows = np.unpackbits(chain[edges[i]:edges[i + 1]], axis=1, count=p, bitorder="little")
        means[i] = rows.mean(axis=0)
    sizes = np.diff(edges)
    pips = (means * sizes[:, None]).sum(axis=0) / n
    if b < 2:
        return pips, np.full(p, np.inf)
    se = means.std(axis=0, ddof=1) / math.sqrt(b)
    return pips, se
