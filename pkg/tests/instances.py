"""Fixed-seed regression instances shared by the test modules."""

from __future__ import annotations

import numpy as np
from scipy.linalg import toeplitz

from pfsbma import RegressionData


def correlated_design(rng, n, p, rho=0.4):
    corr = toeplitz(rho ** np.arange(p))
    return rng.standard_normal((n, p)) @ np.linalg.cholesky(corr).T


def instance(seed, n, p, coefs=(0.6, -0.45, 0.35), noise=1.0):
    """Design with AR(0.4) correlation; signal on columns 0, 2 and 5 (as far as p allows)."""
    rng = np.random.default_rng(seed)
    X = correlated_design(rng, n, p)
    y = 2.0 + rng.standard_normal(n) * noise
    for j, c in zip((0, 2, 5), coefs):
        if j < p:
            y += c * X[:, j]
    return X, y


def regression(seed, n, p, **kw):
    X, y = instance(seed, n, p, **kw)
    return RegressionData(X, y)
