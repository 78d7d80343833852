"""Bayesian model averaging with probabilistic forward-stepwise (pFS) priors.

The package represents model-space priors through stopping and selection
rules, computes exact posteriors by enumeration at small dimension, and
samples posteriors at larger dimension with the LIPS sequential Monte Carlo
sampler.  An MC3 chain is included as a baseline.
"""

__version__ = "0.1.0"

from .bayes import (
    BayesFactor, CoefficientPrior, ConstantBayesFactor, RegressionBayesFactor, RegressionData,
    TableBayesFactor, gauss_2f1, log_bf0, log_gauss_2f1,
)
from .errors import CapacityError, CollinearityError, ConfigError, DataError, DomainError
from .exact import compute_phi, exact_pip, exact_posterior, posterior_pfs
from .lips import (
    HtEstimate, LipsConfig, LipsResult, all_pips_delta, ht_estimate, islanded_estimate, pip_delta,
    prediction_delta, run_lips,
)
from .mc3 import Mc3Result, mc3_estimate, mc3_run
from .models import ModelVector, enumerate_models, path_probability, transition_probability
from .priors import (
    PfsPrior, TabulatedPfs, beta_binomial_pfs, dilution_prior, marginal_model_probability,
    pfs_from_distribution, size_vector_pfs, symmetric_pfs,
)
from .proposal import ProposalCache, phi_hat, proposal_at
from .workbench import Dataset, SplitSpec, ase, load_csv, simulate_dataset, simulate_design, simulate_response
