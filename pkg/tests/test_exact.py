import math

import numpy as np
import pytest

from instances import instance, regression
from oracles import exact_posterior_brute, path_marginal, phi_direct
from pfsbma import CoefficientPrior, ModelVector, RegressionBayesFactor
from pfsbma.bayes import ConstantBayesFactor, TableBayesFactor
from pfsbma.errors import CapacityError
from pfsbma.exact import canonical_table, compute_phi, exact_mean, exact_pip, exact_posterior, posterior_pfs
from pfsbma.models import masks_to_bool
from pfsbma.priors import (
    ConditionalSelection, PfsPrior, SizeStopping, beta_binomial_pfs, marginal_model_probability,
    pathway_rule, size_vector_pfs, weighted_selection,
)

WORKED_BF = np.log([1.0, 2.0, 4.0, 8.0])   # by mask: 00, 10, 01, 11


def uniform_p2():
    return size_vector_pfs([1 / 3] * 3)


def decorated_prior(p):
    base = beta_binomial_pfs(p, 1.5, 2.5)
    sel = ConditionalSelection(weighted_selection(np.arange(1, p + 1), 2.0, [0]), [pathway_rule([1], p - 1, 3.0)])
    return PfsPrior(base.stopping, sel, None, "decorated")


class TestPhi:
    def test_unit_bayes_factor(self):
        np.testing.assert_allclose(compute_phi(beta_binomial_pfs(6), ConstantBayesFactor(6)), 0.0, atol=1e-14)

    def test_full_model(self):
        data = regression(1, 40, 6)
        bf = RegressionBayesFactor(data, CoefficientPrior.g_prior(40))
        assert compute_phi(beta_binomial_pfs(6), bf)[63] == bf(ModelVector.full(6))

    def test_worked_recursion(self):
        phi = np.exp(compute_phi(uniform_p2(), TableBayesFactor(WORKED_BF)))
        np.testing.assert_allclose(phi, [4.0, 5.0, 6.0, 8.0], rtol=1e-14)

    @pytest.mark.parametrize("seed", [1, 2])
    def test_matches_direct_recursion(self, seed):
        p = 7
        prior = decorated_prior(p)
        bf = RegressionBayesFactor(regression(seed, 40, p), CoefficientPrior.g_prior(40))
        log_bf = bf.batch(np.arange(1 << p))
        np.testing.assert_allclose(compute_phi(prior, bf), np.log(phi_direct(prior, log_bf, ModelVector)), rtol=1e-12)

    def test_dominates_stopping_mass(self):
        p = 8
        prior = beta_binomial_pfs(p)
        bf = RegressionBayesFactor(regression(3, 50, p), CoefficientPrior.g_prior(50))
        log_phi = compute_phi(prior, bf)
        models = masks_to_bool(np.arange(1 << p), p)
        with np.errstate(divide="ignore"):
            stop = np.log(prior.rho_batch(models)) + bf.batch(np.arange(1 << p))
        assert np.all(log_phi >= stop - 1e-12)
        assert np.all(np.isfinite(log_phi))

    def test_capacity(self):
        with pytest.raises(CapacityError):
            compute_phi(beta_binomial_pfs(21), ConstantBayesFactor(21))


class TestPosteriorMappings:
    def test_worked_rho(self):
        post = posterior_pfs(uniform_p2(), compute_phi(uniform_p2(), TableBayesFactor(WORKED_BF)),
                             TableBayesFactor(WORKED_BF))
        assert post.rho(ModelVector(2, 0)) == pytest.approx(1 / 12, rel=1e-14)
        # λ(null|D) ∝ φ(children) = (5, 6)
        np.testing.assert_allclose(post.lam(ModelVector(2, 0)), [5 / 11, 6 / 11], rtol=1e-14)

    def test_no_information(self):
        p = 5
        prior = decorated_prior(p)
        bf = ConstantBayesFactor(p)
        post = posterior_pfs(prior, compute_phi(prior, bf), bf)
        models = masks_to_bool(np.arange((1 << p) - 1), p)
        np.testing.assert_allclose(post.rho_batch(models), prior.rho_batch(models), atol=1e-14)
        np.testing.assert_allclose(post.lam_batch(models), prior.lam_batch(models), atol=1e-14)

    def test_certain_stop_branch(self):
        p = 6
        prior = beta_binomial_pfs(p).capped(3)
        bf = RegressionBayesFactor(regression(5, 40, p), CoefficientPrior.g_prior(40))
        post = posterior_pfs(prior, compute_phi(prior, bf), bf)
        for mask in range(1 << p):
            m = ModelVector(p, mask)
            if m.size >= 3 and not m.is_full():
                assert post.rho(m) == 1.0
                np.testing.assert_allclose(post.lam(m), prior.lam(m))

    @pytest.mark.parametrize("seed", range(5))
    def test_mappings_reproduce_enumeration(self, seed):
        p = 8
        prior = beta_binomial_pfs(p) if seed % 2 else decorated_prior(p)
        bf = RegressionBayesFactor(regression(seed, 50, p), CoefficientPrior.g_prior(50))
        post = posterior_pfs(prior, compute_phi(prior, bf), bf)
        np.testing.assert_allclose(marginal_model_probability(post), exact_posterior(prior, bf), atol=1e-10, rtol=0)

    def test_mappings_reproduce_enumeration_p12_hyper_g(self):
        p = 12
        prior = beta_binomial_pfs(p)
        bf = RegressionBayesFactor(regression(7, 60, p), CoefficientPrior.hyper_g(3))
        post = posterior_pfs(prior, compute_phi(prior, bf), bf)
        np.testing.assert_allclose(marginal_model_probability(post), exact_posterior(prior, bf), atol=1e-10, rtol=0)

    def test_fallback_to_prior(self):
        p = 3
        log_bf = np.full(8, -np.inf)
        log_bf[0] = 0.0
        log_bf[1] = 0.0          # only null and {1} are estimable
        prior = beta_binomial_pfs(p)
        bf = TableBayesFactor(log_bf)
        diag = {}
        post = posterior_pfs(prior, compute_phi(prior, bf), bf, diagnostics=diag)
        assert diag["prior_fallback"] > 0
        # from {1} nothing further is estimable: stop for sure
        assert post.rho(ModelVector(3, 1)) == 1.0
        np.testing.assert_allclose(marginal_model_probability(post), exact_posterior(prior, bf), atol=1e-12)

    def test_mappings_valid(self):
        p = 7
        prior = decorated_prior(p)
        bf = RegressionBayesFactor(regression(9, 40, p), CoefficientPrior.hyper_g(3))
        post = posterior_pfs(prior, compute_phi(prior, bf), bf)
        models = masks_to_bool(np.arange((1 << p) - 1), p)
        rho, lam = post.rho_batch(models), post.lam_batch(models)
        assert np.all((rho >= 0) & (rho <= 1))
        assert np.all(lam[models] == 0)
        np.testing.assert_allclose(lam[rho < 1].sum(axis=1), 1.0, atol=1e-12)
        # support of the posterior selection lies inside the prior's
        assert np.all(prior.lam_batch(models)[lam > 0] > 0)


class TestEnumerationPosterior:
    def test_unit_bayes_factor(self):
        prior = decorated_prior(5)
        np.testing.assert_allclose(exact_posterior(prior, ConstantBayesFactor(5)), marginal_model_probability(prior),
                                   atol=1e-15)

    def test_worked_table(self):
        post = exact_posterior(uniform_p2(), TableBayesFactor(WORKED_BF))
        np.testing.assert_allclose(post, np.array([1 / 3, 1 / 3, 2 / 3, 8 / 3]) / 4, rtol=1e-14)

    def test_matches_brute_force(self):
        X, y = instance(12, 40, 6)
        prior = decorated_prior(6)
        bf = RegressionBayesFactor(regression(12, 40, 6), CoefficientPrior.g_prior(40))
        np.testing.assert_allclose(exact_posterior(prior, bf), exact_posterior_brute(prior, X, y, 40.0, ModelVector),
                                   atol=1e-12)

    def test_normalized(self):
        bf = RegressionBayesFactor(regression(2, 50, 10), CoefficientPrior.g_prior(50))
        assert exact_posterior(beta_binomial_pfs(10), bf).sum() == pytest.approx(1.0, abs=1e-10)


class TestPip:
    def test_point_mass(self):
        table = np.zeros(16)
        table[0b1010] = 1.0
        np.testing.assert_array_equal(exact_pip(table), [0, 1, 0, 1])

    def test_exchangeable(self):
        pip = exact_pip(exact_posterior(beta_binomial_pfs(6, 2, 3), ConstantBayesFactor(6)))
        np.testing.assert_allclose(pip, pip[0], atol=1e-14)
        # prior mean size (p a / (a + b)) spread evenly
        assert pip[0] == pytest.approx(2 / 5, rel=1e-12)

    def test_exact_mean(self):
        post = exact_posterior(uniform_p2(), TableBayesFactor(WORKED_BF))
        sizes = np.array([0, 1, 1, 2])
        assert exact_mean(post, sizes) == pytest.approx(sum(exact_pip(post)), rel=1e-14)

    def test_canonical_table(self):
        masks, table = canonical_table(np.arange(8.0), 3)
        assert list(masks) == [0, 1, 2, 4, 3, 5, 6, 7]
        assert list(table) == [0, 1, 2, 4, 3, 5, 6, 7]
