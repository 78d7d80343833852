import math

import numpy as np
import pytest

from oracles import path_marginal
from pfsbma import ModelVector
from pfsbma.errors import ConfigError, DomainError
from pfsbma.models import enumerate_models, masks_to_bool
from pfsbma.priors import (
    ConditionalSelection, DilutionSelection, PfsPrior, SizeStopping, UniformSelection, beta_binomial_pfs,
    beta_binomial_size_prior, block_rule, complete_linkage_clusters, dilution_prior, interaction_rule,
    marginal_model_probability, pathway_rule, pfs_from_distribution, sample_final_models, simulate_pfs,
    size_prior_to_h, size_vector_pfs, symmetric_pfs, uniform_selection, weighted_selection,
)


def mv(text):
    return ModelVector.from_string(text)


def random_simplex(rng, p):
    w = rng.exponential(size=1 << p)
    return w / w.sum()


class TestSizeRule:
    def test_uniform_size_gives_harmonic_h(self):
        p = 6
        h = size_prior_to_h(np.full(p + 1, 1 / (p + 1))).h
        np.testing.assert_allclose(h, [1 / (p + 1 - s) for s in range(p + 1)], rtol=1e-14)

    def test_point_mass_at_null(self):
        rule = size_prior_to_h([1.0, 0, 0, 0])
        assert rule.h[0] == 1.0 and rule.s_max == 0

    def test_worked_h(self):
        np.testing.assert_allclose(size_prior_to_h([0.4, 0.3, 0.2, 0.1]).h, [0.4, 0.5, 2 / 3, 1.0], rtol=1e-14)

    def test_exhausted_mass_stops(self):
        rule = size_prior_to_h([0.5, 0.5, 0.0, 0.0])
        assert rule.s_max == 1
        np.testing.assert_allclose(rule.h, [0.5, 1.0, 1.0, 1.0])

    @pytest.mark.parametrize("q", [[0.5, 0.6], [-0.1, 1.1], [0.3, 0.3]])
    def test_invalid(self, q):
        with pytest.raises(DomainError):
            size_prior_to_h(q)

    def test_beta_binomial_1_1_is_uniform(self):
        np.testing.assert_allclose(beta_binomial_size_prior(9), np.full(10, 0.1), rtol=1e-12)


class TestUniformSelection:
    def test_null(self):
        np.testing.assert_allclose(uniform_selection(4)(mv("0000")), [0.25] * 4)

    def test_partial(self):
        np.testing.assert_allclose(uniform_selection(4)(mv("1010")), [0, 0.5, 0, 0.5])

    def test_one_left(self):
        np.testing.assert_allclose(uniform_selection(4)(mv("1101")), [0, 0, 1, 0])

    def test_full_model_row_is_zero(self):
        assert uniform_selection(3).batch(np.ones((1, 3), dtype=bool)).sum() == 0


class TestWeightedSelection:
    def test_unit_boost_equals_uniform(self):
        rule = weighted_selection(np.ones(5), 1.0)
        for m in enumerate_models(5):
            if not m.is_full():
                np.testing.assert_allclose(rule(m), uniform_selection(5)(m), atol=1e-15)

    def test_boosted(self):
        np.testing.assert_allclose(weighted_selection(np.ones(3), 2.0, [0])(mv("000")), [0.5, 0.25, 0.25])

    def test_boosted_variable_already_in(self):
        np.testing.assert_allclose(weighted_selection(np.ones(3), 2.0, [0])(mv("100")), [0, 0.5, 0.5])

    def test_rejects_bad_parameters(self):
        with pytest.raises(DomainError):
            weighted_selection(np.ones(3), 0.5)
        with pytest.raises(DomainError):
            weighted_selection([1.0, -1.0, 1.0])


class TestConditional:
    def test_pathway_doubles_before_normalizing(self):
        rule = ConditionalSelection(UniformSelection(4), [pathway_rule([0, 1], 3, 2.0)])
        # predictor 0 in the model, 1..3 excluded: weights (1, 1, 2) over (1, 2, 3)
        np.testing.assert_allclose(rule(mv("1000")), [0, 0.25, 0.25, 0.5])

    def test_interaction_needs_all_parents(self):
        rule = ConditionalSelection(UniformSelection(3), [interaction_rule([0, 1], 2)])
        assert rule(mv("100"))[2] == 0.0
        np.testing.assert_allclose(rule(mv("100")), [0, 1, 0])
        np.testing.assert_allclose(rule(mv("110")), [0, 0, 1])

    def test_untriggered_is_unchanged(self):
        rule = ConditionalSelection(UniformSelection(4), [pathway_rule([0], 3, 5.0)])
        np.testing.assert_allclose(rule(mv("0100")), uniform_selection(4)(mv("0100")))

    def test_dead_state_reported(self):
        # predictor 2 needs 0 and 1; from (0,0,1) nothing else is selectable once 0 and 1 are excluded
        sel = ConditionalSelection(UniformSelection(2), [interaction_rule([1], 0), interaction_rule([0], 1)])
        prior = PfsPrior(SizeStopping([0.5, 0.5, 1.0]), sel)
        with pytest.raises(ConfigError):
            prior.lam(mv("00"))


class TestBlocks:
    def setup_method(self):
        base = size_vector_pfs(np.full(6, 1 / 6))
        self.base = base
        stop, sel = block_rule(base.stopping, base.selection, [[1, 2]])
        self.prior = PfsPrior(stop, sel)

    def test_partial_block_forces_completion(self):
        assert self.prior.rho(mv("01000")) == 0.0
        np.testing.assert_allclose(self.prior.lam(mv("01000")), [0, 0, 1, 0, 0])

    def test_three_block(self):
        stop, sel = block_rule(self.base.stopping, self.base.selection, [[0, 1, 2]])
        np.testing.assert_allclose(PfsPrior(stop, sel).lam(mv("10000")), [0, 0.5, 0.5, 0, 0])

    def test_no_partial_block_defers(self):
        for text in ("00000", "01100", "10011"):
            assert self.prior.rho(mv(text)) == self.base.rho(mv(text))
            np.testing.assert_allclose(self.prior.lam(mv(text)), self.base.lam(mv(text)))

    def test_final_models_never_split_a_block(self):
        marg = marginal_model_probability(self.prior)
        for mask in range(32):
            if ((mask >> 1) & 1) != ((mask >> 2) & 1):
                assert marg[mask] == 0.0
        draws = sample_final_models(self.prior, 2000, np.random.default_rng(0))
        assert np.all(draws[:, 1] == draws[:, 2])

    def test_overlapping_blocks_rejected(self):
        with pytest.raises(DomainError):
            block_rule(self.base.stopping, self.base.selection, [[0, 1], [1, 2]])


class TestSymmetric:
    def test_beta_binomial_marginal(self):
        p = 15
        prior = beta_binomial_pfs(p)
        marg = marginal_model_probability(prior)
        sizes = masks_to_bool(np.arange(1 << p), p).sum(axis=1)
        np.testing.assert_allclose(marg, 1 / ((p + 1) * np.array([math.comb(p, s) for s in sizes])), rtol=1e-10)
        # equal total mass 1/16 per size
        np.testing.assert_allclose(np.bincount(sizes, weights=marg), np.full(p + 1, 1 / 16), rtol=1e-10)

    def test_point_mass_at_zero(self):
        marg = marginal_model_probability(symmetric_pfs([1.0, 0, 0, 0]))
        assert marg[0] == 1.0 and marg[1:].sum() == 0.0

    def test_worked_marginal(self):
        prior = symmetric_pfs([0.25] * 4)
        assert marginal_model_probability(prior, mv("110")) == pytest.approx(1 / 12, rel=1e-14)

    def test_closed_form_log_prior(self):
        prior = beta_binomial_pfs(7, 2, 5)
        marg = marginal_model_probability(prior)
        for m in enumerate_models(7):
            assert prior.log_prior(m) == pytest.approx(math.log(marg[m.mask]), rel=1e-12)


class TestMarginal:
    def test_uniform_size_p2(self):
        marg = marginal_model_probability(size_vector_pfs([1 / 3] * 3))
        np.testing.assert_allclose(marg, [1 / 3, 1 / 6, 1 / 6, 1 / 3], rtol=1e-14)

    def test_stop_at_null(self):
        prior = PfsPrior(SizeStopping([1.0, 0.5, 0.5, 1.0]), UniformSelection(3))
        np.testing.assert_array_equal(marginal_model_probability(prior), [1, 0, 0, 0, 0, 0, 0, 0])

    def test_matches_path_sum_for_decorated_prior(self):
        base = beta_binomial_pfs(5, 1.5, 2)
        sel = ConditionalSelection(weighted_selection([1, 2, 1, 3, 1], 2.0, [4]),
                                   [pathway_rule([0], 3, 3.0), interaction_rule([1, 2], 4)])
        prior = PfsPrior(base.stopping, sel)
        np.testing.assert_allclose(marginal_model_probability(prior), path_marginal(prior, ModelVector), atol=1e-14)
        assert marginal_model_probability(prior).sum() == pytest.approx(1.0, abs=1e-12)


class TestDilution:
    CLUSTERS = [[0, 1, 2], [3, 9], [4, 6, 8], [5, 7]]

    def corr(self):
        c = np.full((10, 10), 0.1)
        for cl in self.CLUSTERS:
            c[np.ix_(cl, cl)] = 0.95
        np.fill_diagonal(c, 1.0)
        return c

    def test_clusters_recovered(self):
        assert complete_linkage_clusters(self.corr(), 0.9) == sorted(self.CLUSTERS)

    def test_worked_case(self):
        lam = dilution_prior(self.corr(), 0.9)(ModelVector.from_indices(10, [0, 3, 4, 5, 7]))
        expected = np.zeros(10)
        expected[[1, 2]] = 1 / 6      # cluster {1,2,3}: two of three left
        expected[9] = 1 / 3           # cluster {4,10}: one left
        expected[[6, 8]] = 1 / 6      # cluster {5,7,9}: two left
        np.testing.assert_allclose(lam, expected, atol=1e-15)

    def test_identity_reduces_to_uniform(self):
        rule = dilution_prior(np.eye(5), 0.9)
        for m in enumerate_models(5):
            if not m.is_full():
                np.testing.assert_allclose(rule(m), uniform_selection(5)(m), atol=1e-15)

    def test_complete_not_single_linkage(self):
        c = np.array([[1, 0.95, 0.5], [0.95, 1, 0.95], [0.5, 0.95, 1.0]])
        assert complete_linkage_clusters(c, 0.9) == [[0, 1], [2]]

    def test_non_symmetric_rejected(self):
        with pytest.raises(DomainError):
            dilution_prior(np.array([[1, 0.2], [0.3, 1]]))

    def test_partition_required(self):
        with pytest.raises(DomainError):
            DilutionSelection([[0, 1], [1, 2]], 3)


class TestRepresentation:
    def test_p1(self):
        prior = pfs_from_distribution(np.array([0.3, 0.7]))
        assert prior.rho(mv("0")) == pytest.approx(0.3)
        assert prior.lam(mv("0"))[0] == 1.0
        assert prior.rho(mv("1")) == 1.0

    def test_point_mass_null(self):
        pi = np.zeros(8)
        pi[0] = 1
        assert pfs_from_distribution(pi).rho(mv("000")) == 1.0

    @pytest.mark.parametrize("p", [2, 3, 4, 6])
    def test_round_trip(self, p):
        rng = np.random.default_rng(100 + p)
        pi = random_simplex(rng, p)
        prior = pfs_from_distribution(pi)
        np.testing.assert_allclose(marginal_model_probability(prior), pi, atol=1e-12, rtol=0)
        np.testing.assert_allclose(path_marginal(prior, ModelVector), pi, atol=1e-12, rtol=0)

    def test_sparse_distribution(self):
        pi = np.zeros(16)
        pi[[0b0101, 0b1000, 0b1111]] = [0.5, 0.25, 0.25]
        np.testing.assert_allclose(marginal_model_probability(pfs_from_distribution(pi)), pi, atol=1e-14)

    def test_mappings_are_valid(self):
        prior = pfs_from_distribution(random_simplex(np.random.default_rng(1), 5))
        models = masks_to_bool(np.arange(31), 5)
        rho = prior.rho_batch(models)
        lam = prior.lam_batch(models)
        assert np.all((rho >= 0) & (rho <= 1))
        assert np.all(lam[models] == 0)
        live = rho < 1
        np.testing.assert_allclose(lam[live].sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("pi", [np.array([0.5, 0.6]), np.array([0.5, -0.1, 0.3, 0.3]), np.ones(3) / 3])
    def test_invalid(self, pi):
        with pytest.raises(DomainError):
            pfs_from_distribution(pi)


class TestSimulation:
    def test_stop_at_null(self):
        prior = PfsPrior(SizeStopping([1.0, 0.0, 0.0, 1.0]), UniformSelection(3))
        rng = np.random.default_rng(0)
        for _ in range(20):
            model, steps = simulate_pfs(prior, rng)
            assert model.mask == 0 and all(s.stop for s in steps)

    def test_path_length_and_consistency(self):
        prior = beta_binomial_pfs(6)
        rng = np.random.default_rng(1)
        for _ in range(50):
            model, steps = simulate_pfs(prior, rng)
            assert len(steps) == 6
            chosen = [s.selected for s in steps if not s.stop]
            assert sorted(chosen) == model.indices()
            first_stop = next((i for i, s in enumerate(steps) if s.stop), 6)
            assert all(s.stop for s in steps[first_stop:])

    def test_frequencies_match_marginal(self):
        prior = PfsPrior(SizeStopping([0.2, 0.3, 0.6, 1.0]), weighted_selection([1, 2, 3], 2.0, [0]))
        marg = marginal_model_probability(prior)
        N = 10 ** 6
        draws = sample_final_models(prior, N, np.random.default_rng(5))
        counts = np.bincount(draws @ (1 << np.arange(3)), minlength=8)
        se = np.sqrt(marg * (1 - marg) / N)
        assert np.all(np.abs(counts / N - marg) <= 4 * se + 1e-12)

    def test_scalar_sampler_matches_marginal(self):
        prior = beta_binomial_pfs(3, 2, 2)
        marg = marginal_model_probability(prior)
        rng = np.random.default_rng(9)
        N = 20000
        counts = np.zeros(8)
        for _ in range(N):
            counts[simulate_pfs(prior, rng)[0].mask] += 1
        se = np.sqrt(marg * (1 - marg) / N)
        assert np.all(np.abs(counts / N - marg) <= 4 * se)


class TestCapping:
    def test_capped_prior_stops(self):
        prior = beta_binomial_pfs(6).capped(2)
        assert prior.rho(mv("110000")) == 1.0
        marg = marginal_model_probability(prior)
        sizes = masks_to_bool(np.arange(64), 6).sum(axis=1)
        assert marg[sizes > 2].sum() == 0.0
        # mass above the cap is moved onto size 2
        np.testing.assert_allclose(np.bincount(sizes, weights=marg)[:3], [1 / 7, 1 / 7, 5 / 7], rtol=1e-12)
        for m in enumerate_models(6):
            if m.size <= 2:
                assert prior.log_prior(m) == pytest.approx(math.log(marg[m.mask]), rel=1e-12)


def test_representation_with_negligible_mass():
    # high/(low+high) underflows against low; the rows must stay finite
    pi = np.array([0.5, 0.5 - 1e-300, 1e-300, 0.0])
    rep = pfs_from_distribution(pi)
    assert np.all(np.isfinite(rep.lam_table)) and np.all(np.isfinite(rep.rho_table))
    np.testing.assert_allclose(marginal_model_probability(rep), pi, atol=1e-15)
