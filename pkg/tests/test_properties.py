"""Property-based checks of the structural invariants."""

import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pfsbma import CoefficientPrior, ModelVector, RegressionBayesFactor, RegressionData
from pfsbma.bayes import TableBayesFactor, extend_state, null_state
from pfsbma.errors import CollinearityError
from pfsbma.exact import compute_phi, exact_posterior, posterior_pfs
from pfsbma.lips import LipsConfig, ht_from_values, run_lips
from pfsbma.models import transition_probability
from pfsbma.priors import (
    ConditionalSelection, PfsPrior, marginal_model_probability, pathway_rule, pfs_from_distribution,
    size_prior_to_h, symmetric_pfs, weighted_selection,
)

unit = st.floats(0.05, 1.0)


@st.composite
def simplex(draw, size):
    w = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=size, max_size=size)))
    assume(w.sum() > 1e-3)
    return w / w.sum()


@st.composite
def priors(draw, p_max=6):
    p = draw(st.integers(1, p_max))
    q = draw(simplex(p + 1))
    weights = draw(st.lists(unit, min_size=p, max_size=p))
    sel = weighted_selection(weights)
    if p >= 2 and draw(st.booleans()):
        trig, target = draw(st.permutations(range(p)))[:2]
        sel = ConditionalSelection(sel, [pathway_rule([trig], target, draw(st.floats(0.5, 4.0)))])
    return PfsPrior(size_prior_to_h(q), sel, None, "random")


@st.composite
def models(draw, p):
    return ModelVector(p, draw(st.integers(0, (1 << p) - 1)))


@given(priors(), st.data())
def test_kernel_rows_sum_to_one(prior, data):
    p = prior.p
    prev = data.draw(models(p))
    assume(prev.size < p)
    t = prev.size + 1
    total = transition_probability(prior, prev, prev, t)
    total += sum(transition_probability(prior, prev, prev.add(j), t) for j in prev.excluded())
    assert total == pytest.approx(1.0, abs=1e-12)


@given(priors(), st.data())
def test_selection_is_a_distribution_on_excluded(prior, data):
    m = data.draw(models(prior.p))
    assume(not m.is_full())
    lam = prior.lam(m)
    assert np.all(lam >= 0) and lam.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(lam[list(m.indices())] == 0)
    assert 0.0 <= prior.rho(m) <= 1.0


@given(priors())
def test_marginal_is_a_distribution(prior):
    pi = marginal_model_probability(prior)
    assert np.all(pi >= 0) and pi.sum() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(1, 5).flatmap(lambda p: simplex(1 << p)))
def test_representation_round_trip(pi):
    np.testing.assert_allclose(marginal_model_probability(pfs_from_distribution(pi)), pi, atol=1e-10)


@given(st.integers(1, 7).flatmap(lambda p: simplex(p + 1)))
def test_symmetric_prior_spreads_size_mass_evenly(q):
    p = q.size - 1
    pi = marginal_model_probability(symmetric_pfs(q))
    sizes = np.array([bin(m).count("1") for m in range(1 << p)])
    expected = q[sizes] / np.array([math.comb(p, s) for s in sizes])
    np.testing.assert_allclose(pi, expected, atol=1e-12)


@given(priors(5), st.data())
def test_posterior_mappings_reproduce_posterior(prior, data):
    p = prior.p
    lbf = data.draw(arrays(float, 1 << p, elements=st.floats(-8, 8)))
    lbf[0] = 0.0
    bf = TableBayesFactor(lbf)
    post = posterior_pfs(prior, compute_phi(prior, bf), bf)
    for m in range(1 << p):
        if m != (1 << p) - 1:
            lam = post.lam(ModelVector(p, m))
            assert lam.sum() == pytest.approx(1.0, abs=1e-9) or lam.sum() == 0.0
    np.testing.assert_allclose(marginal_model_probability(post), exact_posterior(prior, bf), atol=1e-10)


@given(priors(5), st.data())
def test_full_lookahead_weights_are_equal(prior, data):
    p = prior.p
    lbf = data.draw(arrays(float, 1 << p, elements=st.floats(-6, 6)))
    lbf[0] = 0.0
    res = run_lips(prior, TableBayesFactor(lbf), LipsConfig(particles=64, lookahead=p, seed=1)).islands[0]
    assert np.ptp(res.log_weights) < 1e-9


@given(st.integers(2, 200).flatmap(
    lambda n: st.tuples(arrays(float, n, elements=st.floats(-30, 30)), arrays(float, n, elements=st.floats(-5, 5)))),
    st.floats(-500, 500))
def test_ht_scale_invariance_and_range(pair, shift):
    lw, z = pair
    a, b = ht_from_values(lw, z), ht_from_values(lw + shift, z)
    assert a.value == pytest.approx(b.value, abs=1e-9)
    assert a.se == pytest.approx(b.se, rel=1e-6, abs=1e-9)
    assert z.min() - 1e-9 <= a.value <= z.max() + 1e-9


def _regression(seed, n, p):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    return X, X[:, 0] - 0.5 * X[:, -1] + rng.standard_normal(n)


@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50),
       arrays(float, 4, elements=st.floats(0.1, 10)), st.booleans())
def test_bayes_factor_invariant_to_affine_rescaling(seed, scale, shift, col_scale, hyper):
    X, y = _regression(seed, 25, 4)
    coef = CoefficientPrior.hyper_g(3.0) if hyper else CoefficientPrior.g_prior(25)
    a = RegressionBayesFactor(RegressionData(X, y), coef)
    b = RegressionBayesFactor(RegressionData(X * col_scale + shift, y * scale + shift), coef)
    for m in (ModelVector.from_indices(4, [0]), ModelVector.from_indices(4, [1, 3]), ModelVector(4, 15)):
        assert a(m) == pytest.approx(b(m), abs=1e-7)


@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_r2_grows_along_any_path(seed, order):
    X, y = _regression(seed, 20, 5)
    data = RegressionData(X, y)
    state = null_state(data)
    last = state.r2
    for j in order:
        try:
            state = extend_state(state, j, data)
        except CollinearityError:
            break
        assert state.r2 >= last - 1e-12
        last = state.r2
    assert last <= 1.0


@given(st.integers(1, 12).flatmap(lambda p: st.tuples(st.just(p), st.integers(0, (1 << p) - 1))))
def test_model_string_round_trip(pm):
    p, mask = pm
    m = ModelVector(p, mask)
    assert ModelVector.from_string(m.to_string()) == m
    assert ModelVector.from_array(m.to_array()) == m
    assert ModelVector.from_indices(p, m.indices()) == m
