from dataclasses import replace

import numpy as np
import pytest

from healthtrends.gmrf import ols_slope
from healthtrends.model import HyperParams, age_basis, row_means
from healthtrends.sampler import SamplerConfig, run_chains
from healthtrends.validation import (
    STATISTICS,
    SyntheticSpec,
    choose_mask,
    cross_validate,
    default_true_hypers,
    posterior_predictive_check,
    recover_parameters,
    simulate_dataset,
)

SHORT = SamplerConfig(n_chains=1, n_burnin=300, n_iter=400, rng_seed=2)


# ----------------------------------------------------------------------------
# simulation


def test_noiseless_limit_is_deterministic_mean():
    ds = simulate_dataset(SyntheticSpec(seed=4, noiseless=True))
    d, t = ds.data, ds.truth
    # independent oracle: only global, covariate and age terms are nonzero
    mu = t.a_g + t.b_g * d.study_tc[d.row_study] + (d.X @ t.beta)[d.row_study]
    B = age_basis(d.z)
    expected = mu * (1.0 + B @ t.phi) + B @ t.psi
    assert np.allclose(d.y, expected, atol=1e-9)
    assert np.allclose(d.y, row_means(d, t), atol=1e-9)


def test_doubling_nu_c_doubles_community_effect_variance():
    def community_var(nu_c, seed):
        h = default_true_hypers().as_dict()
        h["nu_c"] = nu_c
        spec = SyntheticSpec(seed=seed, studies_per_class=(0, 0, 0, 500), hypers=HyperParams.from_dict(h))
        ds = simulate_dataset(spec)
        # study effects are the residuals of study levels about the country mean function
        return ds.truth.e.var()

    ratio = np.mean([community_var(16.0, s) / community_var(8.0, s + 100) for s in range(4)])
    assert ratio == pytest.approx(2.0, rel=0.1)


def test_simulated_u_satisfies_constraints(fixture_dataset):
    t = fixture_dataset.truth
    for u in np.vstack([t.u_c, t.u_s, t.u_r, t.u_g[None, :]]):
        assert abs(u.mean()) < 1e-10 and abs(ols_slope(u)) < 1e-10


def test_fixture_shape(fixture_dataset):
    ds = fixture_dataset
    assert (ds.hierarchy.J, ds.hierarchy.K, ds.hierarchy.L, ds.data.T) == (12, 4, 2, 10)
    assert ds.data.n_studies == 200
    assert np.unique(ds.data.study_country).size == 8
    assert set(np.unique(ds.data.study_class)) == {0, 1, 2, 3}


def test_same_seed_same_dataset():
    a, b = simulate_dataset(SyntheticSpec(seed=9)), simulate_dataset(SyntheticSpec(seed=9))
    assert np.array_equal(a.data.y, b.data.y)
    assert not np.array_equal(a.data.y, simulate_dataset(SyntheticSpec(seed=10)).data.y)


def test_invalid_spec_rejected():
    h = default_true_hypers().as_dict()
    h["nu_u"] = h["nu_w"] / 2  # breaks the ordering
    with pytest.raises(ValueError, match="constraints"):
        simulate_dataset(SyntheticSpec(hypers=HyperParams.from_dict(h)))
    with pytest.raises(ValueError):
        simulate_dataset(SyntheticSpec(J=2, K=3))


def test_spec_dict_roundtrip():
    spec = SyntheticSpec(seed=3, studies_per_class=(1, 2, 3, 4))
    back = SyntheticSpec.from_dict(spec.to_dict())
    assert back.to_dict() == spec.to_dict()
    assert np.array_equal(back.hypers.to_vector(), spec.hypers.to_vector())


# ----------------------------------------------------------------------------
# cross-validation


def test_mask_is_deterministic(fixture_dataset):
    d = fixture_dataset.data
    a, b = choose_mask(d, 0.2, 11), choose_mask(d, 0.2, 11)
    assert np.array_equal(a, b) and a.sum() == 40
    assert not np.array_equal(a, choose_mask(d, 0.2, 12))


def test_mask_fraction_bounds(fixture_dataset):
    with pytest.raises(ValueError):
        choose_mask(fixture_dataset.data, 0.6, 0)


def test_zero_mask_gives_empty_report(fixture_dataset):
    rep = cross_validate(fixture_dataset.data, SHORT, mask_fraction=0.0)
    assert rep.n_masked_studies == 0 and np.isnan(rep.coverage)
    assert "no studies masked" in rep.text()


@pytest.mark.slow
def test_cross_validation_does_not_leak(fixture_dataset):
    d = fixture_dataset.data
    cfg = replace(SHORT, n_burnin=150, n_iter=150)
    rep = cross_validate(d, cfg, mask_fraction=0.2)
    masked = choose_mask(d, 0.2, cfg.rng_seed)
    assert rep.n_masked_studies == 40
    assert rep.likelihood_rows_in_fit == d.n_rows - rep.n_masked_rows
    assert rep.n_masked_rows == int(np.isin(d.row_study, np.flatnonzero(masked)).sum())
    assert 0.0 <= rep.coverage <= 1.0 and rep.mean_width > 0


# ----------------------------------------------------------------------------
# posterior predictive checks


def test_ppc_self_consistency(fixture_dataset, fixture_fit):
    rep = posterior_predictive_check(fixture_dataset.data, fixture_fit, seed=1)
    assert len(rep.p_values) >= 4 + 10 + 4
    bad = {k: p for k, p in rep.p_values.items() if not 0.01 < p < 0.99}
    assert not bad


def test_ppc_empty_statistic_set(fixture_dataset, fixture_fit):
    rep = posterior_predictive_check(fixture_dataset.data, fixture_fit, statistics=())
    assert rep.p_values == {} and rep.n_draws == 0


def test_ppc_unknown_statistic(fixture_dataset, fixture_fit):
    with pytest.raises(ValueError):
        posterior_predictive_check(fixture_dataset.data, fixture_fit, statistics=("nope",))


@pytest.mark.slow
def test_ppc_detects_age_time_interaction(fixture_dataset):
    d = fixture_dataset.data
    tc = d.study_tc[d.row_study]
    violated = d.with_y(d.y + 0.03 * (d.z - 50.0) * tc)
    draws = run_chains(violated, SHORT)
    rep = posterior_predictive_check(violated, draws, statistics=("age_time_slope",), seed=2)
    p = np.array(list(rep.p_values.values()))
    # slopes at the oldest ages are too steep, at the youngest too shallow
    assert min(p.min(), 1.0 - p.max()) < 0.01
    oldest = max(rep.p_values, key=lambda k: float(k.split("[")[1].rstrip("]")))
    assert rep.p_values[oldest] < 0.01


# ----------------------------------------------------------------------------
# recovery


def test_recovery_needs_enough_studies():
    with pytest.raises(ValueError, match="150"):
        recover_parameters(SyntheticSpec(studies_per_class=(10, 10, 10, 10)), SHORT, n_replicates=1)


@pytest.mark.slow
def test_recovery_report_structure():
    cfg = replace(SHORT, n_burnin=200, n_iter=300)
    rep = recover_parameters(SyntheticSpec(seed=21), cfg, n_replicates=2)
    assert rep.seeds == [21, 1021]
    for p in rep.params:
        assert len(rep.z_scores[p]) == 2 and all(np.isfinite(rep.z_scores[p]))
    assert all(0.0 <= x <= 1.0 for x in rep.ordering_prob)
    assert "coverage" in rep.text()
    assert set(rep.to_dict()) >= {"coverage", "mean_z", "seeds"}


def test_ordering_recovered_with_eightfold_separation(fixture_dataset, fixture_fit):
    h = fixture_dataset.truth_hypers
    assert h.nu[3] / h.nu[0] == 8.0
    assert np.mean(fixture_fit.param("nu_w") < fixture_fit.param("nu_c")) > 0.99


def test_statistics_listed():
    assert set(STATISTICS) >= {"class_residual_variance", "age_mean_residual", "subregion_mean_residual"}
