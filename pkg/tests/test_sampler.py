import math

import numpy as np
import pytest
from scipy import stats

from healthtrends.geo_data import GeoHierarchy
from healthtrends.gmrf import ols_slope
from healthtrends.model import HYPER_NAMES, N_DESIGN, FitData, ParamState
from healthtrends.sampler import (
    MeanBlock,
    SamplerConfig,
    SamplerError,
    Workspace,
    _log_box_probability,
    _truncated_normal,
    bivariate_normal_cdf,
    gibbs_update_gaussian_block,
    initial_values,
    joint_update_variance_and_effects,
    read_draws,
    run_chain,
    run_chains,
    study_stats,
    truncated_bivariate_normal,
    update_tau_squared,
    update_u_blocks,
    write_draws,
)

from .conftest import one_row_data, simple_hypers


def mc_check(draws, mean, var, n_se=4.0):
    """Sample mean and variance agree with (mean, var) within ``n_se`` standard errors."""
    n = draws.size
    assert abs(draws.mean() - mean) < n_se * math.sqrt(var / n)
    assert abs(draws.var(ddof=1) - var) < n_se * var * math.sqrt(2.0 / (n - 1))


# ----------------------------------------------------------------------------
# conjugate Gibbs steps


def test_conjugate_country_intercept():
    d = one_row_data(y=130.0, s=10.0, n=25, z=50.0)
    h = simple_hypers(kappa_a=[9.0, 1.0, 1.0], tau2=[2.0, 3.0, 4.0, 5.0])
    s = ParamState.zeros_for(d)
    rng = np.random.default_rng(0)
    ws = Workspace(d)
    draws = np.empty(10_000)
    for k in range(draws.size):
        gibbs_update_gaussian_block("a_c", d, s, h, rng, ws)
        draws[k] = s.a_c[0]
    v = d.samp_var[0] + h.tau2[0]
    kappa = h.kappa_a[0]
    mc_check(draws, 130.0 * kappa / (kappa + v), kappa * v / (kappa + v))


def test_study_effect_with_uninformative_data():
    d = one_row_data(s=1e6, n=1, cls=2)
    h = simple_hypers()
    s = ParamState.zeros_for(d)
    rng = np.random.default_rng(1)
    draws = np.empty(10_000)
    for k in range(draws.size):
        gibbs_update_gaussian_block("e", d, s, h, rng)
        draws[k] = s.e[0]
    mc_check(draws, 0.0, h.nu[2])


def test_beta_with_orthonormal_design():
    rng = np.random.default_rng(2)
    n = 40
    X, _ = np.linalg.qr(rng.normal(size=(n, N_DESIGN)))
    y = rng.normal(size=n) * 3
    d = FitData(
        hierarchy=GeoHierarchy(np.array([0]), np.array([0])), window=(2000, 2009),
        study_ids=tuple(map(str, range(n))), study_country=np.zeros(n), study_t=np.arange(n) % 10,
        study_class=np.zeros(n), X=X, row_study=np.arange(n), y=y, samp_var=np.full(n, 0.5), z=np.full(n, 50.0),
    )
    h = simple_hypers(tau2=[0.5, 1.0, 2.0, 3.0])  # unit row variance
    s = ParamState.zeros_for(d)
    ws = Workspace(d)
    draws = np.empty((8000, N_DESIGN))
    for k in range(draws.shape[0]):
        gibbs_update_gaussian_block("beta", d, s, h, rng, ws)
        draws[k] = s.beta
    post_var = 1.0 / (1.0 + 1e-6)
    for c in range(N_DESIGN):
        mc_check(draws[:, c], post_var * X[:, c] @ y, post_var)


def test_global_intercept_respects_box():
    d = one_row_data(y=-50.0)
    s = ParamState.zeros_for(d)
    rng = np.random.default_rng(3)
    for _ in range(200):
        gibbs_update_gaussian_block("a_g", d, s, simple_hypers(), rng)
        assert 0.0 <= s.a_g <= 1000.0


def test_unknown_block():
    with pytest.raises(KeyError):
        gibbs_update_gaussian_block("zeta", one_row_data(), ParamState.zeros_for(one_row_data()), simple_hypers(),
                                    np.random.default_rng(0))


# ----------------------------------------------------------------------------
# truncated normals and the global box


@pytest.mark.parametrize("h, k, rho", [(0.3, -0.2, 0.5), (-1.0, 2.0, -0.7), (0.0, 0.0, 0.2), (1.5, 1.5, 0.95),
                                        (-3.0, -2.0, 0.0), (2.0, -1.0, -0.3)])
def test_bivariate_cdf_matches_scipy(h, k, rho):
    ref = stats.multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf([h, k])
    assert bivariate_normal_cdf(h, k, rho) == pytest.approx(ref, abs=1e-7)


def test_box_probability_limits():
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    assert _log_box_probability(np.array([500.0, 0.0]), cov, ((0, 1000), (-1000, 1000))) == 0.0
    lp = _log_box_probability(np.array([0.0, 0.0]), cov, ((0, 1000), (-1000, 1000)))
    assert lp == pytest.approx(math.log(0.5), abs=1e-9)


def test_truncated_normal_moments():
    rng = np.random.default_rng(4)
    x = np.array([_truncated_normal(2.0, 4.0, 3.0, 10.0, rng) for _ in range(20_000)])
    ref = stats.truncnorm((3 - 2) / 2, (10 - 2) / 2, loc=2, scale=2)
    assert x.min() >= 3.0 and x.max() <= 10.0
    assert abs(x.mean() - ref.mean()) < 4 * ref.std() / math.sqrt(x.size)
    far = [_truncated_normal(-100.0, 1.0, 0.0, 5.0, rng) for _ in range(100)]
    assert min(far) >= 0.0 and max(far) < 0.1


def test_truncated_bivariate_matches_rejection():
    rng = np.random.default_rng(5)
    mean = np.array([0.5, -0.2])
    cov = np.array([[1.0, 0.8], [0.8, 1.5]])
    box = ((0.0, 3.0), (-1.0, 1.0))
    x = np.array([truncated_bivariate_normal(mean, cov, box, rng) for _ in range(20_000)])
    raw = rng.multivariate_normal(mean, cov, size=200_000)
    keep = raw[(raw[:, 0] >= 0) & (raw[:, 0] <= 3) & (raw[:, 1] >= -1) & (raw[:, 1] <= 1)]
    assert np.allclose(x.mean(0), keep.mean(0), atol=0.02)
    assert np.allclose(np.cov(x.T), np.cov(keep.T), atol=0.02)


# ----------------------------------------------------------------------------
# collapsed mean block


def test_mean_block_marginal_matches_brute_force(fixture_dataset):
    d = fixture_dataset.data
    ws = Workspace(d)
    st = fixture_dataset.truth.copy()
    h0 = fixture_dataset.truth_hypers
    G, R = study_stats(ws, st, h0)

    def brute(h):
        # Gaussian integral over (theta, e) with the globals unconstrained
        D = ws.D_full
        n, p = D.shape
        Z = np.hstack([D, np.eye(n)])
        Lam = np.zeros((p + n, p + n))
        Lam[: p - 2, : p - 2] = ws.prior_precision(h)
        Lam[p:, p:] = np.diag(1 / h.nu[d.study_class])
        Q = (Z * G[:, None]).T @ Z + Lam
        b = Z.T @ R
        ld_prior = ws.prior_logdet(h) + np.log(1 / h.nu[d.study_class]).sum()
        return 0.5 * ld_prior - 0.5 * np.linalg.slogdet(Q)[1] + 0.5 * b @ np.linalg.solve(Q, b)

    mb = MeanBlock(ws, G, R, st, h0)
    assert mb.with_global
    for attr, factor in (("kappa_a", [3, 1, 1]), ("kappa_b", [1, 5, 1]), ("lam", [1, 0.2, 1, 4]), ("nu", 1.3)):
        h1 = h0.copy()
        setattr(h1, attr, getattr(h0, attr) * np.asarray(factor))
        # the box term is zero here: the globals sit far inside their bounds
        assert mb.log_marginal(h1) - mb.log_marginal(h0) == pytest.approx(brute(h1) - brute(h0), abs=1e-6)


def test_mean_block_draw_moments():
    """Block draws of a small dataset match the exact conditional moments."""
    from healthtrends.validation import SyntheticSpec, simulate_dataset

    ds = simulate_dataset(SyntheticSpec(J=3, K=2, L=1, studies_per_class=(10, 10, 10, 10), frac_dataless=0.0,
                                        seed=9))
    d = ds.data
    ws = Workspace(d)
    st = ds.truth.copy()
    h = ds.truth_hypers
    G, R = study_stats(ws, st, h)
    mb = MeanBlock(ws, G, R, st, h)
    f = mb.factor(h)
    rng = np.random.default_rng(6)
    draws = np.array([mb._draw(f, rng) for _ in range(6000)])
    Q, b = mb.precision(h)
    mean = np.linalg.solve(Q, b)
    cov = np.linalg.inv(Q)
    # oracle: the Gaussian conditional with the globals (last two) truncated to their box
    raw = rng.multivariate_normal(mean, cov, size=400_000, method="cholesky")
    inside = (raw[:, -2] >= 0) & (raw[:, -2] <= 1000) & (raw[:, -1] >= -1000) & (raw[:, -1] <= 1000)
    ref = raw[inside]
    assert ref.shape[0] > 20_000
    sd = ref.std(0)
    se = sd * math.sqrt(1 / draws.shape[0] + 1 / ref.shape[0])
    assert np.abs((draws.mean(0) - ref.mean(0)) / se).max() < 4.5
    assert np.allclose(draws.std(0) / sd, 1.0, atol=0.06)
    assert draws[:, -2].min() >= 0.0


# ----------------------------------------------------------------------------
# hyperparameter updates


def test_ordering_violations_are_rejected(fixture_dataset):
    d = fixture_dataset.data
    rng = np.random.default_rng(7)
    h = fixture_dataset.truth_hypers.copy()
    h.nu = np.array([1.0, 1.01, 4.0, 8.0])
    st = fixture_dataset.truth.copy()
    ws = Workspace(d)
    for _ in range(200):
        h, _ = joint_update_variance_and_effects("nu_w", d, st, h, rng, 0.5, ws)
        assert h.nu[0] < h.nu[1]
        h, _ = update_tau_squared(1, d, st, h, rng, 1.0)
        assert np.all(np.diff(h.tau2) > 0)


def test_tau_class_without_studies_follows_neighbours():
    d = one_row_data(cls=0)
    st = ParamState.zeros_for(d)
    h = simple_hypers()
    rng = np.random.default_rng(8)
    seen = []
    for _ in range(3000):
        h, _ = update_tau_squared(2, d, st, h, rng, 0.7)
        seen.append(h.tau2[2])
    seen = np.array(seen)
    assert seen.min() > h.tau2[1] and seen.max() < h.tau2[3]
    assert seen.std() > 0.1


def test_no_data_country_u_follows_prior():
    from healthtrends.validation import make_hierarchy

    hier = make_hierarchy(2, 1, 1)
    d = FitData.empty(hier, (2000, 2009))
    st = ParamState.zeros_for(d)
    h = simple_hypers(lam=[2.0, 2.0, 2.0, 2.0])
    rng = np.random.default_rng(9)
    acc = np.zeros(10)
    for _ in range(3000):
        update_u_blocks(d, st, h, rng)
        acc += st.u_c[0]
        assert abs(st.u_c[0].mean()) < 1e-8 and abs(ols_slope(st.u_c[0])) < 1e-8
    assert np.abs(acc / 3000).max() < 0.2


# ----------------------------------------------------------------------------
# whole chains


def test_initial_values_are_valid(fixture_dataset):
    for mode in ("moments", "prior"):
        st, h = initial_values(fixture_dataset.data, SamplerConfig(init_mode=mode), np.random.default_rng(0))
        assert h.is_valid()


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_iter=0)
    with pytest.raises(ValueError):
        SamplerConfig(thin=0)
    with pytest.raises(ValueError):
        SamplerConfig(init_mode="zeros")


def test_fixed_invalid_hypers_rejected(fixture_dataset):
    with pytest.raises(SamplerError):
        run_chain(fixture_dataset.data, SamplerConfig(n_burnin=0, n_iter=1), fixed_hypers={"nu_w": 100.0})


def test_same_seed_same_draws(tmp_path, fixture_dataset):
    cfg = SamplerConfig(n_chains=2, n_burnin=10, n_iter=20, rng_seed=3)
    a = run_chains(fixture_dataset.data, cfg)
    b = run_chains(fixture_dataset.data, cfg)
    for fmt in ("npy", "csv"):
        pa, pb = tmp_path / f"a_{fmt}", tmp_path / f"b_{fmt}"
        sa = write_draws(pa, a, fixture_dataset.data, fmt)
        write_draws(pb, b, fixture_dataset.data, fmt)
        for name in sa["files"]:
            assert (pa / name).read_bytes() == (pb / name).read_bytes()
    back = read_draws(tmp_path / "a_npy", sa)
    assert np.array_equal(back.state, a.state) and np.array_equal(back.hyper, a.hyper)
    c = run_chains(fixture_dataset.data, SamplerConfig(n_chains=1, n_burnin=10, n_iter=20, rng_seed=4))
    assert not np.array_equal(c.state[0], a.state[0])


def test_stored_draws_satisfy_constraints(fixture_fit):
    d = fixture_fit
    assert np.all(np.isfinite(d.state)) and np.all(np.isfinite(d.hyper))
    nu = d.hyper[..., 10:14]
    tau2 = d.hyper[..., 14:18]
    assert np.all(np.diff(nu, axis=-1) > 0) and np.all(np.diff(tau2, axis=-1) > 0)
    for s, _ in d.iter_draws():
        assert s.u_constraint_error() < 1e-8
        assert 0.0 <= s.a_g <= 1000.0


def test_acceptance_rates_after_adaptation(fixture_fit):
    for chain in fixture_fit.acceptance:
        for name in HYPER_NAMES:
            assert 0.1 <= chain[name] <= 0.6, (name, chain[name])


def test_tau2_w_recovered(fixture_fit, fixture_dataset):
    truth = fixture_dataset.truth_hypers.tau2[0]
    assert abs(fixture_fit.param("tau2_w").mean() - truth) < 0.3 * truth


def test_nu_ordering_recovered(fixture_fit):
    assert np.mean(fixture_fit.param("nu_w") < fixture_fit.param("nu_c")) > 0.99


def test_huge_lambda_flattens_u(fixture_dataset):
    lam = math.exp(15.0)
    fixed = {n: lam for n in ("lambda_c", "lambda_s", "lambda_r", "lambda_g")}
    res = run_chain(fixture_dataset.data, SamplerConfig(n_burnin=50, n_iter=100, rng_seed=1), fixed_hypers=fixed)
    shapes = ParamState.zeros_for(fixture_dataset.data).shapes()
    for vec in res.state_draws:
        s = ParamState.from_vector(vec, shapes)
        for u in (s.u_c, s.u_s, s.u_r, s.u_g):
            assert np.abs(u).max() < 0.01
