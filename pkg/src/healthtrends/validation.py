"""Synthetic data with known truth, posterior predictive checks, masked
cross-validation and end-to-end parameter recovery."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gmrf
from .geo_data import (
    AgeRow,
    Coverage,
    CovariateTable,
    GeoHierarchy,
    PopulationTable,
    StudyRecord,
    build_design_rows,
)
from .model import (
    A_GLOBAL_BOUNDS,
    N_AGE,
    N_CLASS,
    FitData,
    HyperParams,
    ParamState,
    age_basis,
    row_means,
    row_variances,
    study_levels,
)
from .sampler import PosteriorDraws, SamplerConfig, run_chains

log = logging.getLogger(__name__)

AGE_LAYOUTS = (
    ((25, 34), (35, 44), (45, 54), (55, 64), (65, 74)),
    ((30, 39), (40, 49), (50, 59), (60, 69), (70, 79)),
)
STANDARD_WEIGHTS = (0.28, 0.24, 0.20, 0.16, 0.12)


def _default_sigma2():
    mids = np.array([np.mean(g) for layout in AGE_LAYOUTS for g in layout])
    scale = np.sqrt((age_basis(mids) ** 2).mean(axis=0))
    return (0.5 / scale) ** 2


def default_true_hypers() -> HyperParams:
    return HyperParams(
        kappa_a=[4.0, 9.0, 16.0],
        kappa_b=[0.01, 0.01, 0.01],
        lam=[50.0, 100.0, 100.0, 100.0],
        nu=[1.0, 2.0, 4.0, 8.0],
        tau2=[1.0, 2.0, 4.0, 8.0],
        sigma2=_default_sigma2(),
    )


@dataclass
class SyntheticSpec:
    """Shape and truth of a simulated dataset.

    The defaults are the standard fixture: 12 countries in 4 subregions in
    2 regions, a 10-year window, 50 studies in each coverage class and a
    third of the countries without any study.
    """

    J: int = 12
    K: int = 4
    L: int = 2
    window: tuple = (1999, 2008)
    age_layouts: tuple = AGE_LAYOUTS
    studies_per_class: tuple = (50, 50, 50, 50)
    frac_dataless: float = 1.0 / 3.0
    hypers: HyperParams = field(default_factory=default_true_hypers)
    a_g: float = 120.0
    b_g: float = 0.3
    beta: tuple = (1.0, 2.0, 0.05, -0.05, 0.5, -0.5, 0.3, 0.0, 1.5, 0.1, 2.0)
    psi: tuple = (0.5, 0.004, 2e-5, -3e-5, 1e-5)
    phi: tuple = (0.002, 0.0, 0.0, 0.0, 0.0)
    sample_size: tuple = (200, 2000)
    sample_sd: tuple = (12.0, 20.0)
    noiseless: bool = False
    seed: int = 0

    def validate(self):
        if not self.J >= self.K >= self.L >= 1:
            raise ValueError("need J >= K >= L >= 1")
        if self.window[1] - self.window[0] + 1 < 3:
            raise ValueError("window must span at least 3 years")
        if any(n < 0 for n in self.studies_per_class) or len(self.studies_per_class) != N_CLASS:
            raise ValueError("studies_per_class needs 4 nonnegative counts")
        if not 0.0 <= self.frac_dataless < 1.0:
            raise ValueError("frac_dataless must lie in [0, 1)")
        if not self.noiseless and not self.hypers.is_valid():
            raise ValueError(f"true hyperparameters violate constraints: {self.hypers.violations()}")
        if not A_GLOBAL_BOUNDS[0] <= self.a_g <= A_GLOBAL_BOUNDS[1]:
            raise ValueError("a_g outside its prior support")
        if len(self.beta) != 11 or len(self.psi) != N_AGE or len(self.phi) != N_AGE:
            raise ValueError("beta needs 11 entries, psi and phi 5")

    @property
    def prediction_ages(self):
        return self.age_layouts[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hypers"] = self.hypers.as_dict()
        d["window"] = list(self.window)
        d["age_layouts"] = [[list(g) for g in lay] for lay in self.age_layouts]
        return d

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        d = dict(d)
        if "hypers" in d and isinstance(d["hypers"], dict):
            # a partial block overrides the default truth
            d["hypers"] = HyperParams.from_dict({**default_true_hypers().as_dict(), **d["hypers"]})
        for key in ("window", "studies_per_class", "beta", "psi", "phi", "sample_size", "sample_sd"):
            if key in d:
                d[key] = tuple(d[key])
        if "age_layouts" in d:
            d["age_layouts"] = tuple(tuple(tuple(g) for g in lay) for lay in d["age_layouts"])
        return cls(**d)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    hierarchy: GeoHierarchy
    studies: list
    covariates: CovariateTable
    population: PopulationTable
    truth: ParamState
    truth_hypers: HyperParams
    data: FitData

    def truth_record(self) -> dict:
        return {
            "hypers": self.truth_hypers.as_dict(),
            "state": {k: np.asarray(v).tolist() for k, v in asdict(self.truth).items()},
            "study_ids": list(self.data.study_ids),
            "spec": self.spec.to_dict(),
        }


def make_hierarchy(J, K, L) -> GeoHierarchy:
    sub = np.arange(J) * K // J
    reg = np.arange(K) * L // K
    return GeoHierarchy(
        subregion_of=sub,
        region_of_subregion=reg,
        country_labels=tuple(f"C{j:03d}" for j in range(J)),
        subregion_labels=tuple(f"S{k:02d}" for k in range(K)),
        region_labels=tuple(f"R{l}" for l in range(L)),
    )


def _simulate_covariates(J, first_year, n_years, rng):
    raw = np.empty((J, n_years, 6))
    years = np.arange(n_years)
    level = rng.normal(0.0, 1.0, J)
    growth = rng.normal(0.03, 0.02, J)
    raw[:, :, 0] = level[:, None] + growth[:, None] * years[None, :] + rng.normal(0, 0.05, (J, n_years))
    u0 = rng.normal(0.0, 1.0, J)
    ugrowth = rng.uniform(0.01, 0.05, J)
    raw[:, :, 1] = 1.0 / (1.0 + np.exp(-(u0[:, None] + ugrowth[:, None] * years[None, :])))
    for c in range(2, 6):
        raw[:, :, c] = rng.normal(0.0, 1.0, J)[:, None] + np.cumsum(rng.normal(0, 0.05, (J, n_years)), axis=1)
    return CovariateTable.from_raw(first_year, raw)


def sample_rw2_prior(lam, T, rng):
    """Draw from the RW2 prior with precision lam*P, constrained to zero mean and slope."""
    P = gmrf.build_rw2_precision(T).P
    return gmrf.sample_rw2_conditional(lam, P, np.zeros(T), np.zeros(T), rng)


def simulate_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed)))
    J, K, L = spec.J, spec.K, spec.L
    t_min, t_max = spec.window
    T = t_max - t_min + 1
    hier = make_hierarchy(J, K, L)
    cov = _simulate_covariates(J, t_min - 9, T + 9, rng)

    n_dataless = int(round(spec.frac_dataless * J))
    data_countries = np.sort(rng.permutation(J)[: J - n_dataless])
    studies = []
    sid = 0
    layouts = spec.age_layouts
    for cls, count in enumerate(spec.studies_per_class):
        coverage = Coverage(cls)
        for _ in range(count):
            j = int(rng.choice(data_countries))
            year = int(rng.integers(t_min, t_max + 1))
            urb = float(cov.value(j, year)[1])
            if coverage.is_national:
                surb = urb
            else:
                kind = rng.integers(3)
                surb = (0.0, 1.0, float(rng.uniform()))[kind]
            layout = layouts[int(rng.integers(len(layouts)))]
            rows = []
            for lo, hi in layout:
                n = int(rng.integers(spec.sample_size[0], spec.sample_size[1] + 1))
                s = float(rng.uniform(*spec.sample_sd))
                rows.append(AgeRow(float(lo), float(hi), 0.0, s, n))
            studies.append(StudyRecord(f"st{sid:04d}", j, year, coverage, surb, tuple(rows)))
            sid += 1

    h = spec.hypers
    truth = ParamState.zeros(J, K, L, T, len(studies))
    truth.a_g = float(spec.a_g)
    truth.b_g = float(spec.b_g)
    truth.beta = np.array(spec.beta, dtype=float)
    truth.psi = np.array(spec.psi, dtype=float)
    truth.phi = np.array(spec.phi, dtype=float)
    if not spec.noiseless:
        for name, n_, var in (("a_c", J, h.kappa_a[0]), ("a_s", K, h.kappa_a[1]), ("a_r", L, h.kappa_a[2]),
                              ("b_c", J, h.kappa_b[0]), ("b_s", K, h.kappa_b[1]), ("b_r", L, h.kappa_b[2])):
            setattr(truth, name, rng.normal(0.0, np.sqrt(var), n_))
        truth.u_c = np.stack([sample_rw2_prior(h.lam[0], T, rng) for _ in range(J)])
        truth.u_s = np.stack([sample_rw2_prior(h.lam[1], T, rng) for _ in range(K)])
        truth.u_r = np.stack([sample_rw2_prior(h.lam[2], T, rng) for _ in range(L)])
        truth.u_g = sample_rw2_prior(h.lam[3], T, rng)
        truth.c = rng.normal(0.0, 1.0, (J, N_AGE)) * np.sqrt(h.sigma2)[None, :]
        classes = np.array([int(s.coverage) for s in studies], dtype=int)
        truth.e = rng.normal(0.0, 1.0, len(studies)) * np.sqrt(h.nu[classes])

    data = FitData.from_records(hier, studies, cov, spec.window)
    mean = row_means(data, truth)
    if spec.noiseless:
        y = mean
    else:
        y = mean + rng.standard_normal(mean.size) * np.sqrt(row_variances(data, h))
    data = data.with_y(y)
    filled, pos = [], 0
    for st in studies:
        rows = []
        for r in st.rows:
            rows.append(replace(r, y=float(y[pos])))
            pos += 1
        filled.append(replace(st, rows=tuple(rows)))

    groups = tuple((float(lo), float(hi)) for lo, hi in spec.prediction_ages)
    size = rng.lognormal(15.0, 1.0, J)
    age_share = np.linspace(1.4, 0.6, len(groups))
    growth = 1.0 + 0.01 * np.arange(T)
    counts = size[:, None, None] * growth[None, :, None] * age_share[None, None, :]
    counts = np.round(counts * rng.uniform(0.9, 1.1, counts.shape))
    w = np.array(STANDARD_WEIGHTS[: len(groups)], dtype=float)
    population = PopulationTable(t_min, groups, counts, w / w.sum())
    return SyntheticDataset(spec, hier, filled, cov, population, truth, h.copy(), data)


# ----------------------------------------------------------------------------
# predictive draws for observed-scale study means


def predictive_study_draws(data: FitData, X, countries, years_idx, classes, z_rows, row_owner,
                           draws: PosteriorDraws, rng, samp_var=None):
    """Posterior predictive draws of age-row means for new studies.

    Each new study gets a fresh study effect from N(0, nu_class) and each
    row within-study noise from N(0, s^2/n + tau2_class) when ``samp_var``
    is given. Returns ``(n_draws, n_rows)``.
    """
    B = age_basis(z_rows)
    h = data.hierarchy
    tc = years_idx + data.window[0] - data.t_center
    out = np.empty((draws.n_draws, len(z_rows)))
    for d, (state, hyp) in enumerate(draws.iter_draws()):
        a = state.country_intercepts(h)[countries]
        b = state.country_slopes(h)[countries]
        u = state.country_u(h)[countries, years_idx]
        e = rng.standard_normal(len(countries)) * np.sqrt(hyp.nu[classes])
        mu = a + b * tc + X @ state.beta + u + e
        mu_row = mu[row_owner]
        coef = state.psi[None, :] + state.phi[None, :] * mu_row[:, None] + state.c[countries[row_owner]]
        mean = mu_row + np.einsum("hs,hs->h", B, coef)
        if samp_var is not None:
            mean = mean + rng.standard_normal(mean.size) * np.sqrt(samp_var + hyp.tau2[classes[row_owner]])
        out[d] = mean
    return out


# ----------------------------------------------------------------------------
# cross-validation


@dataclass
class CoverageReport:
    mask_fraction: float
    n_masked_studies: int
    n_masked_rows: int
    coverage: float
    mean_width: float
    masked_study_ids: list
    level: float = 0.95
    likelihood_rows_in_fit: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def text(self) -> str:
        if not self.n_masked_studies:
            return "cross-validation: no studies masked"
        return (
            f"cross-validation: masked {self.n_masked_studies} studies ({self.n_masked_rows} rows), "
            f"{100 * self.level:.0f}% PI coverage {self.coverage:.3f}, mean width {self.mean_width:.2f}"
        )


def choose_mask(data: FitData, mask_fraction: float, seed: int, allow_empty_levels: bool = True):
    if not 0.0 <= mask_fraction <= 0.5:
        raise ValueError("mask_fraction must lie in (0, 0.5]")
    n_mask = int(round(mask_fraction * data.n_studies))
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(7919,)))
    masked = np.zeros(data.n_studies, dtype=bool)
    if n_mask:
        masked[rng.choice(data.n_studies, size=n_mask, replace=False)] = True
    if not allow_empty_levels and n_mask:
        kept = data.study_country[~masked]
        had = np.unique(data.study_country)
        if np.setdiff1d(had, kept).size:
            raise ValueError("masking removes every study of some country")
    return masked


def cross_validate(data: FitData, config: SamplerConfig, mask_fraction: float = 0.2, level: float = 0.95,
                   allow_empty_levels: bool = True, jobs: int = 1, fixed_hypers=None) -> CoverageReport:
    """Mask whole studies, refit, and score prediction intervals for the masked rows."""
    masked = choose_mask(data, mask_fraction, config.rng_seed, allow_empty_levels)
    if not masked.any():
        return CoverageReport(mask_fraction, 0, 0, float("nan"), float("nan"), [], level, data.n_rows)
    train = data.subset(~masked)
    draws = fit(train, config, jobs=jobs, fixed_hypers=fixed_hypers)
    test = data.subset(masked)
    rng = np.random.default_rng(np.random.SeedSequence(int(config.rng_seed), spawn_key=(104729,)))
    pred = predictive_study_draws(
        data, test.X, test.study_country, test.study_t, test.study_class, test.z, test.row_study, draws, rng,
        samp_var=test.samp_var,
    )
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(pred, [alpha, 1.0 - alpha], axis=0)
    inside = (test.y >= lo) & (test.y <= hi)
    return CoverageReport(
        mask_fraction=float(mask_fraction),
        n_masked_studies=int(masked.sum()),
        n_masked_rows=int(test.n_rows),
        coverage=float(inside.mean()),
        mean_width=float((hi - lo).mean()),
        masked_study_ids=list(test.study_ids),
        level=level,
        likelihood_rows_in_fit=int(train.n_rows),
    )


def fit(data: FitData, config: SamplerConfig, jobs: int = 1, fixed_hypers=None) -> PosteriorDraws:
    return run_chains(data, config, jobs=jobs, fixed_hypers=fixed_hypers)


# ----------------------------------------------------------------------------
# posterior predictive checks


STATISTICS = ("class_residual_variance", "age_mean_residual", "subregion_mean_residual", "age_time_slope")


def _statistics(data: FitData, resid, which, age_groups):
    out = {}
    if "class_residual_variance" in which:
        for c in range(N_CLASS):
            rows = data.row_class == c
            if rows.sum() > 1:
                out[f"class_residual_variance[{Coverage(c).name}]"] = float(resid[rows].var())
    if "age_mean_residual" in which:
        for a, z in enumerate(age_groups):
            rows = data.z == z
            out[f"age_mean_residual[{z:g}]"] = float(resid[rows].mean())
    if "subregion_mean_residual" in which:
        sub = data.hierarchy.subregion_of[data.row_country]
        for k in np.unique(sub):
            out[f"subregion_mean_residual[{data.hierarchy.subregion_labels[k]}]"] = float(resid[sub == k].mean())
    if "age_time_slope" in which:
        tc = data.study_tc[data.row_study]
        for z in age_groups:
            rows = data.z == z
            t = tc[rows] - tc[rows].mean()
            denom = float(t @ t)
            if denom > 0:
                out[f"age_time_slope[{z:g}]"] = float(t @ resid[rows] / denom)
    return out


@dataclass
class PPCReport:
    p_values: dict
    observed: dict
    n_draws: int

    def to_dict(self):
        return asdict(self)

    def text(self) -> str:
        if not self.p_values:
            return "posterior predictive check: no statistics"
        width = max(len(k) for k in self.p_values)
        lines = [f"{'statistic':<{width}}  observed     p-value"]
        for k, p in self.p_values.items():
            lines.append(f"{k:<{width}}  {self.observed[k]:>9.4f}  {p:>7.3f}")
        return "\n".join(lines)


def posterior_predictive_check(data: FitData, draws: PosteriorDraws, statistics=STATISTICS, seed: int = 0,
                               max_draws: int | None = 1000) -> PPCReport:
    """Posterior predictive p-values P(T(y_rep) >= T(y)).

    Residuals are taken about each draw's fitted row means, so the
    replicated data share the observed design rows and study effects.
    """
    statistics = tuple(statistics)
    unknown = set(statistics) - set(STATISTICS)
    if unknown:
        raise ValueError(f"unknown statistics {sorted(unknown)}")
    if draws.n_draws == 0:
        raise ValueError("no posterior draws")
    if not statistics:
        return PPCReport({}, {}, 0)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(31337,)))
    ages = sorted(np.unique(data.z))
    flat_s, flat_h = draws.flat_state(), draws.flat_hyper()
    idx = np.arange(flat_s.shape[0])
    if max_draws is not None and idx.size > max_draws:
        idx = np.unique(np.linspace(0, idx.size - 1, max_draws).round().astype(int))
    exceed, observed_sum = None, None
    for k in idx:
        state = ParamState.from_vector(flat_s[k], draws.state_shapes)
        hyp = HyperParams.from_vector(flat_h[k])
        mean = row_means(data, state)
        sd = np.sqrt(row_variances(data, hyp))
        t_obs = _statistics(data, data.y - mean, statistics, ages)
        t_rep = _statistics(data, rng.standard_normal(mean.size) * sd, statistics, ages)
        if exceed is None:
            exceed = {key: 0 for key in t_obs}
            observed_sum = {key: 0.0 for key in t_obs}
        for key in t_obs:
            exceed[key] += t_rep[key] >= t_obs[key]
            observed_sum[key] += t_obs[key]
    n = idx.size
    return PPCReport({k: v / n for k, v in exceed.items()}, {k: v / n for k, v in observed_sum.items()}, n)


# ----------------------------------------------------------------------------
# parameter recovery


RECOVERY_PARAMS = ("a_g", "b_g", "beta[0]", "nu_c", "tau2_w")


def _truth_value(ds: SyntheticDataset, name):
    if name in ds.truth_hypers.as_dict():
        return ds.truth_hypers.as_dict()[name]
    vec = ds.truth.to_vector()
    return float(vec[ds.truth.names().index(name)])


@dataclass
class RecoveryReport:
    params: tuple
    z_scores: dict
    covered: dict
    ordering_prob: list
    seeds: list

    @property
    def coverage(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.covered.items()}

    @property
    def mean_z(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.z_scores.items()}

    def to_dict(self):
        return {
            "params": list(self.params),
            "coverage": self.coverage,
            "mean_z": self.mean_z,
            "z_scores": self.z_scores,
            "covered": {k: [bool(x) for x in v] for k, v in self.covered.items()},
            "ordering_prob_nu_w_lt_nu_c": self.ordering_prob,
            "seeds": self.seeds,
        }

    def text(self) -> str:
        lines = [f"{'parameter':<10} coverage  mean z   (n={len(self.seeds)})"]
        for p in self.params:
            lines.append(f"{p:<10} {self.coverage[p]:>8.3f}  {self.mean_z[p]:>6.3f}")
        return "\n".join(lines)


def recover_one(spec: SyntheticSpec, config: SamplerConfig, params=RECOVERY_PARAMS, level=0.95):
    if sum(spec.studies_per_class) < 150:
        raise ValueError("recovery needs at least 150 studies")
    ds = simulate_dataset(spec)
    draws = run_chains(ds.data, config)
    alpha = 0.5 * (1 - level)
    z, cov = {}, {}
    for p in params:
        x = draws.param(p).ravel()
        truth = _truth_value(ds, p)
        sd = x.std(ddof=1)
        z[p] = float((x.mean() - truth) / sd) if sd > 0 else 0.0
        lo, hi = np.quantile(x, [alpha, 1 - alpha])
        cov[p] = bool(lo <= truth <= hi)
    order = float(np.mean(draws.param("nu_w") < draws.param("nu_c")))
    return z, cov, order


def _recover_job(args):
    spec, config, params = args
    return recover_one(spec, config, params)


def recover_parameters(spec: SyntheticSpec, config: SamplerConfig, n_replicates: int = 50,
                       params=RECOVERY_PARAMS, jobs: int = 1) -> RecoveryReport:
    """Simulate, refit and score ``n_replicates`` independent datasets."""
    seeds = [int(spec.seed) + 1000 * r for r in range(n_replicates)]
    jobs_args = [(replace(spec, seed=s), replace(config, rng_seed=s), params) for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_recover_job, jobs_args))
    else:
        results = [_recover_job(a) for a in jobs_args]
    z = {p: [r[0][p] for r in results] for p in params}
    cov = {p: [r[1][p] for r in results] for p in params}
    return RecoveryReport(tuple(params), z, cov, [r[2] for r in results], seeds)


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
