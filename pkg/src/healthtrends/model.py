"""Parameter containers, the age-spline basis, the mean function and the
log posterior of the hierarchical trend model.

Parameterization used throughout: kappa, nu, tau2 and sigma2 are stored as
variances and lam as RW2 precisions. Every one of them has a prior that is
flat on the standard-deviation scale with SD <= 1000, so as a density in
the stored variable::

    variance v:   log p(v)   = -1/2 log v      0 < v <= 1e6
    precision l:  log p(l)   = -3/2 log l      1e-6 <= l, log l <= 15

The global intercept and slope have flat priors on [0, 1000] and
[-1000, 1000]; beta, psi and phi are N(0, 1e6).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .geo_data import (
    N_DESIGN,
    Coverage,
    CovariateTable,
    GeoHierarchy,
    build_design_rows,
)
from .gmrf import LOG_LAMBDA_MAX, build_rw2_precision, constraint_matrix

AGE_CENTER = 50.0
KNOTS = (45.0, 60.0)
N_AGE = 5
N_CLASS = 4
SD_MAX = 1000.0
VAR_MAX = SD_MAX**2
LAMBDA_MIN = 1.0 / VAR_MAX
LAMBDA_MAX = float(np.exp(LOG_LAMBDA_MAX))
A_GLOBAL_BOUNDS = (0.0, 1000.0)
B_GLOBAL_BOUNDS = (-1000.0, 1000.0)
FIXED_PRIOR_VAR = 1e6
U_CONSTRAINT_TOL = 1e-6
LOG2PI = float(np.log(2.0 * np.pi))

LEVELS = ("c", "s", "r")
U_LEVELS = ("c", "s", "r", "g")
CLASS_LABELS = ("w", "u", "s", "c")


def age_basis(z):
    """Cubic spline basis at age ``z`` (years), centered at 50.

    Columns: zc, zc^2, zc^3, (zc+5)^3_+, (zc-10)^3_+ with zc = z - 50, i.e.
    truncated cubics with knots at ages 45 and 60.
    """
    z = np.asarray(z, dtype=float)
    zc = z - AGE_CENTER
    k1 = np.clip(zc - (KNOTS[0] - AGE_CENTER), 0.0, None)
    k2 = np.clip(zc - (KNOTS[1] - AGE_CENTER), 0.0, None)
    return np.stack([zc, zc**2, zc**3, k1**3, k2**3], axis=-1)


# ----------------------------------------------------------------------------
# hyperparameters


HYPER_NAMES = (
    "kappa_a_c", "kappa_a_s", "kappa_a_r",
    "kappa_b_c", "kappa_b_s", "kappa_b_r",
    "lambda_c", "lambda_s", "lambda_r", "lambda_g",
    "nu_w", "nu_u", "nu_s", "nu_c",
    "tau2_w", "tau2_u", "tau2_s", "tau2_c",
    "sigma2_1", "sigma2_2", "sigma2_3", "sigma2_4", "sigma2_5",
)


@dataclass
class HyperParams:
    """The 23 variance / precision hyperparameters."""

    kappa_a: np.ndarray  # (3,) country, subregion, region intercept variances
    kappa_b: np.ndarray  # (3,) slope variances
    lam: np.ndarray  # (4,) RW2 precisions c, s, r, g
    nu: np.ndarray  # (4,) study-effect variances w < u < s < c
    tau2: np.ndarray  # (4,) within-study age-residual variances w < u < s < c
    sigma2: np.ndarray  # (5,) spline-coefficient random-effect variances

    def __post_init__(self):
        for f, n in zip(fields(self), (3, 3, 4, 4, 4, 5)):
            arr = np.array(getattr(self, f.name), dtype=float).reshape(-1)
            if arr.size != n:
                raise ValueError(f"{f.name} needs {n} entries, got {arr.size}")
            setattr(self, f.name, arr)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.kappa_a, self.kappa_b, self.lam, self.nu, self.tau2, self.sigma2])

    @classmethod
    def from_vector(cls, v) -> "HyperParams":
        v = np.asarray(v, dtype=float)
        return cls(v[0:3], v[3:6], v[6:10], v[10:14], v[14:18], v[18:23])

    def as_dict(self) -> dict:
        return dict(zip(HYPER_NAMES, self.to_vector().tolist()))

    @classmethod
    def from_dict(cls, d) -> "HyperParams":
        missing = [n for n in HYPER_NAMES if n not in d]
        unknown = sorted(set(d) - set(HYPER_NAMES))
        if missing or unknown:
            raise ValueError(f"hyperparameters missing {missing}, unknown {unknown}")
        return cls.from_vector([d[n] for n in HYPER_NAMES])

    def copy(self) -> "HyperParams":
        return HyperParams.from_vector(self.to_vector())

    def violations(self) -> list[str]:
        """Names of violated hard constraints (empty when valid)."""
        out = []
        v = self.to_vector()
        if not np.all(np.isfinite(v)):
            out.append("non-finite hyperparameter")
        variances = np.concatenate([self.kappa_a, self.kappa_b, self.nu, self.tau2, self.sigma2])
        if np.any(variances <= 0) or np.any(variances > VAR_MAX):
            out.append("variance outside (0, 1e6]")
        if np.any(self.lam < LAMBDA_MIN) or np.any(np.log(self.lam) > LOG_LAMBDA_MAX):
            out.append("lambda outside [1e-6, exp(15)]")
        if not np.all(np.diff(self.nu) > 0):
            out.append("nu ordering")
        if not np.all(np.diff(self.tau2) > 0):
            out.append("tau2 ordering")
        return out

    def is_valid(self) -> bool:
        return not self.violations()


def log_variance_prior(v) -> float:
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0) or np.any(v > VAR_MAX):
        return -np.inf
    return float(-0.5 * np.log(v).sum())


def log_precision_prior(lam) -> float:
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < LAMBDA_MIN) or np.any(np.log(lam) > LOG_LAMBDA_MAX):
        return -np.inf
    return float(-1.5 * np.log(lam).sum())


def log_hyperprior(h: HyperParams) -> float:
    if not np.all(np.diff(h.nu) > 0) or not np.all(np.diff(h.tau2) > 0):
        return -np.inf
    variances = np.concatenate([h.kappa_a, h.kappa_b, h.nu, h.tau2, h.sigma2])
    return log_variance_prior(variances) + log_precision_prior(h.lam)


# ----------------------------------------------------------------------------
# data


@dataclass
class FitData:
    """Study and row arrays in the form the model evaluates.

    Studies are indexed ``i``; age rows ``h`` carry their study index in
    ``row_study``. Times are integer years; ``study_tc`` is centered at the
    window midpoint and ``study_t`` is the 0-based year offset.
    """

    hierarchy: GeoHierarchy
    window: tuple
    study_ids: tuple
    study_country: np.ndarray
    study_t: np.ndarray
    study_class: np.ndarray
    X: np.ndarray
    row_study: np.ndarray
    y: np.ndarray
    samp_var: np.ndarray
    z: np.ndarray
    B: np.ndarray = field(init=False)
    study_tc: np.ndarray = field(init=False)
    row_country: np.ndarray = field(init=False)
    row_class: np.ndarray = field(init=False)

    def __post_init__(self):
        self.window = (int(self.window[0]), int(self.window[1]))
        self.study_country = np.asarray(self.study_country, dtype=np.int64)
        self.study_t = np.asarray(self.study_t, dtype=np.int64)
        self.study_class = np.asarray(self.study_class, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=float).reshape(-1, N_DESIGN)
        self.row_study = np.asarray(self.row_study, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=float)
        self.samp_var = np.asarray(self.samp_var, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        self.B = age_basis(self.z).reshape(-1, N_AGE)
        self.study_tc = self.study_t + self.window[0] - self.t_center
        self.row_country = self.study_country[self.row_study]
        self.row_class = self.study_class[self.row_study]
        if np.any(self.samp_var <= 0):
            raise ValueError("sampling variances must be positive")

    @property
    def t_center(self) -> float:
        return 0.5 * (self.window[0] + self.window[1])

    @property
    def T(self) -> int:
        return self.window[1] - self.window[0] + 1

    @property
    def n_studies(self) -> int:
        return int(self.study_country.size)

    @property
    def n_rows(self) -> int:
        return int(self.y.size)

    @classmethod
    def from_records(cls, hierarchy, studies, covariates: CovariateTable, window) -> "FitData":
        X = build_design_rows(studies, covariates, window)
        row_study, y, var, z = [], [], [], []
        for i, st in enumerate(studies):
            for r in st.rows:
                row_study.append(i)
                y.append(r.y)
                var.append(r.s**2 / r.n)
                z.append(r.z)
        return cls(
            hierarchy=hierarchy,
            window=window,
            study_ids=tuple(st.study_id for st in studies),
            study_country=[st.country for st in studies],
            study_t=[st.year - window[0] for st in studies],
            study_class=[int(st.coverage) for st in studies],
            X=X,
            row_study=row_study,
            y=y,
            samp_var=var,
            z=z,
        )

    @classmethod
    def empty(cls, hierarchy, window) -> "FitData":
        return cls(hierarchy, window, (), [], [], [], np.zeros((0, N_DESIGN)), [], [], [], [])

    def subset(self, keep) -> "FitData":
        """Data restricted to the studies flagged in boolean ``keep``."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        row_keep = keep[self.row_study]
        return FitData(
            hierarchy=self.hierarchy,
            window=self.window,
            study_ids=tuple(s for s, k in zip(self.study_ids, keep) if k),
            study_country=self.study_country[keep],
            study_t=self.study_t[keep],
            study_class=self.study_class[keep],
            X=self.X[keep],
            row_study=new_index[self.row_study[row_keep]],
            y=self.y[row_keep],
            samp_var=self.samp_var[row_keep],
            z=self.z[row_keep],
        )

    def with_y(self, y) -> "FitData":
        out = replace(self, y=np.asarray(y, dtype=float))
        return out


# ----------------------------------------------------------------------------
# parameter state


@dataclass
class ParamState:
    """One full draw of the mean-structure parameters.

    ``c`` is stored country-major, shape ``(J, 5)``.
    """

    a_c: np.ndarray
    a_s: np.ndarray
    a_r: np.ndarray
    a_g: float
    b_c: np.ndarray
    b_s: np.ndarray
    b_r: np.ndarray
    b_g: float
    u_c: np.ndarray
    u_s: np.ndarray
    u_r: np.ndarray
    u_g: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    c: np.ndarray
    e: np.ndarray

    @classmethod
    def zeros(cls, J, K, L, T, n_studies) -> "ParamState":
        return cls(
            a_c=np.zeros(J), a_s=np.zeros(K), a_r=np.zeros(L), a_g=0.0,
            b_c=np.zeros(J), b_s=np.zeros(K), b_r=np.zeros(L), b_g=0.0,
            u_c=np.zeros((J, T)), u_s=np.zeros((K, T)), u_r=np.zeros((L, T)), u_g=np.zeros(T),
            beta=np.zeros(N_DESIGN), psi=np.zeros(N_AGE), phi=np.zeros(N_AGE),
            c=np.zeros((J, N_AGE)), e=np.zeros(n_studies),
        )

    @classmethod
    def zeros_for(cls, data: FitData) -> "ParamState":
        h = data.hierarchy
        return cls.zeros(h.J, h.K, h.L, data.T, data.n_studies)

    def copy(self) -> "ParamState":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, np.ndarray) else float(v)
        return ParamState(**kw)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, f.name)) for f in fields(self)])

    def shapes(self) -> dict:
        return {f.name: np.shape(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_vector(cls, v, shapes) -> "ParamState":
        kw, pos = {}, 0
        for f in fields(cls):
            name, shp = f.name, tuple(shapes[f.name])
            n = int(np.prod(shp)) if shp else 1
            chunk = np.asarray(v[pos:pos + n], dtype=float)
            kw[name] = float(chunk[0]) if not shp else chunk.reshape(shp).copy()
            pos += n
        return cls(**kw)

    def names(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if np.ndim(v) == 0:
                out.append(f.name)
            else:
                out.extend(f"{f.name}[{','.join(map(str, idx))}]" for idx in np.ndindex(np.shape(v)))
        return out

    def country_intercepts(self, h: GeoHierarchy) -> np.ndarray:
        return self.a_c + self.a_s[h.subregion_of] + self.a_r[h.region_of] + self.a_g

    def country_slopes(self, h: GeoHierarchy) -> np.ndarray:
        return self.b_c + self.b_s[h.subregion_of] + self.b_r[h.region_of] + self.b_g

    def country_u(self, h: GeoHierarchy) -> np.ndarray:
        return self.u_c + self.u_s[h.subregion_of] + self.u_r[h.region_of] + self.u_g[None, :]

    def u_constraint_error(self) -> float:
        T = self.u_g.size
        A = constraint_matrix(T)
        U = np.vstack([self.u_c, self.u_s, self.u_r, self.u_g[None, :]])
        # A's slope row is normalized; express both rows as mean and OLS slope
        t = np.arange(T) - (T - 1) / 2
        slope = U @ t / (t @ t)
        mean = U @ A[0]
        return float(max(np.abs(mean).max(initial=0.0), np.abs(slope).max(initial=0.0)))


# ----------------------------------------------------------------------------
# mean function


def study_levels(data: FitData, state: ParamState) -> np.ndarray:
    """mu_i, the 50-year-old-equivalent level of every study."""
    h = data.hierarchy
    a = state.country_intercepts(h)
    b = state.country_slopes(h)
    u = state.country_u(h)
    j = data.study_country
    return a[j] + b[j] * data.study_tc + data.X @ state.beta + u[j, data.study_t] + state.e


def baseline_level(i: int, data: FitData, state: ParamState) -> float:
    h = data.hierarchy
    j = data.study_country[i]
    a = state.a_c[j] + state.a_s[h.subregion_of[j]] + state.a_r[h.region_of[j]] + state.a_g
    b = state.b_c[j] + state.b_s[h.subregion_of[j]] + state.b_r[h.region_of[j]] + state.b_g
    t = data.study_t[i]
    u = state.u_c[j, t] + state.u_s[h.subregion_of[j], t] + state.u_r[h.region_of[j], t] + state.u_g[t]
    return float(a + b * data.study_tc[i] + data.X[i] @ state.beta + u + state.e[i])


def age_multiplier(B, phi) -> np.ndarray:
    """1 + sum_s phi_s B_s: the coefficient on mu_i in the row mean."""
    return 1.0 + B @ phi


def row_means(data: FitData, state: ParamState, mu=None) -> np.ndarray:
    if mu is None:
        mu = study_levels(data, state)
    mu_row = mu[data.row_study]
    coef = state.psi[None, :] + state.c[data.row_country]
    return mu_row + np.einsum("hs,hs->h", data.B, coef + state.phi[None, :] * mu_row[:, None])


def mean_function(i: int, h_row: int, data: FitData, state: ParamState) -> float:
    """Expected value of age row ``h_row`` (a global row index) of study ``i``."""
    if data.row_study[h_row] != i:
        raise IndexError(f"row {h_row} does not belong to study {i}")
    mu = baseline_level(i, data, state)
    j = data.study_country[i]
    gamma = state.psi + state.phi * mu + state.c[j]
    return float(mu + data.B[h_row] @ gamma)


def row_variances(data: FitData, hypers: HyperParams) -> np.ndarray:
    return data.samp_var + hypers.tau2[data.row_class]


def log_likelihood(data: FitData, state: ParamState, hypers: HyperParams) -> float:
    var = row_variances(data, hypers)
    if np.any(var <= 0):
        raise ValueError("nonpositive likelihood variance")
    r = data.y - row_means(data, state)
    return float(-0.5 * (data.n_rows * LOG2PI + np.log(var).sum() + (r * r / var).sum()))


def _normal_kernel(x, var) -> float:
    x = np.asarray(x, dtype=float)
    var = np.broadcast_to(np.asarray(var, dtype=float), x.shape)
    return float(-0.5 * (x.size * LOG2PI + np.log(var).sum() + (x * x / var).sum()))


def log_prior_effects(state: ParamState, hypers: HyperParams, data: FitData) -> float:
    """Log prior of all mean-structure parameters given hyperparameters."""
    lp = 0.0
    if not (A_GLOBAL_BOUNDS[0] <= state.a_g <= A_GLOBAL_BOUNDS[1]):
        return -np.inf
    if not (B_GLOBAL_BOUNDS[0] <= state.b_g <= B_GLOBAL_BOUNDS[1]):
        return -np.inf
    for name, var in zip(LEVELS, hypers.kappa_a):
        lp += _normal_kernel(getattr(state, f"a_{name}"), var)
    for name, var in zip(LEVELS, hypers.kappa_b):
        lp += _normal_kernel(getattr(state, f"b_{name}"), var)
    if state.u_constraint_error() > U_CONSTRAINT_TOL:
        return -np.inf
    P = build_rw2_precision(data.T).P
    for name, lam in zip(U_LEVELS, hypers.lam):
        U = np.atleast_2d(getattr(state, f"u_{name}"))
        quad = np.einsum("jt,ts,js->", U, P, U)
        lp += U.shape[0] * (0.5 * (data.T - 2) * (np.log(lam) - LOG2PI)) - 0.5 * lam * quad
    lp += _normal_kernel(state.beta, FIXED_PRIOR_VAR)
    lp += _normal_kernel(state.psi, FIXED_PRIOR_VAR)
    lp += _normal_kernel(state.phi, FIXED_PRIOR_VAR)
    lp += _normal_kernel(state.c, np.broadcast_to(hypers.sigma2, state.c.shape))
    lp += _normal_kernel(state.e, hypers.nu[data.study_class])
    return lp


def log_posterior(data: FitData, state: ParamState, hypers: HyperParams) -> float:
    """Unnormalized log posterior; -inf when any hard constraint is violated."""
    lh = log_hyperprior(hypers)
    if not np.isfinite(lh):
        return -np.inf
    lp = log_prior_effects(state, hypers, data)
    if not np.isfinite(lp):
        return -np.inf
    return lh + lp + log_likelihood(data, state, hypers)


# ----------------------------------------------------------------------------
# gradient (for checking conditional algebra)


def log_posterior_gradient(data: FitData, state: ParamState, hypers: HyperParams) -> ParamState:
    """Gradient of the log posterior in the mean-structure parameters.

    The u gradient is the unconstrained one (RW2 kernel treated as a
    Gaussian with precision lam*P).
    """
    h = data.hierarchy
    var = row_variances(data, hypers)
    mu = study_levels(data, state)
    mu_row = mu[data.row_study]
    r = (data.y - row_means(data, state, mu)) / var  # d loglik / d mean_h
    g = age_multiplier(data.B, state.phi)
    dmu = np.bincount(data.row_study, weights=r * g, minlength=data.n_studies)
    j = data.study_country
    J, K, L, T = h.J, h.K, h.L, data.T

    grad = ParamState.zeros(J, K, L, T, data.n_studies)
    g_a_country = np.bincount(j, weights=dmu, minlength=J)
    g_b_country = np.bincount(j, weights=dmu * data.study_tc, minlength=J)
    grad.a_c = g_a_country - state.a_c / hypers.kappa_a[0]
    grad.a_s = np.bincount(h.subregion_of, weights=g_a_country, minlength=K) - state.a_s / hypers.kappa_a[1]
    grad.a_r = np.bincount(h.region_of, weights=g_a_country, minlength=L) - state.a_r / hypers.kappa_a[2]
    grad.a_g = float(g_a_country.sum())
    grad.b_c = g_b_country - state.b_c / hypers.kappa_b[0]
    grad.b_s = np.bincount(h.subregion_of, weights=g_b_country, minlength=K) - state.b_s / hypers.kappa_b[1]
    grad.b_r = np.bincount(h.region_of, weights=g_b_country, minlength=L) - state.b_r / hypers.kappa_b[2]
    grad.b_g = float(g_b_country.sum())

    cell = np.zeros((J, T))
    np.add.at(cell, (j, data.study_t), dmu)
    P = build_rw2_precision(T).P
    grad.u_c = cell - hypers.lam[0] * state.u_c @ P
    grad.u_s = np.stack([cell[h.subregion_of == k].sum(0) for k in range(K)]) - hypers.lam[1] * state.u_s @ P
    grad.u_r = np.stack([cell[h.region_of == l].sum(0) for l in range(L)]) - hypers.lam[2] * state.u_r @ P
    grad.u_g = cell.sum(0) - hypers.lam[3] * state.u_g @ P

    grad.beta = data.X.T @ dmu - state.beta / FIXED_PRIOR_VAR
    grad.e = dmu - state.e / hypers.nu[data.study_class]
    grad.psi = data.B.T @ r - state.psi / FIXED_PRIOR_VAR
    grad.phi = data.B.T @ (r * mu_row) - state.phi / FIXED_PRIOR_VAR
    gc = np.zeros((J, N_AGE))
    np.add.at(gc, data.row_country, data.B * r[:, None])
    grad.c = gc - state.c / hypers.sigma2[None, :]
    return grad


__all__ = [
    "AGE_CENTER", "KNOTS", "HYPER_NAMES", "HyperParams", "ParamState", "FitData", "Coverage",
    "age_basis", "baseline_level", "mean_function", "row_means", "study_levels",
    "log_likelihood", "log_posterior", "log_prior_effects", "log_hyperprior",
    "log_posterior_gradient", "age_multiplier",
]
