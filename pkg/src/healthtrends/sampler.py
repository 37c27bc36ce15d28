"""MCMC for the hierarchical trend model.

One sweep, in fixed order:

1. the mean block: every parameter entering the 50-year level linearly
   (a, b at all levels, beta, the u components, study effects e) drawn
   jointly from its Gaussian full conditional. e is integrated out by a
   Schur complement and drawn last; the u components live in the
   constrained (T-2)-dimensional basis so every draw has zero mean and
   slope. The flat global intercept and slope come last in the block; they
   are drawn exactly from their truncated bivariate normal marginal and
   the rest of the block given them.
2. each kappa, lambda and nu: a log-scale random-walk proposal together
   with a fresh draw of the mean block from its conditional under the
   proposal, accepted with the ratio of block-marginal posteriors. The
   marginal includes the probability of the global truncation box.
3. per-vector refresh of every u component via conditioning by kriging.
4. the age block (psi, phi, c) jointly, with c integrated out per country.
5. each sigma2 jointly with the age block, in the same way as step 2.
6. each tau2 by plain random-walk Metropolis.

Ordering and range constraints are enforced by rejection. Proposal scales
adapt only during burn-in.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import linalg, special, stats

from . import gmrf
from .diagnostics import rank_normalized_split_rhat, split_rhat
from .model import (
    A_GLOBAL_BOUNDS,
    B_GLOBAL_BOUNDS,
    FIXED_PRIOR_VAR,
    HYPER_NAMES,
    LAMBDA_MAX,
    LAMBDA_MIN,
    N_AGE,
    N_CLASS,
    VAR_MAX,
    FitData,
    HyperParams,
    ParamState,
    age_multiplier,
    log_posterior,
    row_means,
    study_levels,
)

log = logging.getLogger(__name__)

GAUSSIAN_BLOCKS = ("a_c", "a_s", "a_r", "a_g", "b_c", "b_s", "b_r", "b_g", "beta", "psi", "phi", "c", "e")
MEAN_BLOCK_HYPERS = HYPER_NAMES[:14]  # kappa (6), lambda (4), nu (4)
AGE_BLOCK_HYPERS = HYPER_NAMES[18:]
TAU_HYPERS = HYPER_NAMES[14:18]
TARGET_ACCEPT = 0.44
ADAPT_BATCH = 25
ADAPT_GAIN = 2.0  # log-scale change per unit acceptance error in early batches


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    n_chains: int = 4
    n_burnin: int = 500
    n_iter: int = 2000
    thin: int = 1
    rng_seed: int = 0
    init_scale: float = 0.5  # log-scale proposal SD at start
    init_mode: str = "moments"  # or "prior"
    init_jitter: float = 0.5  # SD of per-chain log-scale jitter of starting hypers
    u_refresh: bool = True

    def __post_init__(self):
        for name in ("n_chains", "n_iter", "thin"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if int(self.n_burnin) < 0:
            raise ValueError("n_burnin must be >= 0")
        if self.init_mode not in ("moments", "prior"):
            raise ValueError("init_mode must be 'moments' or 'prior'")

    @property
    def n_keep(self) -> int:
        return self.n_iter // self.thin


# ----------------------------------------------------------------------------
# precomputed design


class Workspace:
    """Design matrices and index maps shared by every update for one dataset."""

    def __init__(self, data: FitData):
        self.data = data
        h = data.hierarchy
        J, K, L, T = h.J, h.K, h.L, data.T
        self.J, self.K, self.L, self.T = J, K, L, T
        self.P = gmrf.build_rw2_precision(T).P
        self.V = gmrf.constrained_basis(T)
        self.Pw = self.V.T @ self.P @ self.V
        self.logdet_Pw = float(np.linalg.slogdet(self.Pw)[1])
        m = T - 2
        self.m = m
        n = data.n_studies
        j = data.study_country
        k = h.subregion_of[j]
        l = h.region_of[j]
        t = data.study_t
        tc = data.study_tc

        # partial mean block layout (global a, b excluded)
        sizes = [("a_r", L), ("a_s", K), ("a_c", J), ("b_r", L), ("b_s", K), ("b_c", J), ("beta", data.X.shape[1]),
                 ("u_g", m), ("u_r", L * m), ("u_s", K * m), ("u_c", J * m)]
        self.slices = {}
        pos = 0
        for name, size in sizes:
            self.slices[name] = slice(pos, pos + size)
            pos += size
        p = pos
        self.p = p
        D = np.zeros((n, p))
        rows = np.arange(n)
        D[rows, self.slices["a_r"].start + l] = 1.0
        D[rows, self.slices["a_s"].start + k] = 1.0
        D[rows, self.slices["a_c"].start + j] = 1.0
        D[rows, self.slices["b_r"].start + l] = tc
        D[rows, self.slices["b_s"].start + k] = tc
        D[rows, self.slices["b_c"].start + j] = tc
        D[:, self.slices["beta"]] = data.X
        Vt = self.V[t]  # (n, m)
        for name, idx in (("u_g", np.zeros(n, dtype=int)), ("u_r", l), ("u_s", k), ("u_c", j)):
            start = self.slices[name].start
            cols = start + idx[:, None] * m + np.arange(m)[None, :]
            D[rows[:, None], cols] = Vt
        self.D = D
        # full layout: the partial block followed by the global intercept and slope
        self.D_full = np.hstack([D, np.ones((n, 1)), tc[:, None]])
        self.classes = [np.flatnonzero(data.study_class == c) for c in range(N_CLASS)]
        self.row_classes = [np.flatnonzero(data.row_class == c) for c in range(N_CLASS)]

        # prior precision index maps, for the partial layout and the full one
        self.diag_groups = {}
        for hname, name in (("kappa_a_r", "a_r"), ("kappa_a_s", "a_s"), ("kappa_a_c", "a_c"),
                            ("kappa_b_r", "b_r"), ("kappa_b_s", "b_s"), ("kappa_b_c", "b_c")):
            self.diag_groups[hname] = np.arange(p)[self.slices[name]]
        self.beta_diag = np.arange(p)[self.slices["beta"]]
        self.u_counts = {"lambda_g": 1, "lambda_r": L, "lambda_s": K, "lambda_c": J}
        self._u_flat = {p: self._u_index(p), p + 2: self._u_index(p + 2)}
        self.global_identified = n > 0 and np.ptp(tc) > 0
        self.row_country_onehot = np.zeros((J, data.n_rows))
        self.row_country_onehot[data.row_country, np.arange(data.n_rows)] = 1.0

        # age block scaling
        if data.n_rows:
            self.B_scale = np.sqrt((data.B**2).mean(axis=0))
            self.B_scale[self.B_scale == 0] = 1.0
        else:
            self.B_scale = np.ones(N_AGE)

    def _u_index(self, ptot):
        m = self.m
        out = {}
        for hname, name in (("lambda_g", "u_g"), ("lambda_r", "u_r"), ("lambda_s", "u_s"), ("lambda_c", "u_c")):
            count = self.u_counts[hname]
            base = self.slices[name].start + m * np.arange(count)
            r = base[:, None, None] + np.arange(m)[None, :, None]
            c = base[:, None, None] + np.arange(m)[None, None, :]
            r, c = np.broadcast_arrays(r, c)
            out[hname] = (r.ravel() * ptot + c.ravel(), np.tile(self.Pw.ravel(), count))
        return out

    # -- prior of the mean block (the flat global terms contribute nothing)

    def prior_precision(self, hypers: HyperParams) -> np.ndarray:
        Lam = np.zeros((self.p, self.p))
        self.add_prior(Lam, hypers)
        return Lam

    def add_prior(self, Q, hypers: HyperParams):
        """Add the prior precision in place to the leading ``p x p`` block.

        ``Q`` must be C-contiguous and either ``p x p`` or, for the full
        layout, ``(p + 2) x (p + 2)``; the flat global terms add nothing.
        """
        if not Q.flags.c_contiguous:
            raise ValueError("add_prior needs a C-contiguous matrix")
        hv = hypers.as_dict()
        for hname, idx in self.diag_groups.items():
            Q[idx, idx] += 1.0 / hv[hname]
        Q[self.beta_diag, self.beta_diag] += 1.0 / FIXED_PRIOR_VAR
        flat_Q = Q.reshape(-1)
        for hname, (flat, vals) in self._u_flat[Q.shape[0]].items():
            flat_Q[flat] += hv[hname] * vals
        return Q

    def prior_logdet(self, hypers: HyperParams) -> float:
        """Hyperparameter-dependent part of log|prior precision|."""
        hv = hypers.as_dict()
        out = 0.0
        for hname, idx in self.diag_groups.items():
            out -= idx.size * np.log(hv[hname])
        for hname, count in self.u_counts.items():
            out += count * self.m * np.log(hv[hname])
        return float(out)

    def unpack(self, theta, state: ParamState, with_global: bool):
        if with_global:
            state.a_g = float(theta[-2])
            state.b_g = float(theta[-1])
            theta = theta[:-2]
        s = self.slices
        for name in ("a_r", "a_s", "a_c", "b_r", "b_s", "b_c", "beta"):
            setattr(state, name, np.array(theta[s[name]]))
        m, V = self.m, self.V
        state.u_g = V @ theta[s["u_g"]]
        state.u_r = theta[s["u_r"]].reshape(self.L, m) @ V.T
        state.u_s = theta[s["u_s"]].reshape(self.K, m) @ V.T
        state.u_c = theta[s["u_c"]].reshape(self.J, m) @ V.T


# ----------------------------------------------------------------------------
# study-level sufficient statistics


def study_stats(ws: Workspace, state: ParamState, hypers: HyperParams):
    """G_i = sum_h w g^2 and R_i = sum_h w g (y - age part), per study.

    ``R`` is the linear term with every mu component removed, so the mean
    block likelihood is ``sum_i -G_i delta_i^2 / 2 + R_i delta_i``.
    """
    d = ws.data
    w = 1.0 / (d.samp_var + hypers.tau2[d.row_class])
    g = age_multiplier(d.B, state.phi)
    age_part = np.einsum("hs,hs->h", d.B, state.psi[None, :] + state.c[d.row_country])
    G = np.bincount(d.row_study, weights=w * g * g, minlength=d.n_studies)
    R = np.bincount(d.row_study, weights=w * g * (d.y - age_part), minlength=d.n_studies)
    return G, R


def bivariate_normal_cdf(h, k, rho) -> float:
    """P(X <= h, Y <= k) for standard normals with correlation ``rho``, via Owen's T."""
    h = float(np.clip(h, -40.0, 40.0))
    k = float(np.clip(k, -40.0, 40.0))
    h = h if h != 0.0 else 1e-300
    k = k if k != 0.0 else 1e-300
    s = np.sqrt(1.0 - rho * rho)
    t = special.owens_t(h, (k - rho * h) / (h * s)) + special.owens_t(k, (h - rho * k) / (k * s))
    corr = 0.0 if h * k > 0 or (h * k == 0 and h + k >= 0) else 0.5
    return float(0.5 * special.ndtr(h) + 0.5 * special.ndtr(k) - t - corr)


def _log_box_probability(mean, cov, bounds) -> float:
    """log P(x in box) for a bivariate normal ``N(mean, cov)``.

    Returns exactly 0 when every edge is more than 9 SD away (the missing
    mass is below 1e-18).
    """
    sd = np.sqrt(np.diag(cov))
    lo = np.array([bounds[0][0], bounds[1][0]], dtype=float)
    hi = np.array([bounds[0][1], bounds[1][1]], dtype=float)
    zl = (lo - mean) / sd
    zh = (hi - mean) / sd
    if np.all(zl < -9.0) and np.all(zh > 9.0):
        return 0.0
    rho = float(np.clip(cov[0, 1] / (sd[0] * sd[1]), -1.0 + 1e-12, 1.0 - 1e-12))
    if abs(rho) < 1e-10:
        p = (special.ndtr(zh) - special.ndtr(zl)).prod()
    else:
        F = bivariate_normal_cdf
        p = F(zh[0], zh[1], rho) - F(zl[0], zh[1], rho) - F(zh[0], zl[1], rho) + F(zl[0], zl[1], rho)
    return float(np.log(p)) if p > 0 else -np.inf


class MeanBlock:
    """Collapsed Gaussian conditional of the mean block under fixed G, R.

    With ``with_global`` (the default whenever the data identify them) the
    flat global intercept and slope belong to the block and the log-marginal
    includes the probability that they land inside their truncation box, so
    variance updates never condition on them. Otherwise they are held at
    their current values and refreshed by scalar Gibbs steps after each draw.

    Factorizations are cached per hyperparameter vector, so the current
    state's log-marginal is computed once per sweep.
    """

    def __init__(self, ws: Workspace, G, R, state: ParamState, hypers: HyperParams, with_global=None):
        self.ws = ws
        self.G = np.asarray(G, dtype=float)
        self.R_full = np.asarray(R, dtype=float)
        self.with_global = ws.global_identified if with_global is None else bool(with_global)
        self.D = ws.D_full if self.with_global else ws.D
        self.set_globals(state.a_g, state.b_g)

    def set_globals(self, a_g, b_g):
        self.a_g, self.b_g = a_g, b_g
        if self.with_global:
            self.R = self.R_full
        else:
            self.R = self.R_full - self.G * (a_g + b_g * self.ws.data.study_tc)
        self._terms_cache = {}
        self._cache = {}

    def data_terms(self, nu):
        """Shrinkage, data precision, linear term and e-integral for study variances ``nu``."""
        nu = np.asarray(nu, dtype=float)
        key = nu.tobytes()
        hit = self._terms_cache.get(key)
        if hit is not None:
            return hit
        nu_study = nu[self.ws.data.study_class]
        G = self.G
        shrink = 1.0 / (1.0 + G * nu_study)
        D = self.D
        terms = {
            "nu_study": nu_study,
            "shrink": shrink,
            "Q_data": (D * (G * shrink)[:, None]).T @ D,
            "b": D.T @ (self.R * shrink),
            "e_term": float(0.5 * (-np.log1p(G * nu_study) + nu_study * self.R**2 * shrink).sum()),
        }
        if len(self._terms_cache) >= 4:
            self._terms_cache.pop(next(iter(self._terms_cache)))
        self._terms_cache[key] = terms
        return terms

    def precision(self, hypers: HyperParams):
        terms = self.data_terms(hypers.nu)
        Q = terms["Q_data"].copy()
        self.ws.add_prior(Q, hypers)
        return Q, terms["b"]

    def factor(self, hypers: HyperParams) -> dict:
        key = hypers.to_vector()[: len(MEAN_BLOCK_HYPERS)].tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        terms = self.data_terms(hypers.nu)
        Q, b = self.precision(hypers)
        d = np.sqrt(np.diag(Q))
        L = gmrf.cholesky(Q / d[:, None] / d[None, :])
        w = linalg.solve_triangular(L, b / d, lower=True, check_finite=False)
        mean = linalg.solve_triangular(L.T, w, lower=False, check_finite=False) / d
        logdet = 2.0 * np.log(np.diag(L)).sum() + 2.0 * np.log(d).sum()
        lm = terms["e_term"] + 0.5 * self.ws.prior_logdet(hypers) - 0.5 * logdet + 0.5 * float(w @ w)
        out = {"L": L, "d": d, "w": w, "mean": mean}
        if self.with_global:
            # the globals come last, so their marginal is read off the
            # trailing 2 x 2 block of the scaled Cholesky factor
            L22 = L[-2:, -2:]
            cov = np.linalg.inv(L22 @ L22.T) / np.outer(d[-2:], d[-2:])
            out["global_mean"], out["global_cov"] = mean[-2:], 0.5 * (cov + cov.T)
            lm += _log_box_probability(mean[-2:], out["global_cov"], (A_GLOBAL_BOUNDS, B_GLOBAL_BOUNDS))
        out["lm"] = float(lm)
        if len(self._cache) >= 4:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = out
        return out

    def log_marginal(self, hypers: HyperParams) -> float:
        """log p(data | hypers) with the block integrated out, up to a constant."""
        return self.factor(hypers)["lm"]

    def _draw(self, f, rng):
        L, d = f["L"], f["d"]
        z = rng.standard_normal(d.size)
        if not self.with_global:
            return f["mean"] + linalg.solve_triangular(L.T, z, lower=False, check_finite=False) / d
        # globals from their truncated bivariate marginal, then the rest given
        # them by back-substitution through the leading block of L'
        g = truncated_bivariate_normal(f["global_mean"], f["global_cov"], (A_GLOBAL_BOUNDS, B_GLOBAL_BOUNDS), rng)
        gs = g * d[-2:]
        rhs = f["w"][:-2] + z[:-2] - L[-2:, :-2].T @ gs
        rest = linalg.solve_triangular(L[:-2, :-2].T, rhs, lower=False, check_finite=False) / d[:-2]
        return np.concatenate([rest, g])

    def sample(self, hypers: HyperParams, rng, state: ParamState):
        """Draw the block (and e) under ``hypers`` into ``state``."""
        f = self.factor(hypers)
        terms = self.data_terms(hypers.nu)
        theta = self._draw(f, rng)
        self.ws.unpack(theta, state, with_global=self.with_global)
        d_i = self.D @ theta
        prec = self.G + 1.0 / terms["nu_study"]
        state.e = (self.R - self.G * d_i) / prec + rng.standard_normal(self.G.size) / np.sqrt(prec)
        if not self.with_global:
            gibbs_update_gaussian_block("a_g", self.ws.data, state, hypers, rng, self.ws)
            gibbs_update_gaussian_block("b_g", self.ws.data, state, hypers, rng, self.ws)
            self.set_globals(state.a_g, state.b_g)
        return state


# ----------------------------------------------------------------------------
# truncated normal helper


def _truncated_normal(mean, var, lo, hi, rng) -> float:
    """One draw from N(mean, var) restricted to [lo, hi] by inverse CDF.

    Works on the side of the mean where the interval lies so that the CDF
    values stay representable; ``var = inf`` means a uniform draw.
    """
    if var == np.inf:
        return float(rng.uniform(lo, hi))
    sd = np.sqrt(var)
    if sd == 0:
        return float(np.clip(mean, lo, hi))
    a, b = (lo - mean) / sd, (hi - mean) / sd
    flip = a > 0
    if flip:
        a, b = -b, -a
    if b < -35.0:
        x = float(stats.truncnorm.rvs(a, b, random_state=rng))
    else:
        pa, pb = special.ndtr(a), special.ndtr(b)
        x = float(special.ndtri(pa + rng.uniform() * (pb - pa)))
        x = min(max(x, a), b)
    if flip:
        x = -x
    return float(mean + sd * x)


def truncated_bivariate_normal(mean, cov, bounds, rng, max_tries=10000):
    """Exact draw from N(mean, cov) restricted to an axis-aligned box.

    The first coordinate is proposed from its marginal truncated to its own
    range and accepted with the conditional probability that the second
    lands in range, which is then drawn from its truncated conditional.
    """
    (lo0, hi0), (lo1, hi1) = bounds
    m0, m1 = mean
    v0, v1, c = cov[0, 0], cov[1, 1], cov[0, 1]
    slope = c / v0
    cv = max(v1 - c * slope, 0.0)
    cs = np.sqrt(cv)
    for _ in range(max_tries):
        x0 = _truncated_normal(m0, v0, lo0, hi0, rng)
        cm = m1 + slope * (x0 - m0)
        if cs == 0:
            if lo1 <= cm <= hi1:
                return np.array([x0, cm])
            continue
        p = special.ndtr((hi1 - cm) / cs) - special.ndtr((lo1 - cm) / cs)
        if rng.uniform() < p:
            return np.array([x0, _truncated_normal(cm, cv, lo1, hi1, rng)])
    raise SamplerError("truncation box has negligible posterior mass for the global terms")


# ----------------------------------------------------------------------------
# single-block Gibbs updates


def _study_block_design(block, ws: Workspace, state: ParamState):
    d = ws.data
    h = d.hierarchy
    n = d.n_studies
    j = d.study_country
    if block in ("a_c", "b_c"):
        idx, size = j, h.J
    elif block in ("a_s", "b_s"):
        idx, size = h.subregion_of[j], h.K
    elif block in ("a_r", "b_r"):
        idx, size = h.region_of[j], h.L
    elif block in ("a_g", "b_g"):
        idx, size = np.zeros(n, dtype=int), 1
    elif block == "beta":
        return d.X.copy()
    elif block == "e":
        return None
    else:
        raise KeyError(block)
    Dm = np.zeros((n, size))
    Dm[np.arange(n), idx] = d.study_tc if block.startswith("b") else 1.0
    return Dm


def _prior_var(block, hypers: HyperParams):
    level = {"c": 0, "s": 1, "r": 2}
    if block[0] in "ab" and block[2] in level:
        return (hypers.kappa_a if block[0] == "a" else hypers.kappa_b)[level[block[2]]]
    if block == "beta":
        return FIXED_PRIOR_VAR
    return None


def gibbs_update_gaussian_block(block, data: FitData, state: ParamState, hypers: HyperParams, rng, ws=None):
    """Draw ``block`` from its exact Gaussian full conditional; updates ``state`` in place."""
    if block not in GAUSSIAN_BLOCKS:
        raise KeyError(f"unknown Gaussian block {block!r}")
    ws = ws or Workspace(data)
    d = data
    if block in ("psi", "phi", "c"):
        _gibbs_age_piece(block, ws, state, hypers, rng)
        return state
    G, R = study_stats(ws, state, hypers)
    mu = study_levels(d, state)
    if block == "e":
        R_minus = R - G * (mu - state.e)
        prec = G + 1.0 / hypers.nu[d.study_class]
        state.e = R_minus / prec + rng.standard_normal(d.n_studies) / np.sqrt(prec)
        return state
    Dm = _study_block_design(block, ws, state)
    current = np.atleast_1d(np.asarray(getattr(state, block), dtype=float))
    delta = Dm @ current
    R_minus = R - G * (mu - delta)
    Q = (Dm * G[:, None]).T @ Dm
    b = Dm.T @ R_minus
    if block in ("a_g", "b_g"):
        lo, hi = A_GLOBAL_BOUNDS if block == "a_g" else B_GLOBAL_BOUNDS
        q = float(Q[0, 0])
        if q <= 0:
            val = _truncated_normal(0.0, np.inf, lo, hi, rng)
        else:
            val = _truncated_normal(b[0] / q, 1.0 / q, lo, hi, rng)
        setattr(state, block, val)
        return state
    Q[np.diag_indices_from(Q)] += 1.0 / _prior_var(block, hypers)
    setattr(state, block, gmrf.sample_canonical(Q, b, rng))
    return state


def _age_residual(ws, state, mu):
    d = ws.data
    mu_row = mu[d.row_study]
    return d.y - mu_row, mu_row


def _gibbs_age_piece(block, ws: Workspace, state: ParamState, hypers: HyperParams, rng):
    d = ws.data
    mu = study_levels(d, state)
    r0, mu_row = _age_residual(ws, state, mu)
    w = 1.0 / (d.samp_var + hypers.tau2[d.row_class])
    B = d.B
    psi_part = B @ state.psi
    phi_part = (B @ state.phi) * mu_row
    c_part = np.einsum("hs,hs->h", B, state.c[d.row_country])
    if block == "psi":
        F = B
        r = r0 - phi_part - c_part
    elif block == "phi":
        F = B * mu_row[:, None]
        r = r0 - psi_part - c_part
    else:
        r = r0 - psi_part - phi_part
        c = np.empty_like(state.c)
        for j in range(ws.J):
            rows = d.row_country == j
            Bj = B[rows]
            Q = (Bj * w[rows, None]).T @ Bj + np.diag(1.0 / hypers.sigma2)
            c[j] = gmrf.sample_canonical(Q, Bj.T @ (w[rows] * r[rows]), rng)
        state.c = c
        return
    Q = (F * w[:, None]).T @ F + np.eye(N_AGE) / FIXED_PRIOR_VAR
    setattr(state, block, gmrf.sample_canonical(Q, F.T @ (w * r), rng))


# ----------------------------------------------------------------------------
# joint mean block


def sample_mean_block(ws: Workspace, state: ParamState, hypers: HyperParams, rng):
    """Joint draw of (a, b, beta, u, e) including the flat global terms."""
    G, R = study_stats(ws, state, hypers)
    MeanBlock(ws, G, R, state, hypers).sample(hypers, rng, state)
    return state


# ----------------------------------------------------------------------------
# u components, one vector at a time


def update_u_blocks(data: FitData, state: ParamState, hypers: HyperParams, rng, ws=None):
    """Gibbs update of every u vector from its constrained Gaussian conditional."""
    ws = ws or Workspace(data)
    d = data
    h = d.hierarchy
    T = ws.T
    j_of = d.study_country
    members = {
        "c": j_of,
        "s": h.subregion_of[j_of],
        "r": h.region_of[j_of],
        "g": np.zeros(d.n_studies, dtype=int),
    }
    G, R = study_stats(ws, state, hypers)
    for level, lam in zip(("c", "s", "r", "g"), hypers.lam):
        name = f"u_{level}"
        U = np.atleast_2d(getattr(state, name)).copy()
        grp = members[level]
        mu = study_levels(d, state)
        u_now = U[grp, d.study_t]
        R_minus = R - G * (mu - u_now)
        cell = grp * T + d.study_t
        prec = np.bincount(cell, weights=G, minlength=U.shape[0] * T).reshape(U.shape)
        lin = np.bincount(cell, weights=R_minus, minlength=U.shape[0] * T).reshape(U.shape)
        U = gmrf.sample_rw2_conditional_batch(lam, ws.P, prec, lin, rng)
        setattr(state, name, U[0] if level == "g" else U)
    return state


# ----------------------------------------------------------------------------
# age block (psi, phi, c jointly)


class AgeBlock:
    """Collapsed conditional of (psi, phi, c) given the study levels mu."""

    def __init__(self, ws: Workspace, state: ParamState, hypers: HyperParams):
        d = ws.data
        self.ws = ws
        mu = study_levels(d, state)
        mu_row = mu[d.row_study]
        w = 1.0 / (d.samp_var + hypers.tau2[d.row_class])
        r = d.y - mu_row
        s = ws.B_scale
        Bs = d.B / s
        mu_scale = np.sqrt((mu_row**2).mean()) if d.n_rows else 1.0
        mu_scale = mu_scale if mu_scale > 0 else 1.0
        self.mu_scale = mu_scale
        F = np.hstack([Bs, Bs * (mu_row / mu_scale)[:, None]])
        self.scale_g = np.concatenate([s, s * mu_scale])
        J, n = ws.J, d.n_rows
        wB = Bs * w[:, None]
        M = ws.row_country_onehot
        self.H = (M @ (wB[:, :, None] * Bs[:, None, :]).reshape(n, N_AGE * N_AGE)).reshape(J, N_AGE, N_AGE)
        self.Kc = (M @ (wB[:, :, None] * F[:, None, :]).reshape(n, 2 * N_AGE * N_AGE)).reshape(J, N_AGE, 2 * N_AGE)
        self.h = M @ (wB * r[:, None])
        self._lm_cache = {}
        self.Qg = (F * w[:, None]).T @ F + np.diag(1.0 / (FIXED_PRIOR_VAR * self.scale_g**2))
        self.bg = F.T @ (w * r)

    def _collapse(self, sigma2):
        # scaled c_tilde = c * B_scale has variance sigma2 * B_scale^2
        prior = 1.0 / (sigma2 * self.ws.B_scale**2)
        C = self.H + np.eye(N_AGE)[None] * prior[None, None, :]
        Lc = np.linalg.cholesky(C)
        CiK = np.linalg.solve(C, self.Kc)
        Cih = np.linalg.solve(C, self.h[..., None])[..., 0]
        Qt = self.Qg - np.einsum("jsa,jsb->ab", self.Kc, CiK)
        bt = self.bg - np.einsum("jsa,js->a", self.Kc, Cih)
        Qt = 0.5 * (Qt + Qt.T)
        logdet_C = 2.0 * np.log(np.diagonal(Lc, axis1=1, axis2=2)).sum()
        local = -0.5 * self.ws.J * np.log(1.0 / prior).sum() - 0.5 * logdet_C + 0.5 * np.einsum("js,js->", self.h, Cih)
        return Qt, bt, C, local

    def log_marginal(self, sigma2) -> float:
        key = np.asarray(sigma2, dtype=float).tobytes()
        if key not in self._lm_cache:
            Qt, bt, _, local = self._collapse(sigma2)
            logdet, quad, _ = gmrf.gaussian_log_normalizer(Qt, bt)
            if len(self._lm_cache) >= 4:
                self._lm_cache.pop(next(iter(self._lm_cache)))
            self._lm_cache[key] = float(local - 0.5 * logdet + 0.5 * quad)
        return self._lm_cache[key]

    def sample(self, sigma2, state: ParamState, rng):
        Qt, bt, C, _ = self._collapse(sigma2)
        gam = gmrf.sample_canonical(Qt, bt, rng)
        rhs = self.h - np.einsum("jsa,a->js", self.Kc, gam)
        Lc = np.linalg.cholesky(C)
        mean = np.linalg.solve(C, rhs[..., None])[..., 0]
        z = rng.standard_normal(mean.shape)
        # x = mean + L^-T z
        noise = np.stack([linalg.solve_triangular(Lc[j].T, z[j], lower=False) for j in range(self.ws.J)])
        c_scaled = mean + noise
        state.psi = gam[:N_AGE] / self.scale_g[:N_AGE]
        state.phi = gam[N_AGE:] / self.scale_g[N_AGE:]
        state.c = c_scaled / self.ws.B_scale[None, :]


def sample_age_block(ws: Workspace, state: ParamState, hypers: HyperParams, rng):
    AgeBlock(ws, state, hypers).sample(hypers.sigma2, state, rng)
    return state


# ----------------------------------------------------------------------------
# hyperparameter updates


def _log_hyper_prior_and_jacobian(name, value) -> float:
    """Log prior on the stored scale plus the log-scale random-walk Jacobian."""
    if name.startswith("lambda"):
        if value < LAMBDA_MIN or value > LAMBDA_MAX:
            return -np.inf
        return -0.5 * np.log(value)
    if value <= 0 or value > VAR_MAX:
        return -np.inf
    return 0.5 * np.log(value)


_HYPER_SLOT = {}
for _group, _names in (("kappa_a", HYPER_NAMES[0:3]), ("kappa_b", HYPER_NAMES[3:6]), ("lam", HYPER_NAMES[6:10]),
                       ("nu", HYPER_NAMES[10:14]), ("tau2", HYPER_NAMES[14:18]), ("sigma2", HYPER_NAMES[18:23])):
    for _k, _n in enumerate(_names):
        _HYPER_SLOT[_n] = (_group, _k)


def _with_hyper(hypers: HyperParams, name, value) -> HyperParams:
    group, k = _HYPER_SLOT[name]
    prop = copy.copy(hypers)
    arr = getattr(hypers, group).copy()
    arr[k] = value
    setattr(prop, group, arr)
    return prop


def _propose(hypers, name, scale, rng):
    group, k = _HYPER_SLOT[name]
    cur = float(getattr(hypers, group)[k])
    new = float(np.exp(np.log(cur) + scale * rng.standard_normal()))
    prop = _with_hyper(hypers, name, new)
    ok = np.isfinite(_log_hyper_prior_and_jacobian(name, new))
    if ok and group in ("nu", "tau2"):
        arr = getattr(prop, group)
        ok = (k == 0 or arr[k - 1] < new) and (k == len(arr) - 1 or new < arr[k + 1])
    return cur, new, prop, bool(ok)


def joint_update_variance_and_effects(name, data: FitData, state: ParamState, hypers: HyperParams, rng,
                                      scale=0.5, ws=None, block=None):
    """Metropolis-Hastings step for one variance jointly with its effect block.

    The hyperparameter is proposed by a log-scale random walk and the block
    it governs is redrawn from its full conditional under the proposal, so
    the acceptance ratio is the ratio of block-marginal posteriors. Returns
    ``(hypers, accepted)``; ``state`` is changed in place only on acceptance.
    """
    ws = ws or Workspace(data)
    cur, new, prop, ok = _propose(hypers, name, scale, rng)
    if name in AGE_BLOCK_HYPERS:
        block = block or AgeBlock(ws, state, hypers)
        if not ok:
            return hypers, False
        lm_cur = block.log_marginal(hypers.sigma2)
        lm_new = block.log_marginal(prop.sigma2)
        log_a = lm_new - lm_cur + _log_hyper_prior_and_jacobian(name, new) - _log_hyper_prior_and_jacobian(name, cur)
        if np.log(rng.uniform()) < log_a:
            block.sample(prop.sigma2, state, rng)
            return prop, True
        return hypers, False
    if name not in MEAN_BLOCK_HYPERS:
        raise KeyError(f"{name} has no associated effect block")
    if block is None:
        G, R = study_stats(ws, state, hypers)
        block = MeanBlock(ws, G, R, state, hypers)
    if not ok:
        return hypers, False
    lm_cur = block.log_marginal(hypers)
    try:
        lm_new = block.log_marginal(prop)
    except gmrf.CholeskyError:
        return hypers, False
    log_a = lm_new - lm_cur + _log_hyper_prior_and_jacobian(name, new) - _log_hyper_prior_and_jacobian(name, cur)
    if np.log(rng.uniform()) < log_a:
        block.sample(prop, rng, state)
        return prop, True
    return hypers, False


def update_tau_squared(cls: int, data: FitData, state: ParamState, hypers: HyperParams, rng, scale=0.5,
                       resid2=None):
    """Random-walk Metropolis on log tau2 for one coverage class."""
    name = TAU_HYPERS[cls]
    cur, new, prop, ok = _propose(hypers, name, scale, rng)
    if not ok:
        return hypers, False
    if resid2 is None:
        resid2 = (data.y - row_means(data, state)) ** 2
    rows = data.row_class == cls
    v = data.samp_var[rows]
    r2 = resid2[rows]

    def ll(tau2):
        var = v + tau2
        return -0.5 * (np.log(var).sum() + (r2 / var).sum())

    log_a = ll(new) - ll(cur) + _log_hyper_prior_and_jacobian(name, new) - _log_hyper_prior_and_jacobian(name, cur)
    if np.log(rng.uniform()) < log_a:
        return prop, True
    return hypers, False


# ----------------------------------------------------------------------------
# initialization


def initial_values(data: FitData, config: SamplerConfig, rng):
    state = ParamState.zeros_for(data)
    h = data.hierarchy
    if data.n_rows:
        ybar = float(data.y.mean())
        study_mean = np.bincount(data.row_study, weights=data.y) / np.bincount(data.row_study)
        vy = float(study_mean.var()) if study_mean.size > 1 else float(data.y.var())
        vy = max(vy, 1e-2)
        vs = float(np.median(data.samp_var))
        B_scale = np.sqrt((data.B**2).mean(axis=0))
        B_scale[B_scale == 0] = 1.0
    else:
        ybar, vy, vs, B_scale = 0.5 * sum(A_GLOBAL_BOUNDS), 1.0, 1.0, np.ones(N_AGE)
    state.a_g = float(np.clip(ybar, *A_GLOBAL_BOUNDS))
    span = max(data.T - 1, 1)
    hyp = HyperParams(
        kappa_a=np.full(3, vy / 3.0),
        kappa_b=np.full(3, vy / 3.0 / span**2),
        lam=np.full(4, 1.0 / max(0.05 * vy, 1e-3)),
        nu=vy * np.array([0.1, 0.2, 0.4, 0.8]),
        tau2=max(vs, 1e-2) * np.array([0.25, 0.5, 1.0, 2.0]),
        sigma2=(0.1 / B_scale) ** 2,
    )
    v = np.log(hyp.to_vector())
    if config.init_mode == "prior":
        v = np.log(np.concatenate([
            rng.uniform(1.0, 30.0, 6) ** 2,
            np.exp(rng.uniform(-2.0, 4.0, 4)),
            np.sort(rng.uniform(1.0, 10.0, 4)) ** 2,
            np.sort(rng.uniform(0.5, 5.0, 4)) ** 2,
            hyp.sigma2,
        ]))
    if config.init_jitter > 0:
        v = v + config.init_jitter * rng.standard_normal(v.size)
    v = np.exp(v)
    hyp = HyperParams.from_vector(v)
    hyp.nu = np.sort(hyp.nu)
    hyp.tau2 = np.sort(hyp.tau2)
    hyp.kappa_a = np.clip(hyp.kappa_a, 1e-8, VAR_MAX)
    hyp.kappa_b = np.clip(hyp.kappa_b, 1e-10, VAR_MAX)
    hyp.lam = np.clip(hyp.lam, LAMBDA_MIN, LAMBDA_MAX)
    hyp.sigma2 = np.clip(hyp.sigma2, 1e-30, VAR_MAX)
    hyp.nu = np.clip(hyp.nu, 1e-8, VAR_MAX)
    hyp.tau2 = np.clip(hyp.tau2, 1e-8, VAR_MAX)
    if not hyp.is_valid():
        raise SamplerError(f"could not build valid starting values: {hyp.violations()}")
    return state, hyp


# ----------------------------------------------------------------------------
# chains


@dataclass
class ChainResult:
    chain: int
    seed_key: tuple
    state_draws: np.ndarray  # (n_keep, n_state)
    hyper_draws: np.ndarray  # (n_keep, 23)
    acceptance: dict
    proposal_scales: dict
    runtime: float


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in draws of all chains."""

    state_names: list
    state_shapes: dict
    state: np.ndarray  # (chains, n_keep, n_state)
    hyper: np.ndarray  # (chains, n_keep, 23)
    acceptance: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    runtime: float = 0.0

    hyper_names = HYPER_NAMES

    @property
    def n_chains(self) -> int:
        return self.state.shape[0]

    @property
    def n_keep(self) -> int:
        return self.state.shape[1]

    @property
    def n_draws(self) -> int:
        return self.n_chains * self.n_keep

    def param(self, name) -> np.ndarray:
        """(chains, n_keep) trace of one named scalar (state or hyper)."""
        if name in HYPER_NAMES:
            return self.hyper[:, :, HYPER_NAMES.index(name)]
        return self.state[:, :, self.state_names.index(name)]

    def flat_state(self) -> np.ndarray:
        return self.state.reshape(-1, self.state.shape[-1])

    def flat_hyper(self) -> np.ndarray:
        return self.hyper.reshape(-1, self.hyper.shape[-1])

    def iter_draws(self):
        for s_vec, h_vec in zip(self.flat_state(), self.flat_hyper()):
            yield ParamState.from_vector(s_vec, self.state_shapes), HyperParams.from_vector(h_vec)

    def get(self, chain, k):
        return (ParamState.from_vector(self.state[chain, k], self.state_shapes),
                HyperParams.from_vector(self.hyper[chain, k]))

    def rhat(self, names=None) -> dict:
        names = names or list(HYPER_NAMES) + ["a_g", "b_g"]
        out = {}
        for n in names:
            x = self.param(n)
            out[n] = {"split_rhat": rank_normalized_split_rhat(x), "split_rhat_classic": split_rhat(x)}
        return out

    @classmethod
    def from_chains(cls, results, shapes, names, config=None) -> "PosteriorDraws":
        results = sorted(results, key=lambda r: r.chain)
        return cls(
            state_names=names,
            state_shapes=shapes,
            state=np.stack([r.state_draws for r in results]),
            hyper=np.stack([r.hyper_draws for r in results]),
            acceptance=[r.acceptance for r in results],
            seeds=[list(r.seed_key) for r in results],
            config=config or {},
            runtime=float(sum(r.runtime for r in results)),
        )


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chain),)))


def sweep(ws: Workspace, state: ParamState, hypers: HyperParams, rng, scales: dict, accepts: dict,
          u_refresh: bool = True, fixed=()):
    d = ws.data
    G, R = study_stats(ws, state, hypers)
    mb = MeanBlock(ws, G, R, state, hypers)
    mb.sample(hypers, rng, state)
    for name in MEAN_BLOCK_HYPERS:
        if name in fixed:
            continue
        hypers, acc = joint_update_variance_and_effects(name, d, state, hypers, rng, scales[name], ws, mb)
        accepts[name] += acc
    if u_refresh:
        update_u_blocks(d, state, hypers, rng, ws)
    ab = AgeBlock(ws, state, hypers)
    ab.sample(hypers.sigma2, state, rng)
    for name in AGE_BLOCK_HYPERS:
        if name in fixed:
            continue
        hypers, acc = joint_update_variance_and_effects(name, d, state, hypers, rng, scales[name], ws, ab)
        accepts[name] += acc
    resid2 = (d.y - row_means(d, state)) ** 2
    for cls in range(N_CLASS):
        if TAU_HYPERS[cls] in fixed:
            continue
        hypers, acc = update_tau_squared(cls, d, state, hypers, rng, scales[TAU_HYPERS[cls]], resid2)
        accepts[TAU_HYPERS[cls]] += acc
    return state, hypers


def run_chain(data: FitData, config: SamplerConfig, chain: int = 0, init=None, callback=None,
              fixed_hypers=None) -> ChainResult:
    """Run one chain; deterministic given ``(config.rng_seed, chain)``.

    ``fixed_hypers`` maps hyperparameter names to values held constant.
    """
    t0 = time.perf_counter()
    rng = chain_rng(config.rng_seed, chain)
    ws = Workspace(data)
    if init is None:
        state, hypers = initial_values(data, config, rng)
    else:
        state, hypers = init[0].copy(), init[1].copy()
    fixed = dict(fixed_hypers or {})
    if fixed:
        vals = hypers.as_dict()
        vals.update(fixed)
        hypers = HyperParams.from_dict(vals)
        hypers.nu = np.sort(hypers.nu) if "nu_w" not in fixed else hypers.nu
        hypers.tau2 = np.sort(hypers.tau2) if "tau2_w" not in fixed else hypers.tau2
        if not hypers.is_valid():
            raise SamplerError(f"fixed hyperparameters give an invalid start: {hypers.violations()}")
    scales = {n: config.init_scale for n in HYPER_NAMES}
    accepts = {n: 0 for n in HYPER_NAMES}
    batch_acc = {n: 0 for n in HYPER_NAMES}
    n_state = state.to_vector().size
    keep_s = np.empty((config.n_keep, n_state))
    keep_h = np.empty((config.n_keep, len(HYPER_NAMES)))
    total = config.n_burnin + config.n_iter
    kept = 0
    n_batches = 0
    for it in range(total):
        before = dict(accepts)
        state, hypers = sweep(ws, state, hypers, rng, scales, accepts, config.u_refresh, fixed)
        if it < config.n_burnin:
            for n in HYPER_NAMES:
                batch_acc[n] += accepts[n] - before[n]
            if (it + 1) % ADAPT_BATCH == 0:
                n_batches += 1
                gain = min(ADAPT_GAIN, ADAPT_GAIN * 2.0 / np.sqrt(n_batches))
                for n in HYPER_NAMES:
                    rate = batch_acc[n] / ADAPT_BATCH
                    scales[n] *= np.exp(gain * (rate - TARGET_ACCEPT))
                    batch_acc[n] = 0
            if it == config.n_burnin - 1:
                accepts = {n: 0 for n in HYPER_NAMES}
            continue
        post = it - config.n_burnin
        if (post + 1) % config.thin == 0 and kept < config.n_keep:
            s_vec = state.to_vector()
            h_vec = hypers.to_vector()
            if not (np.all(np.isfinite(s_vec)) and np.all(np.isfinite(h_vec))):
                raise SamplerError(f"non-finite parameter at iteration {it} (chain {chain})")
            keep_s[kept] = s_vec
            keep_h[kept] = h_vec
            kept += 1
        if callback is not None:
            callback(it, state, hypers)
    if config.n_iter:
        lp = log_posterior(data, state, hypers)
        if not np.isfinite(lp):
            raise SamplerError(f"non-finite log posterior at end of chain {chain}: {hypers.violations()}")
    acceptance = {n: accepts[n] / max(config.n_iter, 1) for n in HYPER_NAMES}
    return ChainResult(chain, (int(config.rng_seed), int(chain)), keep_s, keep_h, acceptance,
                       {n: float(s) for n, s in scales.items()}, time.perf_counter() - t0)


def _run_chain_job(args):
    data, config, chain, fixed = args
    return run_chain(data, config, chain, fixed_hypers=fixed)


def run_chains(data: FitData, config: SamplerConfig, jobs: int = 1, first_chain: int = 0,
               fixed_hypers=None) -> PosteriorDraws:
    chains = list(range(first_chain, first_chain + config.n_chains))
    args = [(data, config, c, fixed_hypers) for c in chains]
    if jobs > 1 and len(chains) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_chain_job, args))
    else:
        results = [_run_chain_job(a) for a in args]
    proto = ParamState.zeros_for(data)
    return PosteriorDraws.from_chains(results, proto.shapes(), proto.names(), asdict(config))


# ----------------------------------------------------------------------------
# storage


def draws_dtype(state_names):
    names = list(state_names) + list(HYPER_NAMES)
    return np.dtype([(n, "<f8") for n in names])


def save_chain(path, state_draws, hyper_draws, state_names, fmt="npy"):
    """Write one chain's draws; returns the path written."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if fmt == "npy":
        arr = np.empty(state_draws.shape[0], dtype=draws_dtype(state_names))
        for k, n in enumerate(state_names):
            arr[n] = state_draws[:, k]
        for k, n in enumerate(HYPER_NAMES):
            arr[n] = hyper_draws[:, k]
        with open(tmp, "wb") as fh:
            np.save(fh, arr, allow_pickle=False)
    elif fmt == "csv":
        header = ",".join(list(state_names) + list(HYPER_NAMES))
        both = np.hstack([state_draws, hyper_draws])
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row in both:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
    else:
        raise ValueError(f"unknown draw format {fmt!r}")
    tmp.replace(path)
    return path


def load_chain(path):
    """Return ``(state_draws, hyper_draws, state_names)`` from a chain file."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False, max_header_size=1 << 20)
        names = list(arr.dtype.names)
    else:
        with open(path, encoding="utf-8") as fh:
            names = fh.readline().strip().split(",")
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        arr = None
    n_state = len(names) - len(HYPER_NAMES)
    if names[n_state:] != list(HYPER_NAMES):
        raise ValueError(f"{path} does not hold model draws")
    if arr is not None:
        both = np.stack([arr[n] for n in names], axis=-1)
    else:
        both = raw
    return both[:, :n_state], both[:, n_state:], names[:n_state]


def write_draws(out_dir, draws: PosteriorDraws, data: FitData, fmt="npy", extra=None, first_chain=0):
    """One file per chain plus a JSON sidecar with config, seeds, acceptance and R-hat."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "npy" if fmt == "npy" else "csv"
    files = []
    for c in range(draws.n_chains):
        p = out_dir / f"chain_{first_chain + c:03d}.{ext}"
        save_chain(p, draws.state[c], draws.hyper[c], draws.state_names, fmt)
        files.append(p.name)
    sidecar = {
        "config": draws.config,
        "seeds": draws.seeds,
        "acceptance": draws.acceptance,
        "rhat": draws.rhat() if draws.n_chains > 1 and draws.n_keep >= 4 else {},
        "state_shapes": {k: list(v) for k, v in draws.state_shapes.items()},
        "window": list(data.window),
        "hierarchy": {"J": data.hierarchy.J, "K": data.hierarchy.K, "L": data.hierarchy.L},
        "n_studies": data.n_studies,
        "files": files,
    }
    if extra:
        sidecar.update(extra)
    return sidecar


def read_draws(out_dir, sidecar=None) -> PosteriorDraws:
    out_dir = Path(out_dir)
    if sidecar is None:
        sidecar = json.loads((out_dir / "fit.json").read_text())
    files = sorted(list(out_dir.glob("chain_*.npy")) + list(out_dir.glob("chain_*.csv")))
    if not files:
        raise FileNotFoundError(f"no chain files in {out_dir}")
    states, hypers, names = [], [], None
    for f in files:
        s, h, nm = load_chain(f)
        states.append(s)
        hypers.append(h)
        names = nm
    n = min(s.shape[0] for s in states)
    # JSON key order is not the vector layout; restore the ParamState field order
    stored = sidecar["state_shapes"]
    shapes = {f.name: tuple(stored[f.name]) for f in fields(ParamState)}
    return PosteriorDraws(
        state_names=names,
        state_shapes=shapes,
        state=np.stack([s[:n] for s in states]),
        hyper=np.stack([h[:n] for h in hypers]),
        acceptance=sidecar.get("acceptance", []),
        seeds=sidecar.get("seeds", []),
        config=sidecar.get("config", {}),
    )
