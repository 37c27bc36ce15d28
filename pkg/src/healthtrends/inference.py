"""Posterior functionals: predictive grids, aggregates, trends and decomposition.

Everything here is a pure map or reduction over the draws axis (axis 0).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo_data import GeoHierarchy, PopulationTable, prediction_design
from .model import HYPER_NAMES, age_basis
from .util import atomic_write_text

COMPONENTS = ("Mean", "Lin. trend", "Nonlin. trend")
LEVELS = ("Country", "Subregion", "Region", "Globe")


class InferenceError(ValueError):
    pass


# ----------------------------------------------------------------------------
# draws -> parameter arrays


def state_arrays(draws, max_draws=None) -> dict:
    """Map parameter name -> array of shape ``(n_draws, *shape)`` over all chains."""
    flat = draws.flat_state()
    if max_draws is not None and flat.shape[0] > max_draws:
        idx = np.linspace(0, flat.shape[0] - 1, max_draws).round().astype(int)
        flat = flat[idx]
    out, pos = {}, 0
    for name, shp in draws.state_shapes.items():
        shp = tuple(shp)
        n = int(np.prod(shp)) if shp else 1
        out[name] = flat[:, pos:pos + n].reshape((flat.shape[0],) + shp)
        pos += n
    return out


def _hyper_column(draws, name, max_draws=None) -> np.ndarray:
    flat = draws.flat_hyper()
    if max_draws is not None and flat.shape[0] > max_draws:
        idx = np.linspace(0, flat.shape[0] - 1, max_draws).round().astype(int)
        flat = flat[idx]
    return flat[:, HYPER_NAMES.index(name)]


def _age_points(ages) -> tuple[np.ndarray, tuple]:
    """Midpoints and labels for age groups given as (lo, hi) pairs or single ages."""
    z, labels = [], []
    for a in ages:
        if np.ndim(a) == 0:
            z.append(float(a))
            labels.append(f"{float(a):g}")
        else:
            lo, hi = a
            if not lo < hi:
                raise InferenceError(f"age group {a} needs lo < hi")
            z.append(0.5 * (lo + hi))
            labels.append(f"{lo:g}-{hi:g}")
    if not z:
        raise InferenceError("at least one age is needed")
    return np.array(z), tuple(labels)


# ----------------------------------------------------------------------------
# prediction grid


@dataclass
class PredictionGrid:
    """Predicted mean levels, ``values[draw, country, year, age]``."""

    values: np.ndarray
    years: np.ndarray
    ages: tuple
    hierarchy: GeoHierarchy
    include_study_effect: bool = False
    setting: dict = field(default_factory=lambda: {
        "coverage": "WeightedNational", "nonnational": 0.0, "urbanization_difference": 0.0})

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]


def predict_grid(draws, hierarchy: GeoHierarchy, covariates, ages, include_study_effect=False, *,
                 window, seed=0, max_draws=None) -> PredictionGrid:
    """Posterior predictive mean for every country, year and age.

    Covariates are those of a weighted national study whose urbanization
    equals the country's, so the nonnational and urbanization-difference
    columns are zero. The study effect is zero unless
    ``include_study_effect``, in which case each draw gets a fresh
    ``N(0, nu_w)`` effect per country-year.
    """
    X = prediction_design(covariates, window)  # (J, T, p)
    if X.shape[0] != hierarchy.J:
        raise InferenceError(f"covariates cover {X.shape[0]} countries, hierarchy has {hierarchy.J}")
    p = state_arrays(draws, max_draws)
    T = X.shape[1]
    if p["u_g"].shape[1] != T:
        raise InferenceError(f"draws have T={p['u_g'].shape[1]} but the window has {T} years")
    z, labels = _age_points(ages)
    B = age_basis(z)  # (A, 5)
    sub, reg = hierarchy.subregion_of, hierarchy.region_of
    a = p["a_c"] + p["a_s"][:, sub] + p["a_r"][:, reg] + p["a_g"][:, None]
    b = p["b_c"] + p["b_s"][:, sub] + p["b_r"][:, reg] + p["b_g"][:, None]
    u = p["u_c"] + p["u_s"][:, sub] + p["u_r"][:, reg] + p["u_g"][:, None, :]
    years = np.arange(window[0], window[1] + 1)
    tc = years - 0.5 * (window[0] + window[1])
    mu = a[:, :, None] + b[:, :, None] * tc[None, None, :] + np.einsum("jtk,dk->djt", X, p["beta"]) + u
    if include_study_effect:
        nu_w = _hyper_column(draws, "nu_w", max_draws)
        rng = np.random.default_rng(seed)
        mu = mu + rng.standard_normal(mu.shape) * np.sqrt(nu_w)[:, None, None]
    g = 1.0 + p["phi"] @ B.T  # (D, A)
    shift = np.einsum("as,djs->dja", B, p["psi"][:, None, :] + p["c"])  # (D, J, A)
    values = mu[..., None] * g[:, None, None, :] + shift[:, :, None, :]
    if not np.all(np.isfinite(values)):
        raise InferenceError("non-finite predictions")
    return PredictionGrid(values, years, labels, hierarchy, bool(include_study_effect))


# ----------------------------------------------------------------------------
# aggregation and age standardization


@dataclass
class Aggregates:
    """Population-weighted means, ``levels[name][draw, unit, year, age]``."""

    levels: dict
    labels: dict
    years: np.ndarray
    ages: tuple


def _population_counts(population, J, T, A) -> np.ndarray:
    counts = population.counts if isinstance(population, PopulationTable) else np.asarray(population, float)
    if counts.shape != (J, T, A):
        raise InferenceError(f"population counts have shape {counts.shape}, expected {(J, T, A)}")
    if (counts < 0).any():
        raise InferenceError("population counts must be nonnegative")
    return counts


def weighted_group_mean(values, weights, groups, n_groups) -> np.ndarray:
    """Mean of ``values[..., j, t, a]`` over members of each group, weighted per (j, t, a).

    ``values`` is ``(D, J, T, A)``, ``weights`` ``(J, T, A)``; returns ``(D, G, T, A)``.
    """
    M = np.zeros((n_groups, weights.shape[0]))
    M[groups, np.arange(weights.shape[0])] = 1.0
    total = np.einsum("gj,jta->gta", M, weights)
    if (total <= 0).any():
        g = int(np.argwhere(total <= 0)[0][0])
        raise InferenceError(f"zero total population in aggregate {g}")
    num = np.einsum("gj,djta->dgta", M, values * weights[None])
    return num / total[None]


def aggregate(grid: PredictionGrid, population) -> Aggregates:
    """Population-weighted subregion, region and global means of a country grid."""
    h = grid.hierarchy
    D, J, T, A = grid.values.shape
    w = _population_counts(population, J, T, A)
    levels = {
        "subregion": weighted_group_mean(grid.values, w, h.subregion_of, h.K),
        "region": weighted_group_mean(grid.values, w, h.region_of, h.L),
        "globe": weighted_group_mean(grid.values, w, np.zeros(J, dtype=int), 1),
    }
    labels = {"subregion": h.subregion_labels, "region": h.region_labels, "globe": ("globe",)}
    return Aggregates(levels, labels, grid.years, grid.ages)


def age_standardize(values, weights) -> np.ndarray:
    """Weighted sum over the trailing age axis with standard weights summing to 1."""
    values = getattr(values, "values", values)
    w = np.asarray(weights, dtype=float)
    values = np.asarray(values, dtype=float)
    if w.ndim != 1 or values.shape[-1] != w.size:
        raise InferenceError(f"{w.size} standard weights for {values.shape[-1]} age groups")
    if abs(w.sum() - 1.0) > 1e-12 or (w < 0).any():
        raise InferenceError("standard weights must be nonnegative and sum to 1")
    return values @ w


# ----------------------------------------------------------------------------
# trends and summaries


@dataclass
class TrendSummary:
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    level: float = 0.95


def summarize(values, axis=0, level=0.95) -> TrendSummary:
    """Posterior mean and equal-tailed interval over the draws axis."""
    x = np.asarray(getattr(values, "values", values), dtype=float)
    if x.shape[axis] < 2:
        raise InferenceError("summaries need at least 2 draws")
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(x, [alpha, 1.0 - alpha], axis=axis)
    mean = x.mean(axis=axis)
    # guard against roundoff when all draws are equal
    return TrendSummary(np.clip(mean, lo, hi), lo, hi, level)


@dataclass
class SlopeSummary:
    slopes: np.ndarray
    mean: float
    lo: float
    hi: float


def linearize_trend(series, years=None, level=0.95):
    """OLS slope of each draw's series on calendar year.

    ``series`` is ``(..., T)``; returns a ``SlopeSummary`` for a 1-d or
    2-d input (draws x years) and the raw slope array otherwise.
    """
    y = np.asarray(series, dtype=float)
    T = y.shape[-1]
    if T < 2:
        raise InferenceError("linearization needs at least 2 years")
    t = np.arange(T, dtype=float) if years is None else np.asarray(years, dtype=float)
    tc = t - t.mean()
    ss = tc @ tc
    if ss == 0:
        raise InferenceError("years must not all be equal")
    slopes = (y - y.mean(axis=-1, keepdims=True)) @ tc / ss
    if y.ndim > 2:
        return slopes
    slopes = np.atleast_1d(slopes)
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(slopes, [alpha, 1.0 - alpha])
    return SlopeSummary(slopes, float(slopes.mean()), float(lo), float(hi))


# ----------------------------------------------------------------------------
# variance decomposition


def _level_parts(C, hierarchy: GeoHierarchy):
    """Split a ``(J, T)`` component into country, subregion, region, global parts."""
    sub, reg = hierarchy.subregion_of, hierarchy.region_of

    def group_mean(groups, n):
        counts = np.bincount(groups, minlength=n).astype(float)
        sums = np.zeros((n, C.shape[1]))
        np.add.at(sums, groups, C)
        return sums / counts[:, None]

    glob = C.mean(axis=0, keepdims=True)
    r = group_mean(reg, hierarchy.L)[reg]
    s = group_mean(sub, hierarchy.K)[sub]
    return C - s, s - r, r - glob, np.broadcast_to(glob, C.shape)


def decompose_series(Y, hierarchy: GeoHierarchy):
    """Return ``parts[component][level]`` as ``(J, T)`` arrays for one draw.

    Components are the country mean, the OLS-linear trend about it and the
    nonlinear remainder; level parts use country-time points as units.
    """
    Y = np.asarray(Y, dtype=float)
    J, T = Y.shape
    tc = np.arange(T) - (T - 1) / 2.0
    m = np.broadcast_to(Y.mean(axis=1, keepdims=True), Y.shape)
    lin = np.outer((Y - m) @ tc / (tc @ tc), tc)
    non = Y - m - lin
    return [_level_parts(C, hierarchy) for C in (np.asarray(m), lin, non)]


def decomposition_shares(Y, hierarchy: GeoHierarchy) -> np.ndarray:
    """``(3, 4)`` percent shares of the variance across country-time units.

    The Mean x Globe cell is NaN: the global mean is one number and carries
    no variance across units.
    """
    parts = decompose_series(Y, hierarchy)
    Y = np.asarray(Y, dtype=float)
    total = float(((Y - Y.mean()) ** 2).sum())
    if not total > 0:
        raise InferenceError("total variance across country-time units is zero")
    out = np.empty((3, 4))
    for i, comp in enumerate(parts):
        for k, part in enumerate(comp):
            out[i, k] = 100.0 * float((part**2).sum()) / total
    out[0, 3] = np.nan
    return out


@dataclass
class DecompositionTable:
    """Per-draw shares plus their row and column totals.

    ``cells[draw, row, col]`` has rows Mean, Lin. trend, Nonlin. trend,
    Total and columns Country, Subregion, Region, Globe, Total.
    """

    cells: np.ndarray
    level: float = 0.95

    rows = COMPONENTS + ("Total",)
    cols = LEVELS + ("Total",)

    def summary(self):
        alpha = 0.5 * (1.0 - self.level)
        with np.errstate(invalid="ignore"):
            mean = self.cells.mean(axis=0)
            lo, hi = np.quantile(self.cells, [alpha, 1.0 - alpha], axis=0)
        return mean, lo, hi

    def text_rows(self, digits=1) -> list[list[str]]:
        """Table rows as strings ``mean (lo, hi)``, blank where undefined."""
        mean, lo, hi = self.summary()
        out = [[""] + list(self.cols)]
        for r, name in enumerate(self.rows):
            row = [name]
            for c in range(len(self.cols)):
                if np.isnan(mean[r, c]):
                    row.append("")
                else:
                    row.append(f"{mean[r, c]:.{digits}f} ({lo[r, c]:.{digits}f}, {hi[r, c]:.{digits}f})")
            out.append(row)
        return out

    def text(self, digits=1) -> str:
        rows = self.text_rows(digits)
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def variance_decomposition(values, hierarchy: GeoHierarchy, level=0.95) -> DecompositionTable:
    """Table of variance shares of country-year predictions at one age.

    ``values`` is ``(draws, J, T)``, for example ``grid.values[..., a]`` at
    the reference age.
    """
    V = np.asarray(getattr(values, "values", values), dtype=float)
    if V.ndim == 4:
        if V.shape[-1] != 1:
            raise InferenceError("pass a grid with a single (reference) age")
        V = V[..., 0]
    if V.ndim != 3 or V.shape[1] != hierarchy.J:
        raise InferenceError(f"expected (draws, {hierarchy.J}, T) values, got {V.shape}")
    cells = np.full((V.shape[0], 4, 5), np.nan)
    for d in range(V.shape[0]):
        s = decomposition_shares(V[d], hierarchy)
        cells[d, :3, :4] = s
        cells[d, :3, 4] = np.nansum(s, axis=1)
        cells[d, 3, :4] = np.nansum(s, axis=0)
        cells[d, 3, 4] = np.nansum(s)
    return DecompositionTable(cells, level)


# ----------------------------------------------------------------------------
# output


def trend_rows(grid: PredictionGrid, aggregates: Aggregates | None = None, standard_weights=None,
               level=0.95) -> list[dict]:
    """Tidy rows (geography, year, age_group, mean, lo95, hi95).

    Age-standardized series use the age_group label ``standardized``.
    """
    blocks = [("country", grid.hierarchy.country_labels, grid.values)]
    if aggregates is not None:
        for name in ("subregion", "region", "globe"):
            blocks.append((name, aggregates.labels[name], aggregates.levels[name]))
    rows = []
    for kind, labels, vals in blocks:
        series = [(a, vals[..., a]) for a in range(vals.shape[-1])]
        if standard_weights is not None:
            series.append(("standardized", age_standardize(vals, standard_weights)))
        for a, v in series:
            s = summarize(v, level=level)
            age_label = a if isinstance(a, str) else grid.ages[a]
            for g, lab in enumerate(labels):
                for t, year in enumerate(grid.years):
                    rows.append({
                        "geography": f"{kind}:{lab}", "year": int(year), "age_group": age_label,
                        "mean": float(s.mean[g, t]), "lo95": float(s.lo[g, t]), "hi95": float(s.hi[g, t]),
                    })
    return rows


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def write_trends_csv(path, rows):
    header = ["geography", "year", "age_group", "mean", "lo95", "hi95"]
    atomic_write_text(path, _csv_text(header, ([r[k] for k in header] for r in rows)))


def write_slopes_csv(path, slopes: dict):
    """``slopes`` maps geography -> SlopeSummary."""
    rows = ([g, s.mean, s.lo, s.hi] for g, s in slopes.items())
    atomic_write_text(path, _csv_text(["geography", "slope_mean", "slope_lo95", "slope_hi95"], rows))


def write_decomposition_csv(path, table: DecompositionTable, digits=1):
    rows = table.text_rows(digits)
    atomic_write_text(path, _csv_text(rows[0], rows[1:]))


def plot_trends_svg(path, years, summaries: dict, ylabel="mean level"):
    """Line plot of posterior means with shaded intervals, one line per series."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, s in summaries.items():
        ax.plot(years, s.mean, label=name)
        ax.fill_between(years, s.lo, s.hi, alpha=0.2)
    ax.set_xlabel("year")
    ax.set_ylabel(ylabel)
    if len(summaries) <= 12:
        ax.legend(fontsize="small")
    fig.tight_layout()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    tmp.replace(path)
