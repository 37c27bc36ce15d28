"""Ingestion and validation of the geographic hierarchy, study summaries,
covariates and population tables, plus covariate smoothing and design rows."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import atomic_write_text

DESIGN_COLUMNS = (
    "income",
    "urbanization",
    "income_x_time",
    "urbanization_x_time",
    "food_pc1",
    "food_pc2",
    "food_pc3",
    "food_pc4",
    "nonnational",
    "nonnational_x_time",
    "urbanization_diff",
)
N_DESIGN = len(DESIGN_COLUMNS)
COVARIATE_NAMES = ("income", "urbanization", "food_pc1", "food_pc2", "food_pc3", "food_pc4")
SMOOTH_WIDTH = 10

HIERARCHY_HEADER = ["country_id", "subregion_id", "region_id"]
STUDIES_HEADER = [
    "study_id", "country_id", "year", "coverage", "study_urbanization",
    "age_lo", "age_hi", "mean", "sd", "n",
]
COVARIATES_HEADER = ["country_id", "year", *COVARIATE_NAMES]
POPULATION_HEADER = ["country_id", "year", "age_lo", "age_hi", "pop"]
STANDARD_POP_HEADER = ["age_lo", "age_hi", "weight"]


class IngestError(ValueError):
    """Malformed or inconsistent input table."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DuplicateIdError(IngestError):
    pass


class SampleSizeError(IngestError):
    pass


class Coverage(enum.IntEnum):
    """Study representativeness class; the value indexes nu and tau2."""

    WeightedNational = 0
    UnweightedNational = 1
    Subnational = 2
    Community = 3

    @classmethod
    def parse(cls, text: str) -> "Coverage":
        key = text.strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        aliases = {
            "weightednational": cls.WeightedNational,
            "national_weighted": cls.WeightedNational,
            "w": cls.WeightedNational,
            "unweightednational": cls.UnweightedNational,
            "u": cls.UnweightedNational,
            "subnational": cls.Subnational,
            "s": cls.Subnational,
            "community": cls.Community,
            "c": cls.Community,
        }
        if key not in aliases:
            raise ValueError(f"unknown coverage class {text!r}")
        return aliases[key]

    @property
    def label(self) -> str:
        return self.name

    @property
    def is_national(self) -> bool:
        return self in (Coverage.WeightedNational, Coverage.UnweightedNational)


@dataclass(frozen=True)
class GeoHierarchy:
    """Country -> subregion -> region maps with dense 0-based indices.

    ``country_labels`` etc. keep the ids as they appeared in the input file.
    """

    subregion_of: np.ndarray  # (J,)
    region_of_subregion: np.ndarray  # (K,)
    country_labels: tuple = ()
    subregion_labels: tuple = ()
    region_labels: tuple = ()

    def __post_init__(self):
        sub = np.asarray(self.subregion_of, dtype=np.int64)
        reg = np.asarray(self.region_of_subregion, dtype=np.int64)
        object.__setattr__(self, "subregion_of", sub)
        object.__setattr__(self, "region_of_subregion", reg)
        if sub.size == 0:
            raise IngestError("hierarchy has no countries")
        if sub.min() < 0 or reg.size == 0 or reg.min() < 0:
            raise IngestError("hierarchy ids must be nonnegative")
        if set(np.unique(sub)) != set(range(reg.size)):
            raise IngestError("every subregion needs at least one country")
        if set(np.unique(reg)) != set(range(reg.max() + 1)):
            raise IngestError("every region needs at least one subregion")
        if not self.country_labels:
            object.__setattr__(self, "country_labels", tuple(str(j) for j in range(sub.size)))
        if not self.subregion_labels:
            object.__setattr__(self, "subregion_labels", tuple(str(k) for k in range(reg.size)))
        if not self.region_labels:
            object.__setattr__(
                self, "region_labels", tuple(str(r) for r in range(int(reg.max()) + 1))
            )

    @property
    def J(self) -> int:
        return int(self.subregion_of.size)

    @property
    def K(self) -> int:
        return int(self.region_of_subregion.size)

    @property
    def L(self) -> int:
        return int(self.region_of_subregion.max()) + 1

    @property
    def region_of(self) -> np.ndarray:
        """Region index of every country."""
        return self.region_of_subregion[self.subregion_of]

    def country_index(self, label) -> int:
        try:
            return self.country_labels.index(str(label))
        except ValueError:
            raise KeyError(label) from None


@dataclass(frozen=True)
class AgeRow:
    age_lo: float
    age_hi: float
    y: float
    s: float
    n: int

    @property
    def z(self) -> float:
        return 0.5 * (self.age_lo + self.age_hi)


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    country: int
    year: int
    coverage: Coverage
    study_urbanization: float
    rows: tuple = field(default_factory=tuple)


@dataclass(frozen=True)
class CovariateTable:
    """Raw and smoothed country-year covariates.

    Arrays are indexed ``[country, year - first_year, covariate]`` in the
    order of ``COVARIATE_NAMES``.
    """

    first_year: int
    raw: np.ndarray
    smoothed: np.ndarray

    @property
    def last_year(self) -> int:
        return self.first_year + self.raw.shape[1] - 1

    def value(self, country: int, year: int, smoothed: bool = True) -> np.ndarray:
        idx = year - self.first_year
        if idx < 0 or idx >= self.raw.shape[1]:
            raise KeyError((country, year))
        arr = self.smoothed if smoothed else self.raw
        out = arr[country, idx]
        if np.isnan(out).any():
            raise KeyError((country, year))
        return out

    @classmethod
    def from_raw(cls, first_year: int, raw: np.ndarray, width: int = SMOOTH_WIDTH) -> "CovariateTable":
        raw = np.asarray(raw, dtype=float)
        smoothed = np.empty_like(raw)
        for j in range(raw.shape[0]):
            for c in range(raw.shape[2]):
                smoothed[j, :, c] = smooth_covariate(raw[j, :, c], width)
        return cls(first_year, raw, smoothed)


@dataclass(frozen=True)
class PopulationTable:
    """Country-year-age population counts and standard age weights.

    ``counts`` is ``[country, year - first_year, age_group]``.
    """

    first_year: int
    age_groups: tuple  # ((lo, hi), ...)
    counts: np.ndarray
    standard_weights: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        w = np.asarray(self.standard_weights, dtype=float)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "standard_weights", w)
        if (counts < 0).any():
            raise IngestError("population counts must be nonnegative")
        if w.shape != (len(self.age_groups),):
            raise IngestError("standard weights do not match the age groups")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise IngestError(f"standard weights must be nonnegative and sum to 1 (got {w.sum()!r})")

    def slice_years(self, t_min: int, t_max: int) -> np.ndarray:
        lo = t_min - self.first_year
        hi = t_max - self.first_year + 1
        if lo < 0 or hi > self.counts.shape[1]:
            raise IngestError(f"population table does not cover {t_min}-{t_max}")
        return self.counts[:, lo:hi]


# ----------------------------------------------------------------------------
# smoothing and design rows


def triangular_weights(width: int = SMOOTH_WIDTH) -> np.ndarray:
    """w_d = (width - d) / sum, for lags d = 0 .. width-1."""
    w = np.arange(width, 0, -1, dtype=float)
    return w / w.sum()


def smooth_covariate(series, width: int = SMOOTH_WIDTH) -> np.ndarray:
    """Triangularly-weighted trailing moving average.

    ``out[t] = sum_d w_d * series[t - d]`` over lags ``d < width`` with
    weights decreasing linearly from the current year. Near the start of
    the series only the available lags are used and their weights are
    renormalized to sum to one.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("smooth_covariate needs a non-empty 1-d series")
    w = triangular_weights(width)
    out = np.empty_like(x)
    for t in range(x.size):
        d = min(width, t + 1)
        wd = w[:d]
        out[t] = np.dot(wd, x[t::-1][:d]) / wd.sum()
    return out


def design_row(study: StudyRecord, covariates: CovariateTable, t_center: float) -> np.ndarray:
    cov = covariates.value(study.country, study.year)
    tc = study.year - t_center
    nonnat = 0.0 if study.coverage.is_national else 1.0
    income, urban = cov[0], cov[1]
    return np.array([
        income,
        urban,
        income * tc,
        urban * tc,
        cov[2], cov[3], cov[4], cov[5],
        nonnat,
        nonnat * tc,
        study.study_urbanization - urban,
    ])


def build_design_rows(studies, covariates: CovariateTable, window) -> np.ndarray:
    """One design row per study, columns in ``DESIGN_COLUMNS`` order."""
    t_center = 0.5 * (window[0] + window[1])
    rows = np.empty((len(studies), N_DESIGN))
    for i, st in enumerate(studies):
        try:
            rows[i] = design_row(st, covariates, t_center)
        except KeyError:
            raise IngestError(
                f"missing covariates for country {st.country} in {st.year} (study {st.study_id})"
            ) from None
    return rows


def prediction_design(covariates: CovariateTable, window) -> np.ndarray:
    """Design rows for a weighted national study matching country urbanization.

    Returns ``[country, year, column]`` over the window.
    """
    t_min, t_max = window
    t_center = 0.5 * (t_min + t_max)
    years = np.arange(t_min, t_max + 1)
    lo = t_min - covariates.first_year
    if lo < 0 or t_max > covariates.last_year:
        raise IngestError(f"covariates do not cover {t_min}-{t_max}")
    sm = covariates.smoothed[:, lo:lo + years.size]
    if np.isnan(sm).any():
        raise IngestError("missing covariate cells inside the prediction window")
    tc = (years - t_center)[None, :]
    J = sm.shape[0]
    X = np.zeros((J, years.size, N_DESIGN))
    X[..., 0] = sm[..., 0]
    X[..., 1] = sm[..., 1]
    X[..., 2] = sm[..., 0] * tc
    X[..., 3] = sm[..., 1] * tc
    X[..., 4:8] = sm[..., 2:6]
    return X


# ----------------------------------------------------------------------------
# CSV loaders


def _read_csv(path, header):
    path = Path(path)
    if not path.exists():
        raise IngestError("file not found", path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise IngestError("empty file", path) from None
        got = [h.strip() for h in got]
        if got != header:
            raise IngestError(f"header {got} does not match expected {header}", path, 1)
        rows = [(lineno, r) for lineno, r in enumerate(reader, start=2) if any(c.strip() for c in r)]
    if not rows:
        raise IngestError("no data rows", path)
    for lineno, r in rows:
        if len(r) != len(header):
            raise IngestError(f"expected {len(header)} fields, got {len(r)}", path, lineno)
    return path, rows


def _num(text, kind, path, line, name):
    try:
        return kind(text)
    except ValueError:
        raise IngestError(f"bad {name} value {text!r}", path, line) from None


def load_hierarchy(path) -> GeoHierarchy:
    path, rows = _read_csv(path, HIERARCHY_HEADER)
    countries, subs, regs = [], [], []
    region_of_sub = {}
    for lineno, (c, s, r) in rows:
        c, s, r = c.strip(), s.strip(), r.strip()
        if not (c and s and r):
            raise IngestError("empty id", path, lineno)
        if c in countries:
            raise DuplicateIdError(f"country {c!r} listed twice", path, lineno)
        if s in region_of_sub and region_of_sub[s] != r:
            raise IngestError(f"subregion {s!r} mapped to two regions", path, lineno)
        region_of_sub[s] = r
        countries.append(c)
        subs.append(s)
        regs.append(r)
    sub_labels = tuple(dict.fromkeys(subs))
    reg_labels = tuple(dict.fromkeys(regs))
    sub_index = {s: k for k, s in enumerate(sub_labels)}
    reg_index = {r: l for l, r in enumerate(reg_labels)}
    return GeoHierarchy(
        subregion_of=np.array([sub_index[s] for s in subs]),
        region_of_subregion=np.array([reg_index[region_of_sub[s]] for s in sub_labels]),
        country_labels=tuple(countries),
        subregion_labels=sub_labels,
        region_labels=reg_labels,
    )


def load_studies(path, hierarchy: GeoHierarchy, window) -> list[StudyRecord]:
    t_min, t_max = window
    path, rows = _read_csv(path, STUDIES_HEADER)
    grouped: dict[str, dict] = {}
    for lineno, r in rows:
        sid, cid, year, cov, surb, lo, hi, mean, sd, n = (x.strip() for x in r)
        try:
            j = hierarchy.country_index(cid)
        except KeyError:
            raise IngestError(f"unknown country {cid!r}", path, lineno) from None
        year = _num(year, int, path, lineno, "year")
        if not t_min <= year <= t_max:
            raise IngestError(f"year {year} outside window {t_min}-{t_max}", path, lineno)
        try:
            coverage = Coverage.parse(cov)
        except ValueError as exc:
            raise IngestError(str(exc), path, lineno) from None
        surb = _num(surb, float, path, lineno, "study_urbanization")
        if not 0.0 <= surb <= 1.0:
            raise IngestError("study_urbanization must lie in [0, 1]", path, lineno)
        lo = _num(lo, float, path, lineno, "age_lo")
        hi = _num(hi, float, path, lineno, "age_hi")
        if not lo < hi:
            raise IngestError("age_lo must be below age_hi", path, lineno)
        if lo < 0:
            raise IngestError("negative age", path, lineno)
        sd = _num(sd, float, path, lineno, "sd")
        if not sd > 0:
            raise IngestError("sd must be positive", path, lineno)
        nval = _num(n, float, path, lineno, "n")
        if nval < 1 or nval != int(nval):
            raise SampleSizeError(f"sample size must be a positive integer, got {n!r}", path, lineno)
        mean = _num(mean, float, path, lineno, "mean")
        meta = (j, year, coverage, surb)
        entry = grouped.setdefault(sid, {"meta": meta, "rows": [], "line": lineno})
        if entry["meta"] != meta:
            raise IngestError(f"study {sid!r} has inconsistent metadata across rows", path, lineno)
        entry["rows"].append(AgeRow(lo, hi, mean, sd, int(nval)))
    studies = []
    for sid, entry in grouped.items():
        j, year, coverage, surb = entry["meta"]
        studies.append(StudyRecord(sid, j, year, coverage, surb, tuple(entry["rows"])))
    return studies


def load_covariates(path, hierarchy: GeoHierarchy, years=None, width: int = SMOOTH_WIDTH) -> CovariateTable:
    """Load raw covariates and smooth them per country.

    Each country's series must be contiguous in years; ``years`` (first,
    last), when given, is the range that must be fully covered.
    """
    path, rows = _read_csv(path, COVARIATES_HEADER)
    cells = {}
    for lineno, r in rows:
        cid = r[0].strip()
        try:
            j = hierarchy.country_index(cid)
        except KeyError:
            raise IngestError(f"unknown country {cid!r}", path, lineno) from None
        year = _num(r[1], int, path, lineno, "year")
        vals = [_num(v, float, path, lineno, COVARIATE_NAMES[c]) for c, v in enumerate(r[2:])]
        if not 0.0 <= vals[1] <= 1.0:
            raise IngestError("urbanization must lie in [0, 1]", path, lineno)
        if (j, year) in cells:
            raise DuplicateIdError(f"duplicate covariate cell ({cid}, {year})", path, lineno)
        cells[(j, year)] = vals
    all_years = [y for _, y in cells]
    first, last = min(all_years), max(all_years)
    if years is not None:
        first = min(first, years[0])
        last = max(last, years[1])
    raw = np.full((hierarchy.J, last - first + 1, len(COVARIATE_NAMES)), np.nan)
    for (j, year), vals in cells.items():
        raw[j, year - first] = vals
    smoothed = np.full_like(raw, np.nan)
    for j in range(hierarchy.J):
        have = ~np.isnan(raw[j, :, 0])
        if not have.any():
            continue
        idx = np.flatnonzero(have)
        if idx[-1] - idx[0] + 1 != idx.size:
            raise IngestError(f"covariate series for country {hierarchy.country_labels[j]!r} has gaps", path)
        seg = raw[j, idx[0]:idx[-1] + 1]
        for c in range(seg.shape[1]):
            smoothed[j, idx[0]:idx[-1] + 1, c] = smooth_covariate(seg[:, c], width)
    if years is not None:
        lo, hi = years[0] - first, years[1] - first + 1
        if np.isnan(smoothed[:, lo:hi]).any():
            j, t = np.argwhere(np.isnan(smoothed[:, lo:hi, 0]))[0]
            raise IngestError(
                f"missing covariates for country {hierarchy.country_labels[j]!r} in {years[0] + t}", path
            )
    return CovariateTable(first, raw, smoothed)


def load_population(path, standard_path, hierarchy: GeoHierarchy, window) -> PopulationTable:
    t_min, t_max = window
    spath, srows = _read_csv(standard_path, STANDARD_POP_HEADER)
    groups, weights = [], []
    for lineno, (lo, hi, w) in srows:
        groups.append((_num(lo, float, spath, lineno, "age_lo"), _num(hi, float, spath, lineno, "age_hi")))
        weights.append(_num(w, float, spath, lineno, "weight"))
    group_index = {g: a for a, g in enumerate(groups)}
    if len(group_index) != len(groups):
        raise DuplicateIdError("duplicate age group in standard population", spath)
    path, rows = _read_csv(path, POPULATION_HEADER)
    counts = np.full((hierarchy.J, t_max - t_min + 1, len(groups)), np.nan)
    for lineno, (cid, year, lo, hi, pop) in rows:
        try:
            j = hierarchy.country_index(cid.strip())
        except KeyError:
            raise IngestError(f"unknown country {cid!r}", path, lineno) from None
        year = _num(year, int, path, lineno, "year")
        if not t_min <= year <= t_max:
            continue
        g = (_num(lo, float, path, lineno, "age_lo"), _num(hi, float, path, lineno, "age_hi"))
        if g not in group_index:
            raise IngestError(f"age group {g} not in standard population", path, lineno)
        pop = _num(pop, float, path, lineno, "pop")
        if pop < 0:
            raise IngestError("negative population", path, lineno)
        counts[j, year - t_min, group_index[g]] = pop
    if np.isnan(counts).any():
        j, t, a = np.argwhere(np.isnan(counts))[0]
        raise IngestError(
            f"missing population for country {hierarchy.country_labels[j]!r}, {t_min + t}, ages {groups[a]}",
            path,
        )
    return PopulationTable(t_min, tuple(groups), counts, np.array(weights))


# ----------------------------------------------------------------------------
# CSV writers (fixtures, round trips)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def write_hierarchy(path, hierarchy: GeoHierarchy):
    rows = []
    for j in range(hierarchy.J):
        k = hierarchy.subregion_of[j]
        rows.append([
            hierarchy.country_labels[j],
            hierarchy.subregion_labels[k],
            hierarchy.region_labels[hierarchy.region_of_subregion[k]],
        ])
    _write_csv(path, HIERARCHY_HEADER, rows)


def write_studies(path, studies, hierarchy: GeoHierarchy):
    rows = [
        [
            st.study_id, hierarchy.country_labels[st.country], st.year, st.coverage.label,
            repr(float(st.study_urbanization)), repr(float(row.age_lo)), repr(float(row.age_hi)),
            repr(float(row.y)), repr(float(row.s)), int(row.n),
        ]
        for st in studies
        for row in st.rows
    ]
    _write_csv(path, STUDIES_HEADER, rows)


def write_covariates(path, covariates: CovariateTable, hierarchy: GeoHierarchy):
    rows = []
    for j in range(hierarchy.J):
        for t in range(covariates.raw.shape[1]):
            vals = covariates.raw[j, t]
            if not np.isnan(vals).any():
                rows.append([hierarchy.country_labels[j], covariates.first_year + t, *(repr(float(v)) for v in vals)])
    _write_csv(path, COVARIATES_HEADER, rows)


def write_population(path, standard_path, population: PopulationTable, hierarchy: GeoHierarchy):
    _write_csv(standard_path, STANDARD_POP_HEADER, [
        [repr(float(lo)), repr(float(hi)), repr(float(wt))]
        for (lo, hi), wt in zip(population.age_groups, population.standard_weights)
    ])
    rows = [
        [hierarchy.country_labels[j], population.first_year + t, repr(float(lo)), repr(float(hi)),
         repr(float(population.counts[j, t, a]))]
        for j in range(hierarchy.J)
        for t in range(population.counts.shape[1])
        for a, (lo, hi) in enumerate(population.age_groups)
    ]
    _write_csv(path, POPULATION_HEADER, rows)
