import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from healthtrends.geo_data import (
    N_DESIGN,
    AgeRow,
    Coverage,
    CovariateTable,
    DuplicateIdError,
    GeoHierarchy,
    IngestError,
    SampleSizeError,
    StudyRecord,
    build_design_rows,
    load_covariates,
    load_hierarchy,
    load_population,
    load_studies,
    prediction_design,
    smooth_covariate,
    triangular_weights,
)

STUDY_HEADER = "study_id,country_id,year,coverage,study_urbanization,age_lo,age_hi,mean,sd,n\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


@pytest.fixture
def small_hierarchy(tmp_path):
    text = "country_id,subregion_id,region_id\nA,s1,r1\nB,s1,r1\nC,s2,r1\nD,s2,r1\n"
    return load_hierarchy(write(tmp_path, "hierarchy.csv", text))


# ----------------------------------------------------------------------------
# hierarchy


def test_hierarchy_counts(small_hierarchy):
    h = small_hierarchy
    assert (h.J, h.K, h.L) == (4, 2, 1)
    assert h.country_labels == ("A", "B", "C", "D")


def test_hierarchy_duplicate_country(tmp_path):
    text = "country_id,subregion_id,region_id\nA,s1,r1\nA,s1,r1\n"
    with pytest.raises(DuplicateIdError) as exc:
        load_hierarchy(write(tmp_path, "h.csv", text))
    assert exc.value.line == 3


def test_hierarchy_empty_and_bad_header(tmp_path):
    with pytest.raises(IngestError, match="empty file"):
        load_hierarchy(write(tmp_path, "h.csv", ""))
    with pytest.raises(IngestError, match="header"):
        load_hierarchy(write(tmp_path, "h2.csv", "country,sub,region\nA,s,r\n"))


def test_hierarchy_subregion_in_two_regions(tmp_path):
    text = "country_id,subregion_id,region_id\nA,s1,r1\nB,s1,r2\n"
    with pytest.raises(IngestError, match="two regions"):
        load_hierarchy(write(tmp_path, "h.csv", text))


def test_hierarchy_with_large_shape(tmp_path):
    # 199 countries in 21 subregions in 7 regions
    lines = ["country_id,subregion_id,region_id"]
    for j in range(199):
        k = j * 21 // 199
        lines.append(f"c{j},s{k},r{k * 7 // 21}")
    h = load_hierarchy(write(tmp_path, "h.csv", "\n".join(lines) + "\n"))
    assert (h.J, h.K, h.L) == (199, 21, 7)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30))
def test_hierarchy_maps_compose(sub_raw):
    sub_labels = sorted(set(sub_raw))
    sub = np.array([sub_labels.index(s) for s in sub_raw])
    reg_of_sub = np.array([k % 2 for k in range(len(sub_labels))])
    if len(set(reg_of_sub)) != reg_of_sub.max() + 1:
        reg_of_sub = np.zeros(len(sub_labels), dtype=int)
    h = GeoHierarchy(sub, reg_of_sub)
    for j in range(h.J):
        assert h.region_of[j] == h.region_of_subregion[h.subregion_of[j]]


# ----------------------------------------------------------------------------
# studies


def test_study_midpoint_and_class(tmp_path, small_hierarchy):
    text = STUDY_HEADER + "st1,A,2000,community,0.4,35,44,128.5,15,100\n"
    (s,) = load_studies(write(tmp_path, "s.csv", text), small_hierarchy, (1999, 2008))
    assert s.rows[0].z == 39.5
    assert s.coverage is Coverage.Community
    assert int(s.coverage) == 3  # indexes nu_c and tau2_c


def test_study_zero_sample_size(tmp_path, small_hierarchy):
    text = STUDY_HEADER + "st1,A,2000,community,0.4,35,44,128.5,15,0\n"
    with pytest.raises(SampleSizeError):
        load_studies(write(tmp_path, "s.csv", text), small_hierarchy, (1999, 2008))


@pytest.mark.parametrize(
    "row, message",
    [
        ("st1,Z,2000,community,0.4,35,44,128,15,10", "unknown country"),
        ("st1,A,1990,community,0.4,35,44,128,15,10", "outside window"),
        ("st1,A,2000,community,0.4,35,44,128,0,10", "sd must be positive"),
        ("st1,A,2000,martian,0.4,35,44,128,15,10", "coverage"),
    ],
)
def test_study_validation_errors(tmp_path, small_hierarchy, row, message):
    with pytest.raises(IngestError, match=message) as exc:
        load_studies(write(tmp_path, "s.csv", STUDY_HEADER + row + "\n"), small_hierarchy, (1999, 2008))
    assert exc.value.line == 2


def test_missing_file_reports_path(tmp_path, small_hierarchy):
    with pytest.raises(IngestError, match="not found"):
        load_covariates(tmp_path / "nope.csv", small_hierarchy)


# ----------------------------------------------------------------------------
# smoothing


def test_triangular_weights():
    w = triangular_weights()
    assert w[0] == pytest.approx(10 / 55) and w[9] == pytest.approx(1 / 55)
    assert np.all(np.diff(w) < 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)


def test_smooth_constant():
    assert np.allclose(smooth_covariate(np.full(20, 3.7)), 3.7, atol=1e-14)


def test_smooth_linear_ramp_lags_by_three():
    t = np.arange(30, dtype=float)
    out = smooth_covariate(t)
    # oracle: direct weighted sum over d = 0..9
    oracle = np.array([sum((10 - d) / 55 * (k - d) for d in range(10)) for k in range(9, 30)])
    assert np.allclose(out[9:], oracle, atol=1e-12)
    assert np.allclose(out[9:], t[9:] - 3.0, atol=1e-12)


def test_smooth_start_edge():
    x = np.array([5.0, 7.0, 1.0])
    out = smooth_covariate(x)
    assert out[0] == 5.0
    assert out[1] == pytest.approx((10 * 7 + 9 * 5) / 19)


@settings(max_examples=50)
@given(
    arrays(float, 15, elements=st.floats(-100, 100)),
    arrays(float, 15, elements=st.floats(-100, 100)),
    st.floats(-10, 10),
)
def test_smoothing_is_linear(a, b, alpha):
    lhs = smooth_covariate(alpha * a + b)
    rhs = alpha * smooth_covariate(a) + smooth_covariate(b)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_smooth_empty():
    with pytest.raises(ValueError):
        smooth_covariate([])


# ----------------------------------------------------------------------------
# design rows


def covariate_table(J=1, first=1990, n=20, rng=None):
    rng = rng or np.random.default_rng(0)
    raw = rng.normal(size=(J, n, 6))
    raw[..., 1] = rng.uniform(0.2, 0.8, size=(J, n))
    return CovariateTable.from_raw(first, raw)


def study(year, coverage=Coverage.WeightedNational, urb=None, cov=None):
    urb = cov.value(0, year)[1] if urb is None else urb
    return StudyRecord("x", 0, year, coverage, urb, (AgeRow(40, 49, 120, 10, 100),))


def test_design_matched_national_study():
    cov = covariate_table()
    X = build_design_rows([study(2000, cov=cov)], cov, (1999, 2008))
    assert X.shape == (1, N_DESIGN)
    assert X[0, 8] == 0.0 and X[0, 9] == 0.0
    assert X[0, 10] == pytest.approx(0.0, abs=1e-15)


def test_design_community_indicator_times_centered_year():
    cov = covariate_table()
    X = build_design_rows([study(2006, Coverage.Community, urb=0.1)], cov, (1999, 2008))
    assert X[0, 8] == 1.0
    assert X[0, 9] == 2006 - 2003.5


def test_design_rows_differ_only_in_time_columns():
    cov = covariate_table()
    raw = cov.raw.copy()
    raw[0, :, :] = raw[0, 10, :]  # time-constant covariates
    cov = CovariateTable.from_raw(cov.first_year, raw)
    a, b = build_design_rows([study(2001, Coverage.Subnational, 0.5), study(2005, Coverage.Subnational, 0.5)],
                             cov, (1999, 2008))
    differs = np.flatnonzero(~np.isclose(a, b, rtol=0, atol=1e-12))
    assert set(differs) == {2, 3, 9}
    # column-wise recomputation of the time columns
    c = cov.value(0, 2005)
    assert b[2] == pytest.approx(c[0] * 1.5) and b[3] == pytest.approx(c[1] * 1.5) and b[9] == 1.5


def test_design_missing_covariate_cell():
    cov = covariate_table(first=2001)
    with pytest.raises(IngestError, match="missing covariates"):
        build_design_rows([StudyRecord("x", 0, 2000, Coverage.Community, 0.2, ())], cov, (1999, 2008))


def test_prediction_design_zero_bias_columns():
    cov = covariate_table(J=2)
    X = prediction_design(cov, (1999, 2008))
    assert X.shape == (2, 10, N_DESIGN)
    assert np.all(X[..., 8:] == 0.0)


# ----------------------------------------------------------------------------
# covariates and population files


def test_covariate_and_population_loaders(tmp_path, small_hierarchy):
    lines = ["country_id,year,income,urbanization,food_pc1,food_pc2,food_pc3,food_pc4"]
    for c in "ABCD":
        for y in range(1995, 2001):
            lines.append(f"{c},{y},{y - 1990},0.5,0,0,0,0")
    cov = load_covariates(write(tmp_path, "cov.csv", "\n".join(lines) + "\n"), small_hierarchy, years=(1999, 2000))
    assert cov.first_year == 1995
    assert cov.value(0, 2000, smoothed=False)[0] == 10.0
    std = write(tmp_path, "std.csv", "age_lo,age_hi,weight\n25,34,0.5\n35,44,0.5\n")
    pop_lines = ["country_id,year,age_lo,age_hi,pop"]
    for c in "ABCD":
        for y in (1999, 2000):
            pop_lines += [f"{c},{y},25,34,100", f"{c},{y},35,44,50"]
    pop = load_population(write(tmp_path, "pop.csv", "\n".join(pop_lines) + "\n"), std, small_hierarchy,
                          (1999, 2000))
    assert pop.counts.shape == (4, 2, 2)
    assert pop.age_groups == ((25.0, 34.0), (35.0, 44.0))


def test_standard_weights_must_sum_to_one(tmp_path, small_hierarchy):
    std = write(tmp_path, "std.csv", "age_lo,age_hi,weight\n25,34,0.5\n35,44,0.4\n")
    pop = write(tmp_path, "pop.csv", "country_id,year,age_lo,age_hi,pop\nA,1999,25,34,1\n")
    with pytest.raises(IngestError):
        load_population(pop, std, small_hierarchy, (1999, 1999))


def test_covariate_gap_rejected(tmp_path, small_hierarchy):
    lines = ["country_id,year,income,urbanization,food_pc1,food_pc2,food_pc3,food_pc4",
             "A,1999,1,0.5,0,0,0,0", "A,2001,1,0.5,0,0,0,0"]
    with pytest.raises(IngestError, match="gaps"):
        load_covariates(write(tmp_path, "cov.csv", "\n".join(lines) + "\n"), small_hierarchy)
