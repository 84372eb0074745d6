import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhedit.analyze import (
    AnalysisError,
    EstimandQuery,
    bivariate_battery,
    evaluate_query,
    evaluation_report,
    marginal_battery,
    parse_query_file,
    pool_query,
    rubin_combine,
    trivariate_battery,
)
from hhedit.data import Dataset, Household
from hhedit.schema import load_schema

SCHEMA = load_schema(
    """
sizes: [2, 3]
variables:
- {name: Size, level: household, cardinality: 2, role: size}
- {name: Own, level: household, cardinality: 2, labels: [owned, rented]}
- {name: Race, level: individual, cardinality: 3}
- {name: Rel, level: individual, cardinality: 3, labels: [spouse, child, other]}
"""
)


def hh(own, members, size_code=None):
    members = np.array(members, dtype=np.int32)
    code = SCHEMA.code_for_size(len(members)) if size_code is None else size_code
    return Household(np.array([code, own], dtype=np.int32), members)


def ten_households():
    # hand-built: 6 of 10 households all-same-race; 14 individuals of which
    # 5 have Race 1; 4 households rent
    data = [
        hh(1, [[1, 1], [1, 2]]),
        hh(2, [[2, 1], [2, 2]]),
        hh(1, [[3, 3], [3, 3]]),
        hh(1, [[1, 1], [2, 2]]),
        hh(2, [[2, 2], [3, 3]]),
        hh(1, [[1, 1], [1, 2], [1, 2]]),
        hh(2, [[2, 1], [2, 2]]),
        hh(1, [[3, 3], [2, 3]]),
        hh(2, [[1, 2], [3, 3]]),
        hh(1, [[2, 2], [2, 2]]),
    ]
    return Dataset(SCHEMA, data)


def test_marginal_proportions_and_units():
    ds = ten_households()
    p, v = evaluate_query(ds, EstimandQuery.cell(("Own", 2)))
    assert p == pytest.approx(4 / 10)
    assert v == pytest.approx(0.4 * 0.6 / 10)
    n_people = ds.n_individuals
    p, v = evaluate_query(ds, EstimandQuery.cell(("Race", 1)))
    hand = sum(int((h.ind[:, 0] == 1).sum()) for h in ds.households)
    assert p == pytest.approx(hand / n_people)


def test_certain_category_has_probability_one():
    ds = Dataset(SCHEMA, [hh(1, [[1, 1], [1, 1]]), hh(1, [[1, 2], [1, 3]])])
    p, v = evaluate_query(ds, EstimandQuery.cell(("Race", 1)))
    assert p == 1.0 and v == 0.0


def test_mixed_bivariate_uses_individual_units():
    ds = ten_households()
    p, _ = evaluate_query(ds, EstimandQuery.cell(("Own", 2), ("Rel", 2)))
    hand = sum(
        int(((h.ind[:, 1] == 2) & (h.hh[1] == 2)).sum()) for h in ds.households
    )
    assert p == pytest.approx(hand / ds.n_individuals)


def test_predicate_query_counts_households():
    ds = ten_households()
    q = EstimandQuery.household_predicate(
        "all_same_race", "not (forall (a, b): a.Race != b.Race)", SCHEMA
    )
    # hand count of all-same-race households: rows 0,1,2,5,6,9
    p, _ = evaluate_query(ds, q)
    assert p == pytest.approx(6 / 10)


def test_queries_reject_incomplete_data():
    broken = ten_households()
    broken.households[0].hh[1] = 0
    with pytest.raises(AnalysisError, match="complete"):
        evaluate_query(broken, EstimandQuery.cell(("Own", 1)))


def test_marginal_battery_sums_to_one_per_variable():
    ds = ten_households()
    for var in SCHEMA.variables:
        total = sum(
            evaluate_query(ds, EstimandQuery.cell((var.name, c)))[0]
            for c in range(1, var.cardinality + 1)
        )
        assert total == pytest.approx(1.0)


def test_battery_sizes():
    marg = marginal_battery(SCHEMA)
    assert len(marg) == 2 + 2 + 3 + 3
    biv = list(bivariate_battery(SCHEMA))
    assert len(biv) == 2 * 2 + 2 * 3 + 2 * 3 + 2 * 3 + 2 * 3 + 3 * 3
    tri = trivariate_battery(SCHEMA)
    assert next(tri).kind == "trivariate"


# ---------------------------------------------------------------------------
# pooling

def test_identical_estimates_collapse_to_normal_interval():
    res = rubin_combine([0.4, 0.4, 0.4], [0.01, 0.01, 0.01])
    assert res.between == 0.0
    assert res.ci_low == pytest.approx(0.4 - 1.96 * math.sqrt(0.01), abs=1e-4)
    assert math.isinf(res.df)


def test_pooling_arithmetic():
    res = rubin_combine([0.4, 0.5, 0.6], [0.01, 0.01, 0.01])
    assert res.estimate == pytest.approx(0.5)
    assert res.between == pytest.approx(0.01)
    assert res.total == pytest.approx(0.01 + (4 / 3) * 0.01)
    assert res.total == pytest.approx(0.07 / 3)
    assert res.df == pytest.approx(2 * (1 + 0.01 / ((4 / 3) * 0.01)) ** 2)
    assert res.ci_low < 0.5 < res.ci_high


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=2, max_size=20),
    st.data(),
)
def test_pooling_matches_straight_line_reimplementation(estimates, data):
    variances = data.draw(
        st.lists(
            st.floats(min_value=1e-8, max_value=0.25),
            min_size=len(estimates),
            max_size=len(estimates),
        )
    )
    res = rubin_combine(estimates, variances)
    L = len(estimates)
    qbar = sum(estimates) / L
    ubar = sum(variances) / L
    b = sum((q - qbar) ** 2 for q in estimates) / (L - 1)
    T = ubar + (1 + 1 / L) * b
    assert abs(res.estimate - qbar) < 1e-12
    assert abs(res.within - ubar) < 1e-12
    assert abs(res.between - b) < 1e-12
    assert abs(res.total - T) < 1e-12
    if b > 0:
        df = (L - 1) * (1 + ubar / ((1 + 1 / L) * b)) ** 2
        assert abs(res.df - df) < 1e-9


def test_pooling_is_order_invariant():
    a = rubin_combine([0.2, 0.5, 0.3], [0.01, 0.02, 0.03])
    b = rubin_combine([0.5, 0.3, 0.2], [0.02, 0.03, 0.01])
    assert a.estimate == pytest.approx(b.estimate)
    assert a.total == pytest.approx(b.total)
    assert a.ci_low == pytest.approx(b.ci_low)


def test_intervals_widen_with_between_variance():
    base = rubin_combine([0.5, 0.5, 0.5, 0.5], [0.01] * 4)
    wider = rubin_combine([0.44, 0.48, 0.52, 0.56], [0.01] * 4)
    widest = rubin_combine([0.35, 0.45, 0.55, 0.65], [0.01] * 4)
    w0 = base.ci_high - base.ci_low
    w1 = wider.ci_high - wider.ci_low
    w2 = widest.ci_high - widest.ci_low
    assert w0 < w1 < w2


def test_pooling_needs_at_least_two():
    with pytest.raises(AnalysisError):
        rubin_combine([0.5], [0.01])


# ---------------------------------------------------------------------------
# reports

def test_report_on_identical_imputations_has_zero_deviation():
    ds = ten_households()
    queries = marginal_battery(SCHEMA)
    report = evaluation_report([ds.copy(), ds.copy(), ds.copy()], ds, queries)
    assert len(report.rows) == len(queries)
    assert all(r.abs_dev < 1e-12 for r in report.rows)
    assert all(r.covered for r in report.rows)
    assert report.summary["marginal"]["coverage"] == 1.0
    assert report.summary["marginal"]["max_abs_dev"] < 1e-12


def test_query_file_parsing():
    text = """
# battery plus explicit entries
marginal Own 1
bivariate Own 1 Rel 2
predicate spouse_present: forall p: p.Rel == spouse
battery marginal
"""
    queries = parse_query_file(text, SCHEMA)
    kinds = [q.kind for q in queries]
    assert kinds[:3] == ["marginal", "bivariate", "predicate"]
    assert len(queries) == 3 + len(marginal_battery(SCHEMA))
    with pytest.raises(AnalysisError, match="line"):
        parse_query_file("marginal NoVar 1", SCHEMA)
    with pytest.raises(AnalysisError, match="line"):
        parse_query_file("nonsense Own 1", SCHEMA)


def test_pool_query_across_imputations():
    ds1 = ten_households()
    ds2 = ten_households()
    ds2.households[0].hh[1] = 2  # shift one household's ownership
    ds2 = Dataset(SCHEMA, ds2.households)
    pooled = pool_query([ds1, ds2], EstimandQuery.cell(("Own", 2)))
    assert pooled.estimate == pytest.approx((0.4 + 0.5) / 2)
    assert pooled.n_imputations == 2
