import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contin_dt.metrics import PerformanceMatrix, UndefinedMetric, all_metrics, bwt, dg, fwt, per

returns = st.floats(-100, 100, allow_nan=False)


def matrix(a, b_bar=None, teacher=None):
    a = np.asarray(a, dtype=float)
    return PerformanceMatrix(len(a), a, b_bar, teacher)


def test_hand_matrix_values():
    m = matrix([[1.0, 0.0], [0.5, 2.0]], b_bar=[0.0, 0.0], teacher=[2.0, 2.5])
    assert per(m) == pytest.approx(1.25, abs=1e-9)
    assert bwt(m) == pytest.approx(0.5, abs=1e-9)
    assert fwt(m) == pytest.approx(0.0, abs=1e-9)
    assert dg(m) == pytest.approx(0.75, abs=1e-9)


def test_three_task_hand_matrix():
    a = [[10, 1, 2], [7, 12, 3], [5, 9, 11]]
    m = matrix(a, b_bar=[0, -1, 1], teacher=[12, 12, 12])
    assert per(m) == pytest.approx(25 / 3, abs=1e-9)
    assert bwt(m) == pytest.approx(((10 - 5) + (12 - 9)) / 2, abs=1e-9)
    assert fwt(m) == pytest.approx(((1 + 1) + (3 - 1)) / 2, abs=1e-9)
    assert dg(m) == pytest.approx((2 + 0 + 1) / 3, abs=1e-9)


def test_small_examples():
    assert bwt(matrix([[1.0, 0.0], [0.0, 0.0]])) == 1.0
    assert fwt(matrix([[0.0, 3.0], [0.0, 0.0]], b_bar=[0.0, 1.0])) == 2.0
    assert dg(matrix([[3.0]], teacher=[5.0])) == 2.0
    assert per(matrix([[4.0]])) == 4.0


def test_no_forgetting_and_perfect_distillation_give_zero():
    a = np.array([[3.0, 1.0, 0.0], [3.0, 4.0, 2.0], [3.0, 4.0, 5.0]])
    m = matrix(a, teacher=np.diag(a))
    assert bwt(m) == 0.0
    assert dg(m) == 0.0


def test_students_beating_teachers_give_negative_gap():
    assert dg(matrix([[5.0, 0], [0, 6.0]], teacher=[4.0, 4.0])) < 0


def test_undefined_cases():
    with pytest.raises(UndefinedMetric):
        bwt(matrix([[1.0]]))
    with pytest.raises(UndefinedMetric):
        fwt(matrix([[1.0]], b_bar=[0.0]))
    with pytest.raises(UndefinedMetric):
        dg(matrix([[1.0, 2.0], [3.0, 4.0]]))
    m = PerformanceMatrix(2)
    m.set_row(0, [1.0, 2.0])
    with pytest.raises(UndefinedMetric):
        per(m)
    assert all_metrics(m) == {"PER": None, "BWT": None, "FWT": None, "DG": None}


def test_set_row_rejects_bad_rows():
    m = PerformanceMatrix(2)
    with pytest.raises(ValueError):
        m.set_row(0, [1.0, math.nan])
    with pytest.raises(ValueError):
        m.set_row(0, [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5).flatmap(lambda n: st.tuples(
    st.lists(st.lists(returns, min_size=n, max_size=n), min_size=n, max_size=n),
    st.lists(returns, min_size=n, max_size=n))), returns)
def test_shift_invariance(data, c):
    a, b = np.array(data[0]), np.array(data[1])
    m, s = matrix(a, b_bar=b), matrix(a + c, b_bar=b + c)
    assert bwt(s) == pytest.approx(bwt(m), abs=1e-9)
    assert fwt(s) == pytest.approx(fwt(m), abs=1e-9)
    assert per(s) == pytest.approx(per(m) + c, abs=1e-9)


def test_csv_round_trip_is_exact():
    rng = np.random.default_rng(0)
    m = matrix(rng.normal(size=(3, 3)) * 50, b_bar=rng.normal(size=3), teacher=[np.nan, 1 / 3, 2.0])
    back = PerformanceMatrix.from_csv(m.to_csv())
    assert np.array_equal(back.a, m.a)
    assert np.array_equal(back.b_bar, m.b_bar)
    assert np.array_equal(back.teacher, m.teacher, equal_nan=True)
