import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mstl.errors import ShapeError, ValidationError
from mstl.metrics import confusion, confusion_csv, f_avg, f_avg_from_probs, render_confusion

from oracles import f_avg_bruteforce


@st.composite
def labelled(draw):
    k = draw(st.integers(2, 7))
    n = draw(st.integers(1, 200))
    pred = draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    act = draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    return k, pred, act


class TestConfusion:
    def test_perfect_is_diagonal(self):
        cm = confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
        np.testing.assert_array_equal(cm, np.diag([1, 1, 2]))

    def test_single_off_diagonal(self):
        cm = confusion([5], [2], 7)
        assert cm[2, 5] == 1 and cm.sum() == 1

    @given(labelled())
    def test_rows_are_actual_counts(self, case):
        k, pred, act = case
        cm = confusion(pred, act, k)
        np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(act, minlength=k))
        assert cm.sum() == len(act)

    @pytest.mark.parametrize("pred,act", [([3], [0]), ([0], [-1])])
    def test_out_of_range(self, pred, act):
        with pytest.raises(ValidationError):
            confusion(pred, act, 3)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            confusion([0, 1], [0], 2)


class TestFAvg:
    def test_hand_example(self):
        # recall (0.5, 1), precision (1, 2/3): F1 terms 2/3 and 4/5
        assert abs(f_avg(np.array([[50, 50], [0, 100]])) - (2 / 3 + 4 / 5) / 2) < 1e-9

    def test_perfect(self):
        assert f_avg(np.eye(7, dtype=int) * 3) == 1.0

    def test_zero_denominator_terms_vanish(self):
        # class 2 never occurs and is never predicted
        cm = np.array([[3, 0, 0], [0, 3, 0], [0, 0, 0]])
        assert f_avg(cm) == pytest.approx(2 / 3)

    def test_empty_matrix(self):
        with pytest.raises(ValidationError):
            f_avg(np.zeros((3, 3), int))

    def test_needs_two_classes(self):
        with pytest.raises(ShapeError):
            f_avg(np.array([[4]]))

    @given(labelled())
    def test_matches_bruteforce_exactly(self, case):
        k, pred, act = case
        assert f_avg(confusion(pred, act, k)) == f_avg_bruteforce(pred, act, k)

    @given(labelled(), st.randoms())
    def test_permutation_invariant(self, case, rnd):
        k, pred, act = case
        perm = list(range(k))
        rnd.shuffle(perm)
        a = f_avg(confusion(pred, act, k))
        b = f_avg(confusion([perm[p] for p in pred], [perm[x] for x in act], k))
        assert a == pytest.approx(b, abs=1e-12)

    @given(labelled())
    def test_unit_interval_and_one_iff_diagonal(self, case):
        k, pred, act = case
        cm = confusion(pred, act, k)
        s = f_avg(cm)
        assert 0.0 <= s <= 1.0 + 1e-12
        diagonal = not (cm - np.diag(np.diag(cm))).any() and np.all(np.diag(cm) > 0)
        assert (abs(s - 1.0) < 1e-12) == diagonal

    def test_from_probs(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        assert f_avg_from_probs(probs, [0, 1, 1]) == f_avg(confusion([0, 1, 0], [0, 1, 1], 2))


def test_csv_and_render():
    cm = np.array([[2, 1], [0, 3]])
    text = confusion_csv(cm, ["a", "b"])
    assert text.splitlines()[0].startswith("actual")
    assert "a" in render_confusion(cm, ["a", "b"])


def test_returns_python_float():
    # CSV writers rely on repr() giving a plain number
    assert type(f_avg(np.array([[2, 1], [0, 3]]))) is float
