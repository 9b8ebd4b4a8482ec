from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from monorank.errors import ContractError
from monorank.metrics import precision_at_k


def test_all_relevant():
    assert precision_at_k([1, 2, 3, 4, 5], {1, 2, 3, 4, 5}, 5) == 1.0


def test_reduced_denominator():
    assert precision_at_k(["a", "x", "b", "y", "z"], {"a", "b", "c"}, 5, exact=True) == Fraction(2, 3)


def test_no_overlap():
    assert precision_at_k([1, 2, 3], {7, 8}, 3) == 0.0


def test_only_top_k_counts():
    assert precision_at_k([9, 9.5, 1, 2], {1, 2}, 2, exact=True) == 0


def test_empty_relevant_is_zero():
    assert precision_at_k([1], set(), 1) == 0.0


@pytest.mark.parametrize("k", [0, -1, 1.5])
def test_bad_k(k):
    with pytest.raises(ContractError):
        precision_at_k([1], {1}, k)


def test_empty_predicted():
    with pytest.raises(ContractError):
        precision_at_k([], {1}, 1)


@given(
    st.lists(st.integers(0, 30), min_size=1, max_size=20, unique=True),
    st.sets(st.integers(0, 30)),
    st.integers(1, 25),
)
def test_bounds_and_definition(pred, rel, k):
    p = precision_at_k(pred, rel, k, exact=True)
    assert 0 <= p <= 1
    if rel:
        assert p == Fraction(len(set(pred[:k]) & rel), min(k, len(rel)))
