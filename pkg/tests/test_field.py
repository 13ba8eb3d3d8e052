import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_interpolate, eval_power_sum, interpolate_cramer
from sfamss.field import (
    DEFAULT_MODULUS,
    TEST_MODULUS,
    DuplicateAbscissa,
    FieldElement,
    Polynomial,
    SharePoint,
    ZeroInverse,
    check_modulus,
    fe_inv,
    interpolate,
    poly_eval,
    poly_shift,
    sample_base_polynomial,
)

MODULI = st.sampled_from([TEST_MODULUS, DEFAULT_MODULUS])


@st.composite
def elements(draw, p=None):
    p = p or draw(MODULI)
    return FieldElement(draw(st.integers(0, p - 1)), p)


@st.composite
def element_pairs(draw):
    p = draw(MODULI)
    return draw(elements(p)), draw(elements(p))


@given(element_pairs())
def test_add_mul_commute(pair):
    a, b = pair
    assert a + b == b + a
    assert a * b == b * a


@given(element_pairs())
def test_sub_is_add_neg(pair):
    a, b = pair
    assert a - b == a + (-b)
    assert (a - b) + b == a


@given(elements())
def test_inverse_roundtrip(a):
    if a.value == 0:
        with pytest.raises(ZeroInverse):
            fe_inv(a)
    else:
        assert a * fe_inv(a) == FieldElement(1, a.p)
        assert (a / a).value == 1


@given(st.integers(), MODULI)
def test_of_reduces(v, p):
    assert FieldElement.of(v, p).value == v % p


def test_unreduced_value_rejected():
    with pytest.raises(ValueError):
        FieldElement(101, 101)
    with pytest.raises(ValueError):
        FieldElement(-1, 101)


def test_mixed_moduli_rejected():
    with pytest.raises(ValueError):
        FieldElement(1, 101) + FieldElement(1, 103)


def test_power_and_negative_power():
    a = FieldElement(3, 101)
    assert (a ** 4).value == 81
    assert (a ** -1) * a == FieldElement(1, 101)


def test_zero_inverse_via_division():
    with pytest.raises(ZeroInverse):
        FieldElement(5, 101) / 0


@pytest.mark.parametrize("p", [2, 3, 101, 2**61 - 1, 2**31 - 1])
def test_check_modulus_accepts_primes(p):
    assert check_modulus(p) == p


@pytest.mark.parametrize("p", [0, 1, 4, 100, 561, 2**61 + 1, 2**64 + 13])
def test_check_modulus_rejects(p):
    with pytest.raises(ValueError):
        check_modulus(p)


@given(st.lists(st.integers(0, 10**30), min_size=3, max_size=3), st.integers(0, 10**30), MODULI)
def test_eval_matches_power_sum(coeffs, x, p):
    poly = Polynomial.from_ints(coeffs, p)
    assert poly_eval(poly, FieldElement.of(x, p)).value == eval_power_sum(coeffs, x, p)


def test_polynomial_keeps_three_coefficients():
    poly = Polynomial.from_ints([0, 0, 0], 101)
    assert poly.ints() == (0, 0, 0)
    with pytest.raises(ValueError):
        Polynomial.from_ints([1, 2], 101)


def test_is_base():
    assert Polynomial.from_ints([0, 3, 2], 101).is_base()
    assert not Polynomial.from_ints([1, 3, 2], 101).is_base()
    assert not Polynomial.from_ints([0, 3, 0], 101).is_base()


def test_shift_only_moves_constant():
    f = Polynomial.from_ints([0, 3, 2], 101)
    assert poly_shift(f, FieldElement(7, 101)).ints() == (7, 3, 2)
    assert poly_shift(f, FieldElement(100, 101)).ints() == (100, 3, 2)


@settings(max_examples=300)
@given(st.data())
def test_interpolate_matches_cramer(data):
    p = data.draw(MODULI)
    xs = data.draw(st.lists(st.integers(0, p - 1), min_size=3, max_size=3, unique=True))
    ys = data.draw(st.lists(st.integers(0, p - 1), min_size=3, max_size=3))
    pts = [SharePoint.of(x, y, p) for x, y in zip(xs, ys)]
    assert list(interpolate(*pts).ints()) == interpolate_cramer(list(zip(xs, ys)), p)


def test_interpolate_matches_exhaustive_search_small_field():
    rng = random.Random(3)
    p = 13
    for _ in range(5):
        xs = rng.sample(range(p), 3)
        ys = [rng.randrange(p) for _ in xs]
        pts = [SharePoint.of(x, y, p) for x, y in zip(xs, ys)]
        assert list(interpolate(*pts).ints()) == brute_force_interpolate(list(zip(xs, ys)), p)


def test_interpolate_duplicate_abscissa():
    a = SharePoint.of(4, 1, 101)
    b = SharePoint.of(4, 9, 101)
    c = SharePoint.of(6, 2, 101)
    with pytest.raises(DuplicateAbscissa):
        interpolate(a, b, c)


def test_interpolate_degenerate_line():
    # three collinear points still give three coefficients, top one zero
    pts = [SharePoint.of(x, 2 * x + 1, 101) for x in (1, 2, 3)]
    assert interpolate(*pts).ints() == (1, 2, 0)


@given(st.integers(0, 2**32), MODULI)
def test_sampled_polynomials_are_base(seed, p):
    f = sample_base_polynomial(random.Random(seed), p)
    assert f.is_base()
    assert f.p == p
    assert f(0).value == 0


def test_sampling_is_deterministic():
    a = sample_base_polynomial(random.Random(42))
    b = sample_base_polynomial(random.Random(42))
    assert a == b


@given(elements(), elements())
def test_share_bytes_roundtrip(x, y):
    if x.p != y.p:
        y = FieldElement(y.value % x.p, x.p)
    pt = SharePoint(x, y)
    raw = pt.to_bytes()
    assert len(raw) == 16
    assert SharePoint.from_bytes(raw, x.p) == pt


def test_share_from_bytes_rejects_bad_length_and_unreduced():
    with pytest.raises(ValueError):
        SharePoint.from_bytes(b"\0" * 15, 101)
    with pytest.raises(ValueError):
        SharePoint.from_bytes((200).to_bytes(8, "big") + bytes(8), 101)
