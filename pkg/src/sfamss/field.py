"""Prime-field arithmetic and the degree-2 polynomials used for share checks.

Every value lives in GF(p).  The modulus is carried on each element so that
fixtures at p=101 and production values at p=2^61-1 can coexist in one
process; mixing moduli is a programming error and raises ``ValueError``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable

M61 = (1 << 61) - 1
DEFAULT_MODULUS = M61
TEST_MODULUS = 101


class ZeroInverse(ZeroDivisionError):
    pass


class DuplicateAbscissa(ValueError):
    pass


def _is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for q in small:
        if n % q == 0:
            return n == q
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    # deterministic for n < 3.3e24 with these bases
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def check_modulus(p: int) -> int:
    if not _is_probable_prime(p):
        raise ValueError(f"modulus {p} is not prime")
    if p >= 1 << 64:
        raise ValueError("modulus must fit in 64 bits")
    return p


@dataclass(frozen=True, slots=True)
class FieldElement:
    value: int
    p: int = DEFAULT_MODULUS

    def __post_init__(self) -> None:
        if not 0 <= self.value < self.p:
            raise ValueError(f"{self.value} is not reduced mod {self.p}")

    @classmethod
    def of(cls, value: int, p: int = DEFAULT_MODULUS) -> "FieldElement":
        return cls(value % p, p)

    def _coerce(self, other: "FieldElement | int") -> int:
        if isinstance(other, FieldElement):
            if other.p != self.p:
                raise ValueError("field elements from different moduli")
            return other.value
        return other % self.p

    def __add__(self, other: "FieldElement | int") -> "FieldElement":
        return FieldElement((self.value + self._coerce(other)) % self.p, self.p)

    __radd__ = __add__

    def __sub__(self, other: "FieldElement | int") -> "FieldElement":
        return FieldElement((self.value - self._coerce(other)) % self.p, self.p)

    def __rsub__(self, other: "FieldElement | int") -> "FieldElement":
        return FieldElement((self._coerce(other) - self.value) % self.p, self.p)

    def __mul__(self, other: "FieldElement | int") -> "FieldElement":
        return FieldElement(self.value * self._coerce(other) % self.p, self.p)

    __rmul__ = __mul__

    def __neg__(self) -> "FieldElement":
        return FieldElement(-self.value % self.p, self.p)

    def __truediv__(self, other: "FieldElement | int") -> "FieldElement":
        return self * fe_inv(FieldElement(self._coerce(other), self.p))

    def __pow__(self, e: int) -> "FieldElement":
        if e < 0:
            return fe_inv(self) ** (-e)
        return FieldElement(pow(self.value, e, self.p), self.p)

    def __int__(self) -> int:
        return self.value

    def __bool__(self) -> bool:
        return self.value != 0

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(8, "big")

    def __repr__(self) -> str:
        return f"FieldElement({self.value}, p={self.p})"


def fe_inv(a: FieldElement) -> FieldElement:
    if a.value == 0:
        raise ZeroInverse(f"0 has no inverse mod {a.p}")
    return FieldElement(pow(a.value, a.p - 2, a.p), a.p)


@dataclass(frozen=True, slots=True)
class Polynomial:
    """c0 + c1*x + c2*x^2, always exactly three coefficients."""

    coeffs: tuple[FieldElement, FieldElement, FieldElement]

    def __post_init__(self) -> None:
        if len(self.coeffs) != 3:
            raise ValueError("polynomial must have exactly 3 coefficients")
        if len({c.p for c in self.coeffs}) != 1:
            raise ValueError("coefficients from different moduli")

    @classmethod
    def from_ints(cls, values: Iterable[int], p: int = DEFAULT_MODULUS) -> "Polynomial":
        c = tuple(FieldElement.of(v, p) for v in values)
        return cls(c)  # type: ignore[arg-type]

    @property
    def p(self) -> int:
        return self.coeffs[0].p

    def ints(self) -> tuple[int, int, int]:
        return tuple(c.value for c in self.coeffs)  # type: ignore[return-value]

    def is_base(self) -> bool:
        return self.coeffs[0].value == 0 and self.coeffs[2].value != 0

    def __call__(self, x: FieldElement | int) -> FieldElement:
        if not isinstance(x, FieldElement):
            x = FieldElement.of(x, self.p)
        return poly_eval(self, x)


@dataclass(frozen=True, slots=True)
class SharePoint:
    x: FieldElement
    y: FieldElement

    @classmethod
    def of(cls, x: int, y: int, p: int = DEFAULT_MODULUS) -> "SharePoint":
        return cls(FieldElement.of(x, p), FieldElement.of(y, p))

    def to_bytes(self) -> bytes:
        """16-byte x||y encoding; this is what gets sealed in transit."""
        return self.x.to_bytes() + self.y.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes, p: int) -> "SharePoint":
        if len(data) != 16:
            raise ValueError("share encoding must be 16 bytes")
        x = int.from_bytes(data[:8], "big")
        y = int.from_bytes(data[8:], "big")
        return cls(FieldElement(x, p), FieldElement(y, p))


def poly_eval(poly: Polynomial, x: FieldElement) -> FieldElement:
    c0, c1, c2 = poly.coeffs
    # Horner
    return (c2 * x + c1) * x + c0


def poly_shift(poly: Polynomial, r: FieldElement) -> Polynomial:
    c0, c1, c2 = poly.coeffs
    return Polynomial((c0 + r, c1, c2))


def interpolate(p1: SharePoint, p2: SharePoint, p3: SharePoint) -> Polynomial:
    """Lagrange interpolation of the unique degree-<=2 polynomial through three points."""
    pts = (p1, p2, p3)
    xs = [pt.x for pt in pts]
    if xs[0] == xs[1] or xs[0] == xs[2] or xs[1] == xs[2]:
        raise DuplicateAbscissa("interpolation points must have distinct x")
    p = xs[0].p
    zero = FieldElement(0, p)
    acc = [zero, zero, zero]
    for i, pt in enumerate(pts):
        a, b = (xs[j] for j in range(3) if j != i)
        # (x - a)(x - b) = x^2 - (a+b)x + ab
        scale = pt.y / ((pt.x - a) * (pt.x - b))
        acc[0] += scale * (a * b)
        acc[1] -= scale * (a + b)
        acc[2] += scale
    return Polynomial((acc[0], acc[1], acc[2]))


def sample_base_polynomial(rng: random.Random, p: int = DEFAULT_MODULUS) -> Polynomial:
    """Random F with F(0) = 0 and a nonzero quadratic term."""
    c1 = rng.randrange(0, p)
    c2 = rng.randrange(1, p)
    return Polynomial.from_ints((0, c1, c2), p)


def random_element(rng: random.Random, p: int, nonzero: bool = False) -> FieldElement:
    return FieldElement(rng.randrange(1 if nonzero else 0, p), p)
