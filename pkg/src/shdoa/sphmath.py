"""Spherical-harmonic math kernel: special functions and modal constants.

Convention notes
----------------
* The complex spherical harmonic is

      Y_nm(theta, phi) = sqrt((2n+1)/(4 pi) * (n-|m|)!/(n+|m|)!)
                         * P_{n,|m|}(cos theta) * exp(i m phi)

  where ``theta`` is the elevation measured from +z (0 at the pole) and
  ``phi`` the azimuth from +x.
* The associated Legendre function ``P_{n,|m|}`` does NOT include the
  Condon-Shortley phase.  Under this choice ``Y_{n,-m} = conj(Y_{n,m})``.
  Every consumer in this package (decomposition, coherence model, feature
  pipeline) uses this one definition, so the convention is internally
  consistent; results would be equivalent under the other phase choice as
  long as it is applied everywhere.
* Spherical Bessel/Hankel functions use upward recurrence from the closed
  forms of orders 0 and 1.  This is accurate for the small orders (n <= 8)
  and arguments of order one used here; it is not suitable for n >> xi.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DomainError

FOUR_PI = 4.0 * math.pi

# i**p computed exactly from p mod 4; avoids floating-point phase drift.
_I_POWER = (1.0 + 0.0j, 0.0 + 1.0j, -1.0 + 0.0j, 0.0 - 1.0j)


def i_power(p: int) -> complex:
    """Return ``i**p`` exactly for any integer ``p``."""
    return _I_POWER[p % 4]


@dataclass(frozen=True)
class ModeIndex:
    """Order/degree index ``(n, m)`` of a spherical-harmonic mode.

    The linear index ``n**2 + n + m`` enumerates modes as
    (0,0), (1,-1), (1,0), (1,1), (2,-2), ...
    """

    n: int
    m: int

    def __post_init__(self):
        if self.n < 0 or abs(self.m) > self.n:
            raise DomainError(f"invalid mode (n={self.n}, m={self.m}): need |m| <= n")

    @property
    def linear(self) -> int:
        return self.n * self.n + self.n + self.m

    @staticmethod
    def from_linear(l: int) -> "ModeIndex":
        if l < 0:
            raise DomainError(f"negative linear mode index {l}")
        n = int(math.isqrt(l))
        return ModeIndex(n, l - n * n - n)


def mode_count(order: int) -> int:
    """Number of modes up to and including ``order``: (N+1)**2."""
    return (order + 1) ** 2


def mode_indices(order: int) -> list[ModeIndex]:
    """All modes up to ``order`` in linear-index sequence."""
    return [ModeIndex(n, m) for n in range(order + 1) for m in range(-n, n + 1)]


def mode_orders(order: int) -> np.ndarray:
    """Array of ``n`` for each linear index up to ``order``."""
    return np.array([idx.n for idx in mode_indices(order)])


@dataclass(frozen=True)
class Direction:
    """A direction on the unit sphere: elevation ``theta`` in [0, pi] from +z
    and azimuth ``phi`` in [0, 2 pi) from +x, both in radians."""

    theta: float
    phi: float

    def __post_init__(self):
        if not 0.0 <= self.theta <= math.pi:
            raise DomainError(f"elevation {self.theta} outside [0, pi]")
        if not 0.0 <= self.phi < 2.0 * math.pi:
            raise DomainError(f"azimuth {self.phi} outside [0, 2 pi)")

    @staticmethod
    def from_degrees(theta_deg: float, phi_deg: float) -> "Direction":
        return Direction(math.radians(theta_deg), math.radians(phi_deg) % (2.0 * math.pi))

    def to_cartesian(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array(
            [st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)]
        )


def assoc_legendre(n: int, m_abs: int, x: float) -> float:
    """Associated Legendre function ``P_{n,m}(x)`` without Condon-Shortley phase.

    Uses the standard three-term upward recurrence in ``n`` starting from the
    closed form of ``P_{m,m}``; stable for the small orders used here.

    Parameters
    ----------
    n : int
        Order, ``n >= 0``.
    m_abs : int
        Non-negative degree, ``0 <= m_abs <= n``.
    x : float
        Argument in [-1, 1].
    """
    if m_abs < 0 or m_abs > n:
        raise DomainError(f"need 0 <= m <= n, got n={n}, m={m_abs}")
    if abs(x) > 1.0:
        raise DomainError(f"Legendre argument {x} outside [-1, 1]")
    # P_mm = (2m-1)!! (1-x^2)^(m/2)
    pmm = 1.0
    if m_abs > 0:
        pmm = math.prod(range(1, 2 * m_abs, 2)) * (1.0 - x * x) ** (m_abs / 2.0)
    if n == m_abs:
        return pmm
    pm1 = x * (2 * m_abs + 1) * pmm
    if n == m_abs + 1:
        return pm1
    for k in range(m_abs + 2, n + 1):
        pmm, pm1 = pm1, (x * (2 * k - 1) * pm1 - (k + m_abs - 1) * pmm) / (k - m_abs)
    return pm1


def sph_harmonic(idx: ModeIndex, direction: Direction) -> complex:
    """Complex spherical harmonic ``Y_nm`` at one direction (see module notes)."""
    n, m = idx.n, idx.m
    norm = math.sqrt(
        (2 * n + 1) / FOUR_PI * math.factorial(n - abs(m)) / math.factorial(n + abs(m))
    )
    return norm * assoc_legendre(n, abs(m), math.cos(direction.theta)) * cmath.exp(1j * m * direction.phi)


def sph_harmonic_matrix(order: int, thetas: np.ndarray, phis: np.ndarray) -> np.ndarray:
    """Evaluate all harmonics up to ``order`` at many directions.

    Returns a complex array of shape ``((order+1)**2, len(thetas))`` whose
    row ``n**2 + n + m`` holds ``Y_nm`` at each direction.
    """
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    phis = np.atleast_1d(np.asarray(phis, dtype=float))
    if thetas.shape != phis.shape:
        raise DomainError("thetas and phis must have matching shapes")
    ct = np.cos(thetas)
    out = np.empty((mode_count(order), thetas.size), dtype=complex)
    for idx in mode_indices(order):
        n, m = idx.n, idx.m
        norm = math.sqrt(
            (2 * n + 1) / FOUR_PI * math.factorial(n - abs(m)) / math.factorial(n + abs(m))
        )
        leg = np.array([assoc_legendre(n, abs(m), c) for c in ct])
        out[idx.linear] = norm * leg * np.exp(1j * m * phis)
    return out


def _series_jn(n: int, xi: float, terms: int = 40) -> float:
    """Convergent power series for j_n; well conditioned for xi < n."""
    total = 0.0
    term_scale = xi**n
    for s in range(terms):
        dfact = math.prod(range(2 * n + 2 * s + 1, 0, -2))
        term = (-1.0) ** s * term_scale / (math.factorial(s) * 2.0**s * dfact)
        total += term
        term_scale *= xi * xi
        if abs(term) < 1e-300:
            break
    return total


def _spherical_jy_upward(n_max: int, xi: float) -> tuple[np.ndarray, np.ndarray]:
    """Spherical Bessel j_n and y_n for n = -1 .. n_max.

    Index k of the returned arrays holds order ``k - 1``.  Upward recurrence
    from the order-0/1 closed forms is stable for y everywhere and for j when
    xi is not far below n; in the sub-turning-point regime (n >= 3, xi < n)
    j_n switches to its power series to keep full relative precision.
    """
    j = np.empty(n_max + 2)
    y = np.empty(n_max + 2)
    s, c = math.sin(xi), math.cos(xi)
    j[0], y[0] = c / xi, s / xi  # order -1
    j[1], y[1] = s / xi, -c / xi  # order 0
    for n in range(1, n_max + 1):
        fac = (2 * n - 1) / xi
        j[n + 1] = fac * j[n] - j[n - 1]
        y[n + 1] = fac * y[n] - y[n - 1]
    for n in range(3, n_max + 1):
        if xi < n:
            j[n + 1] = _series_jn(n, xi)
    return j, y


def radial_b(n: int, xi: float, kind: str) -> complex:
    """Radial weighting ``b_n`` of a spherical array at ``xi = k * r``.

    ``kind='open'`` gives the spherical Bessel function ``j_n(xi)``;
    ``kind='rigid'`` adds the scattering term
    ``j_n(xi) - j_n'(xi)/h_n'(xi) * h_n(xi)`` with ``h_n`` the spherical
    Hankel function of the first kind.
    """
    return radial_b_all(n, xi, kind)[n]


def radial_b_all(n_max: int, xi: float, kind: str) -> np.ndarray:
    """Vector of ``b_n(xi)`` for ``n = 0 .. n_max`` (complex)."""
    if xi <= 0.0:
        raise DomainError(f"radial argument must be positive, got {xi}")
    if kind not in ("open", "rigid"):
        raise DomainError(f"array kind must be 'open' or 'rigid', got {kind!r}")
    j, y = _spherical_jy_upward(n_max, xi)
    jn = j[1:]
    if kind == "open":
        return jn.astype(complex)
    h = j + 1j * y
    ns = np.arange(0, n_max + 1)
    # f_n' = f_{n-1} - (n+1)/xi * f_n, valid including n=0 via the order -1 entry
    jp = j[:-1] - (ns + 1) / xi * j[1:]
    hp = h[:-1] - (ns + 1) / xi * h[1:]
    return jn - jp / hp * h[1:]


def wigner3j(j1: int, j2: int, j3: int, m1: int, m2: int, m3: int) -> float:
    """Wigner 3j symbol for integer arguments via the Racah sum.

    The alternating sum and the squared prefactor are accumulated in exact
    rational arithmetic; a single square root at the end is the only
    floating-point rounding.  Arguments violating the selection rules
    (m1+m2+m3 != 0, triangle inequality, |m| > j) return 0.
    """
    if j1 < 0 or j2 < 0 or j3 < 0:
        return 0.0
    if m1 + m2 + m3 != 0:
        return 0.0
    if j3 < abs(j1 - j2) or j3 > j1 + j2:
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(m3) > j3:
        return 0.0
    f = math.factorial
    t_min = max(0, j2 - j3 - m1, j1 - j3 + m2)
    t_max = min(j1 + j2 - j3, j1 - m1, j2 + m2)
    total = Fraction(0)
    for t in range(t_min, t_max + 1):
        den = (
            f(t)
            * f(j3 - j2 + t + m1)
            * f(j3 - j1 + t - m2)
            * f(j1 + j2 - j3 - t)
            * f(j1 - t - m1)
            * f(j2 - t + m2)
        )
        total += Fraction(-1 if t % 2 else 1, den)
    if total == 0:
        return 0.0
    squared = Fraction(
        f(j1 + j2 - j3) * f(j1 - j2 + j3) * f(-j1 + j2 + j3), f(j1 + j2 + j3 + 1)
    ) * Fraction(
        f(j1 + m1) * f(j1 - m1) * f(j2 + m2) * f(j2 - m2) * f(j3 + m3) * f(j3 - m3)
    )
    sign = -1.0 if (j1 - j2 - m3) % 2 else 1.0
    return sign * float(total) * math.sqrt(squared.numerator / squared.denominator)


def coupling_constant(n: int, n_prime: int) -> complex:
    """Mode-pair constant ``16 pi^2 i**(n - n')`` of the coherence model."""
    return 16.0 * math.pi * math.pi * i_power(n - n_prime)


def upsilon(idx: ModeIndex, idx_prime: ModeIndex, direction: Direction) -> complex:
    """Direct-path coherence kernel for a source in ``direction``.

    ``upsilon(nm, n'm', x) = 16 pi^2 i**(n-n') Y*_nm(x) Y_n'm'(x)``.
    """
    return (
        coupling_constant(idx.n, idx_prime.n)
        * np.conj(sph_harmonic(idx, direction))
        * sph_harmonic(idx_prime, direction)
    )


def psi(idx: ModeIndex, idx_prime: ModeIndex, v: int, u: int) -> complex:
    """Reverberant-path coherence kernel coupling modes through (v, u).

    Combines the Gaunt-style product of two Wigner 3j symbols with the
    mode-pair constant; returns 0 whenever the selection rules fail.
    """
    if abs(u) > v:
        return 0.0
    n, m = idx.n, idx.m
    np_, mp = idx_prime.n, idx_prime.m
    w = (
        math.sqrt((2 * v + 1) * (2 * n + 1) * (2 * np_ + 1) / FOUR_PI)
        * wigner3j(v, n, np_, 0, 0, 0)
        * wigner3j(v, n, np_, u, -m, mp)
    )
    if w == 0.0:
        return 0.0
    return coupling_constant(n, np_) * ((-1.0) ** m) * w


def truncation_order(k: float, r: float) -> int:
    """Soundfield truncation order ``ceil(k * r)`` for wavenumber ``k`` and radius ``r``."""
    if k <= 0.0 or r <= 0.0:
        raise DomainError("wavenumber and radius must be positive")
    return int(math.ceil(k * r))
