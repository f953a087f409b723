"""Real-valued 4D hyperspherical harmonics (HH).

A basis element H_nlm on the unit 3-sphere factors into a gamma-dependent
radial profile and an ordinary real spherical harmonic:

    H_nlm(theta, phi, gamma) = A_nl * sin(gamma)^l * C_{n-l}^{l+1}(cos gamma)
                               * Y_lm(theta, phi)

with C the Gegenbauer polynomials and A_nl a double-factorial normalization
chosen so the basis is orthonormal under the measure sin^2(gamma) sin(theta).
Valid indices satisfy 0 <= l <= n and -l <= m <= l; a truncation at n_max
keeps K = sum_{n<=n_max} (n+1)^2 elements (5 / 14 / 30 for n_max = 1 / 2 / 3).

Everything here is pure and float64. The hot rendering kernels re-implement
the same recurrences; this module is the reference implementation and also
provides the vectorized evaluators used for Monte-Carlo orthonormality
checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "HHIndex",
    "HyperDirection",
    "BasisTruncation",
    "basis_count",
    "index_list",
    "sh_pair_list",
    "radial_pair_list",
    "double_factorial",
    "gegenbauer",
    "assoc_legendre",
    "real_sh",
    "sh_basis_angles",
    "sh_eval",
    "hh_norm",
    "radial_profile",
    "real_hh",
    "real_hh_cartesian",
    "eval_basis_vector",
    "eval_basis_angles",
    "hyper_to_cartesian",
    "cartesian_to_hyper",
]


@dataclass(frozen=True)
class HHIndex:
    """Index triple of one HH basis element: 0 <= l <= n, -l <= m <= l."""

    n: int
    l: int
    m: int

    def __post_init__(self):
        if self.n < 0 or not (0 <= self.l <= self.n):
            raise ValueError(f"invalid HH index: need 0 <= l <= n, got n={self.n} l={self.l}")
        if abs(self.m) > self.l:
            raise ValueError(f"invalid HH index: need |m| <= l, got l={self.l} m={self.m}")


@dataclass(frozen=True)
class HyperDirection:
    """Point on S^3: theta in [0, pi], phi in [0, 2*pi), gamma in [0, pi]."""

    theta: float
    phi: float
    gamma: float

    def __post_init__(self):
        if not (0.0 <= self.theta <= math.pi):
            raise ValueError(f"theta out of [0, pi]: {self.theta}")
        if not (0.0 <= self.phi < 2.0 * math.pi):
            raise ValueError(f"phi out of [0, 2*pi): {self.phi}")
        if not (0.0 <= self.gamma <= math.pi):
            raise ValueError(f"gamma out of [0, pi]: {self.gamma}")

    def cartesian(self) -> np.ndarray:
        return hyper_to_cartesian(self.theta, self.phi, self.gamma)


@dataclass(frozen=True)
class BasisTruncation:
    """Truncation at principal degree n_max; keeps K = sum (n+1)^2 bases."""

    n_max: int

    def __post_init__(self):
        if self.n_max < 0:
            raise ValueError(f"n_max must be non-negative, got {self.n_max}")

    @property
    def count(self) -> int:
        return basis_count(self.n_max)

    @property
    def sh_count(self) -> int:
        return (self.n_max + 1) ** 2


def basis_count(n_max: int) -> int:
    """Number of HH bases kept through principal degree n_max."""
    return sum((n + 1) ** 2 for n in range(n_max + 1))


@lru_cache(maxsize=None)
def index_list(n_max: int) -> tuple[HHIndex, ...]:
    """All kept indices in canonical order: lexicographic by (n, l, m)."""
    return tuple(
        HHIndex(n, l, m)
        for n in range(n_max + 1)
        for l in range(n + 1)
        for m in range(-l, l + 1)
    )


@lru_cache(maxsize=None)
def sh_pair_list(l_max: int) -> tuple[tuple[int, int], ...]:
    """(l, m) pairs of the SH basis through degree l_max, lexicographic."""
    return tuple((l, m) for l in range(l_max + 1) for m in range(-l, l + 1))


@lru_cache(maxsize=None)
def radial_pair_list(n_max: int) -> tuple[tuple[int, int], ...]:
    """(n, l) pairs of the gamma radial profiles, lexicographic."""
    return tuple((n, l) for n in range(n_max + 1) for l in range(n + 1))


def double_factorial(k: int) -> float:
    """k!! with the empty-product convention 0!! = (-1)!! = 1."""
    out = 1.0
    while k > 1:
        out *= k
        k -= 2
    return out


def gegenbauer(alpha: int, degree: int, x):
    """Gegenbauer polynomial C_degree^alpha(x) via the three-term recurrence.

    C_0 = 1, C_1 = 2*alpha*x,
    d*C_d = 2*x*(d + alpha - 1)*C_{d-1} - (d + 2*alpha - 2)*C_{d-2}.
    Accepts scalars or arrays in x.
    """
    if alpha <= 0 or degree < 0:
        raise ValueError(f"need alpha >= 1 and degree >= 0, got alpha={alpha} degree={degree}")
    x = np.asarray(x, dtype=np.float64)
    c_prev = np.ones_like(x)
    if degree == 0:
        return c_prev if c_prev.ndim else float(c_prev)
    c = 2.0 * alpha * x
    for d in range(2, degree + 1):
        c, c_prev = (2.0 * x * (d + alpha - 1) * c - (d + 2 * alpha - 2) * c_prev) / d, c
    return c if c.ndim else float(c)


def gegenbauer_deriv(alpha: int, degree: int, x):
    """d/dx C_degree^alpha(x) = 2*alpha*C_{degree-1}^{alpha+1}(x)."""
    if degree == 0:
        x = np.asarray(x, dtype=np.float64)
        z = np.zeros_like(x)
        return z if z.ndim else 0.0
    return 2.0 * alpha * gegenbauer(alpha + 1, degree - 1, x)


def assoc_legendre(l: int, m: int, x):
    """Associated Legendre P_l^m(x), m >= 0, WITHOUT the Condon-Shortley phase.

    P_m^m = (2m-1)!! (1-x^2)^{m/2}, P_{m+1}^m = x (2m+1) P_m^m,
    (l-m) P_l^m = x (2l-1) P_{l-1}^m - (l+m-1) P_{l-2}^m.
    """
    if m < 0 or l < m:
        raise ValueError(f"need 0 <= m <= l, got l={l} m={m}")
    x = np.asarray(x, dtype=np.float64)
    somx2 = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    pmm = np.full_like(x, double_factorial(2 * m - 1)) * somx2**m
    if l == m:
        return pmm if pmm.ndim else float(pmm)
    pmmp1 = x * (2 * m + 1) * pmm
    if l == m + 1:
        return pmmp1 if pmmp1.ndim else float(pmmp1)
    for ll in range(m + 2, l + 1):
        pmmp1, pmm = (x * (2 * ll - 1) * pmmp1 - (ll + m - 1) * pmm) / (ll - m), pmmp1
    return pmmp1 if pmmp1.ndim else float(pmmp1)


@lru_cache(maxsize=None)
def _sh_prefactor(l: int, m: int) -> float:
    """Constant in front of P_l^|m|(cos theta) * {cos,sin}(|m| phi).

    Carries the Condon-Shortley phase (-1)^|m| and the sqrt(2) of the
    real-valued recombination of +-m pairs.
    """
    mu = abs(m)
    k = math.sqrt(
        (2 * l + 1) / (4.0 * math.pi) * math.factorial(l - mu) / math.factorial(l + mu)
    )
    pref = ((-1.0) ** mu) * k
    if mu > 0:
        pref *= math.sqrt(2.0)
    return pref


def real_sh(l: int, m: int, theta, phi):
    """Real spherical harmonic Y_lm(theta, phi).

    Built from the complex harmonics K_l^m P_l^m(cos theta) e^{i m phi}
    (Condon-Shortley phase inside the normalization) by the usual
    three-case real recombination; orthonormal on S^2.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    mu = abs(m)
    p = assoc_legendre(l, mu, np.cos(theta))
    pref = _sh_prefactor(l, m)
    if m > 0:
        out = pref * p * np.cos(m * phi)
    elif m < 0:
        out = pref * p * np.sin(mu * phi)
    else:
        out = pref * p * np.ones_like(phi)
    return out if out.ndim else float(out)


def sh_basis_angles(l_max: int, theta, phi) -> np.ndarray:
    """All real SH through degree l_max, stacked along the last axis."""
    theta = np.asarray(theta, dtype=np.float64)
    cols = [real_sh(l, m, theta, phi) for (l, m) in sh_pair_list(l_max)]
    return np.stack([np.broadcast_to(c, theta.shape) for c in cols], axis=-1)


def sh_eval(coeffs: np.ndarray, theta, phi):
    """Evaluate an SH expansion; coeffs indexed like sh_pair_list."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    s = coeffs.shape[0]
    l_max = int(round(math.sqrt(s))) - 1
    if (l_max + 1) ** 2 != s:
        raise ValueError(f"coefficient count {s} is not a square")
    basis = sh_basis_angles(l_max, theta, phi)
    return np.tensordot(basis, coeffs, axes=([-1], [0]))


@lru_cache(maxsize=None)
def hh_norm(n: int, l: int) -> float:
    """Normalization A_nl = (2l)!! sqrt(2(n+1)(n-l)! / (pi (n+l+1)!)).

    Log-domain accumulation for large n keeps the factorial ratio finite.
    """
    if not (0 <= l <= n):
        raise ValueError(f"need 0 <= l <= n, got n={n} l={l}")
    if n <= 20:
        ratio = math.factorial(n - l) / math.factorial(n + l + 1)
        return double_factorial(2 * l) * math.sqrt(2.0 * (n + 1) * ratio / math.pi)
    log_ratio = math.lgamma(n - l + 1) - math.lgamma(n + l + 2)
    log_df = sum(math.log(k) for k in range(2 * l, 0, -2))
    return math.exp(log_df + 0.5 * (math.log(2.0 * (n + 1) / math.pi) + log_ratio))


def radial_profile(n: int, l: int, gamma):
    """Gamma-dependent factor A_nl sin(gamma)^l C_{n-l}^{l+1}(cos gamma).

    Fixing gamma, H_nlm is exactly radial_profile(n, l, gamma) * Y_lm: the
    slice of the 4D basis is an SH scaled by this value.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    out = hh_norm(n, l) * np.sin(gamma) ** l * gegenbauer(l + 1, n - l, np.cos(gamma))
    return out if out.ndim else float(out)


def radial_profile_deriv(n: int, l: int, gamma):
    """d/dgamma of radial_profile."""
    gamma = np.asarray(gamma, dtype=np.float64)
    s, c = np.sin(gamma), np.cos(gamma)
    d = n - l
    term = -s * gegenbauer_deriv(l + 1, d, c) * s**l
    if l > 0:
        term = term + l * s ** (l - 1) * c * gegenbauer(l + 1, d, c)
    out = hh_norm(n, l) * term
    return out if out.ndim else float(out)


def real_hh(index: HHIndex, direction: HyperDirection) -> float:
    """H_nlm in hyperspherical form (the authoritative evaluation path)."""
    return float(
        radial_profile(index.n, index.l, direction.gamma)
        * real_sh(index.l, index.m, direction.theta, direction.phi)
    )


@lru_cache(maxsize=None)
def _legendre_deriv_coeffs(l: int, mu: int) -> tuple[tuple[int, float], ...]:
    """Monomial coefficients of d^mu P_l / dz^mu: pairs (power, coeff).

    coeff_k = (-1)^k 2^-l C(l,k) C(2l-2k,l) (l-2k)!/(l-2k-mu)! on z^{l-2k-mu}.
    """
    out = []
    for k in range((l - mu) // 2 + 1):
        p = l - 2 * k - mu
        c = (
            (-1.0) ** k
            * 0.5**l
            * math.comb(l, k)
            * math.comb(2 * l - 2 * k, l)
            * math.factorial(l - 2 * k)
            / math.factorial(p)
        )
        out.append((p, c))
    return tuple(out)


def real_hh_cartesian(index: HHIndex, x) -> float:
    """H_nlm evaluated from a unit 4-vector, polynomial form.

    The SH factor is the homogenized harmonic polynomial of degree l in
    (x2, x3, x4): powers of sin(gamma) from the hyperspherical form are
    absorbed into (x2^2+x3^2+x4^2)^k homogenization factors, so the
    evaluation has no coordinate singularities. Agrees with real_hh to
    roundoff away from gamma, theta in {0, pi}.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (4,):
        raise ValueError(f"expected a 4-vector, got shape {x.shape}")
    nrm = float(np.linalg.norm(x))
    if abs(nrm - 1.0) > 1e-9:
        raise ValueError(f"input must be a unit 4-vector: |x| = {nrm!r}")
    n, l, m = index.n, index.l, index.m
    mu = abs(m)
    x1, x2, x3, x4 = (float(v) for v in x)
    s2 = x2 * x2 + x3 * x3 + x4 * x4

    # Re/Im of (x3 + i x4)^mu via the binomial sum.
    a_mu, b_mu = 0.0, 0.0
    for p in range(mu + 1):
        w = math.comb(mu, p) * x3**p * x4 ** (mu - p)
        q = (mu - p) % 4
        a_mu += w * (1.0, 0.0, -1.0, 0.0)[q]
        b_mu += w * (0.0, 1.0, 0.0, -1.0)[q]
    azim = b_mu if m < 0 else (a_mu if mu > 0 else 1.0)

    poly = 0.0
    for p, c in _legendre_deriv_coeffs(l, mu):
        poly += c * x2**p * s2 ** ((l - p - mu) // 2)
    return float(
        hh_norm(n, l) * gegenbauer(l + 1, n - l, x1) * _sh_prefactor(l, m) * poly * azim
    )


def eval_basis_vector(trunc: BasisTruncation, direction: HyperDirection) -> np.ndarray:
    """All K basis values at one direction, in (n, l, m) order."""
    return eval_basis_angles(
        trunc.n_max,
        np.float64(direction.gamma),
        np.float64(direction.theta),
        np.float64(direction.phi),
    )


def eval_basis_angles(n_max: int, gamma, theta, phi) -> np.ndarray:
    """Vectorized basis stack: output shape = broadcast(...) + (K,).

    Radial profiles are shared across m, and SH values shared across n,
    so the K columns are assembled from (n_max+1)(n_max+2)/2 radial and
    (n_max+1)^2 angular evaluations.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    shape = np.broadcast_shapes(gamma.shape, theta.shape, phi.shape)
    rad = {
        (n, l): np.broadcast_to(radial_profile(n, l, gamma), shape)
        for (n, l) in radial_pair_list(n_max)
    }
    sh = {
        (l, m): np.broadcast_to(real_sh(l, m, theta, phi), shape)
        for (l, m) in sh_pair_list(n_max)
    }
    cols = [rad[(i.n, i.l)] * sh[(i.l, i.m)] for i in index_list(n_max)]
    return np.stack(cols, axis=-1)


def hyper_to_cartesian(theta, phi, gamma) -> np.ndarray:
    """(theta, phi, gamma) -> unit 4-vector, stacked on the last axis."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    sg, st = np.sin(gamma), np.sin(theta)
    return np.stack(
        np.broadcast_arrays(
            np.cos(gamma), sg * np.cos(theta), sg * st * np.cos(phi), sg * st * np.sin(phi)
        ),
        axis=-1,
    )


def cartesian_to_hyper(x) -> HyperDirection:
    """Unit 4-vector -> angles, clamping at the coordinate singularities."""
    x = np.asarray(x, dtype=np.float64)
    gamma = math.acos(min(1.0, max(-1.0, float(x[0]))))
    sg = math.sin(gamma)
    if sg < 1e-300:
        return HyperDirection(0.0, 0.0, gamma)
    theta = math.acos(min(1.0, max(-1.0, float(x[1]) / sg)))
    phi = math.atan2(float(x[3]), float(x[2])) % (2.0 * math.pi)
    if phi >= 2.0 * math.pi:
        phi = 0.0
    return HyperDirection(theta, phi, gamma)
