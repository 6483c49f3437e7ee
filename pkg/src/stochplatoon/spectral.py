"""Frequency-domain analysis along the platoon.

Stationary error spectra obey the vehicle-indexed recursion

    phi_1 = |HT|^2 P_d
    phi_i = |T|^2 phi_{i-1} + |T|^2 |S|^2 P_d + (1 - |T|^2) |1 - S|^2 P_d

whose integrals give the variance ladder ``P_i = P_{i-1} + ||T^{i-1} S||_2^2 P_d``.
Its limit for an infinitely long platoon is ``(||S/M||_2^2 - 1) P_d`` with
``M M~ = 1 - T T~``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import (
    CancellationFailure,
    IllConditioned,
    NoFactorization,
    NotMSS,
    NotStringStable,
    SlowConvergence,
    UnstableSystem,
)
from .lti import (
    FrequencyGrid,
    _golden_refine,
    Polynomial,
    StateSpace,
    TransferFunction,
    evaluate,
    h2_norm,
    is_stable,
    realize,
)
from .lyapunov import solve_stein

__all__ = [
    "SpectrumLadder",
    "SpectralFactor",
    "GainReport",
    "psd_ladder",
    "variance_ladder",
    "gain_report",
    "spectral_factorize",
    "limiting_variance",
    "limiting_variance_series",
]

UNIT_ROOT_TOL = 1e-6
PAIRING_TOL = 1e-7
RESIDUAL_TOL = 1e-7
GAIN_MARGIN = 1e-9


@dataclass(frozen=True, eq=False)
class SpectrumLadder:
    grid: FrequencyGrid
    phi: np.ndarray  # (N, len(grid.omega))
    P_d: float

    @property
    def N(self) -> int:
        return self.phi.shape[0]

    def rows(self):
        """CSV rows ``(omega, i, phi)``."""
        for i in range(self.N):
            for w, p in zip(self.grid.omega, self.phi[i]):
                yield w, i + 1, p


def psd_ladder(
    T: TransferFunction,
    S: TransferFunction,
    H: TransferFunction,
    P_d: float,
    N: int,
    grid: FrequencyGrid | None = None,
) -> SpectrumLadder:
    if not is_stable(T):
        raise NotMSS("the spectral recursion needs a stable vehicle loop")
    grid = grid or FrequencyGrid.uniform()
    z = grid.z
    T_w = evaluate(T, z)
    S_w = evaluate(S, z)
    T2 = np.abs(T_w) ** 2
    # 1 - S = H T
    HT2 = np.abs(evaluate(H, z) * T_w) ** 2
    W = T2 * np.abs(S_w) ** 2 + (1.0 - T2) * HT2
    phi = np.empty((N, z.size))
    phi[0] = HT2 * P_d
    for i in range(1, N):
        phi[i] = T2 * phi[i - 1] + W * P_d
    return SpectrumLadder(grid=grid, phi=phi, P_d=P_d)


def _cascade(first: StateSpace, second: StateSpace) -> StateSpace:
    """Realization of ``second * first`` (``first`` drives ``second``)."""
    n1, n2 = first.n, second.n
    A = np.zeros((n1 + n2, n1 + n2))
    A[:n1, :n1] = first.A
    A[n1:, :n1] = second.B @ first.C
    A[n1:, n1:] = second.A
    B = np.vstack([first.B, second.B * first.D])
    C = np.hstack([second.D * first.C, second.C])
    return StateSpace(A, B, C, second.D * first.D)


def _h2_squared(ss: StateSpace) -> float:
    if ss.n == 0:
        return ss.D**2
    P = solve_stein(ss.A, ss.B @ ss.B.T)
    return float(ss.D**2 + (ss.C @ P @ ss.C.T)[0, 0])


def variance_ladder(
    T: TransferFunction, S: TransferFunction, H: TransferFunction, P_d: float, N: int
) -> np.ndarray:
    """Stationary variances ``P_1 .. P_N`` from H2 norms of ``T^{i-1} S``.

    ``T^{i-1} S`` is realized as a growing cascade so no polynomial powers of
    ``T`` are ever formed.
    """
    if not is_stable(T):
        raise UnstableSystem("variance ladder needs a stable T")
    out = np.empty(N)
    out[0] = h2_norm(H * T) ** 2 * P_d
    T_ss = realize(T)
    chain = realize(S)
    for i in range(1, N):
        chain = _cascade(chain, T_ss)
        out[i] = out[i - 1] + _h2_squared(chain) * P_d
    return out


# ----------------------------------------------------------------------------
# unit-circle polynomial bookkeeping


@dataclass(frozen=True, eq=False)
class _Deficit:
    """``1 - T T~ = z^k P'(z) / (a(z) rev_a(z))``, with ``P'`` palindromic.

    ``R`` is ``P'`` with the structural ``(z-1)^2`` removed when ``|T(1)| = 1``.
    """

    a: np.ndarray
    k: int
    P: np.ndarray
    R: np.ndarray
    unit_root: bool

    @property
    def m(self) -> int:
        return (len(self.P) - 1) // 2

    def normalized(self, omega: np.ndarray) -> np.ndarray:
        """``(1 - |T|^2) / |1 - e^{jw}|^2`` when the DC root was removed, else ``1 - |T|^2``."""
        z = np.exp(1j * omega)
        a2 = np.abs(np.polyval(self.a, z)) ** 2
        if self.unit_root:
            val = -np.polyval(self.R, z) * z ** (-(self.m - 1))
        else:
            val = np.polyval(self.P, z) * z ** (-self.m)
        return val.real / a2


def _deficit(T: TransferFunction) -> _Deficit:
    a = T.den.array
    n = T.den.degree
    b = np.concatenate([np.zeros(n + 1 - len(T.num.coeffs)), T.num.array])
    P = np.convolve(a, a[::-1]) - np.convolve(b, b[::-1])
    scale = np.abs(P).max() if P.size else 1.0
    k = 0
    while 2 * k + 1 < len(P) and abs(P[k]) <= 1e-14 * scale and abs(P[-1 - k]) <= 1e-14 * scale:
        k += 1
    P = P[k : len(P) - k] if k else P
    P = 0.5 * (P + P[::-1])
    unit_root = abs(abs(complex(evaluate(T, 1.0))) - 1.0) <= 1e-9 and len(P) >= 3
    R = P
    if unit_root:
        q, r = np.polydiv(P, np.array([1.0, -2.0, 1.0]))
        if np.abs(r).max(initial=0.0) > 1e-9 * max(1.0, np.abs(P).max()):
            raise IllConditioned("1 - |T|^2 does not vanish to second order at z = 1")
        R = 0.5 * (q + q[::-1])
    return _Deficit(a=a, k=k, P=P, R=R, unit_root=unit_root)


@dataclass(frozen=True, eq=False)
class GainReport:
    """String-gain diagnostics of ``T`` on ``(0, pi]``.

    ``margin`` is ``1 - max|T|``; it tends to zero for every loop with
    ``T(1) = 1``. ``normalized_margin`` divides the gain deficit
    ``1 - |T|^2`` by ``|1 - e^{jw}|^2`` so the forced touch at DC does not
    mask the decision.
    """

    max_gain: float
    worst_frequency: float
    margin: float
    normalized_margin: float
    gain_condition: bool
    hinf_leq_one: bool
    hinf: float


def gain_report(T: TransferFunction, grid: FrequencyGrid | None = None) -> GainReport:
    """Decide ``|T(e^{jw})| < 1`` for all ``w > 0`` with margin ``1e-9``.

    The decision uses the normalized deficit, which stays bounded away from
    zero near DC for a loop that is string stable.
    """
    grid = grid or FrequencyGrid.uniform()
    w = grid.positive
    mag = lambda x: np.abs(evaluate(T, np.exp(1j * x)))
    worst, max_gain = _golden_refine(mag, w, int(np.argmax(mag(w))))
    hinf = max(max_gain, float(abs(evaluate(T, 1.0))))

    d = _deficit(T)
    g = d.normalized(grid.omega)
    j = int(np.argmin(g))
    neg_g = lambda x: -float(d.normalized(np.atleast_1d(x))[0])
    w_g, worst_g = _golden_refine(neg_g, grid.omega, j)
    normalized_margin = -worst_g
    gain_ok = normalized_margin > GAIN_MARGIN
    if not gain_ok and max_gain <= 1.0:
        # the deficit touches zero somewhere away from the grid maximum
        worst = w_g if w_g > 0 else worst
    return GainReport(
        max_gain=max_gain,
        worst_frequency=worst,
        margin=1.0 - max_gain,
        normalized_margin=normalized_margin,
        gain_condition=bool(gain_ok),
        hinf_leq_one=bool(hinf <= 1.0 + GAIN_MARGIN),
        hinf=hinf,
    )


# ----------------------------------------------------------------------------
# spectral factorization


@dataclass(frozen=True, eq=False)
class SpectralFactor:
    """``M`` with ``|M(e^{jw})|^2 = 1 - |T(e^{jw})|^2``.

    ``gain * z^zero_roots * (z-1)^unit_root * inner(z) / den(z)``; ``inner`` has
    all roots inside or on the unit circle.
    """

    M: TransferFunction
    T: TransferFunction
    gain: float
    inner: np.ndarray
    den: np.ndarray
    zero_roots: int
    unit_root: bool
    residual: float

    def to_dict(self) -> dict:
        return self.M.to_dict()


def _pair_unit_roots(roots: np.ndarray) -> list[complex]:
    order = np.argsort(np.angle(roots))
    r = roots[order]
    if len(r) % 2:
        raise IllConditioned("odd number of unit-circle roots")
    half = []
    for j in range(0, len(r), 2):
        if abs(r[j] - r[j + 1]) > PAIRING_TOL:
            raise IllConditioned(f"unit-circle roots {r[j]:.6g} and {r[j + 1]:.6g} do not pair")
        half.append(0.5 * (r[j] + r[j + 1]))
    return half


def spectral_factorize(T: TransferFunction, grid: FrequencyGrid | None = None) -> SpectralFactor:
    if not is_stable(T):
        raise UnstableSystem("spectral factorization needs a stable T")
    grid = grid or FrequencyGrid.uniform(2**14)
    z = grid.z
    target = 1.0 - np.abs(evaluate(T, z)) ** 2
    if target.min() < -1e-9:
        raise NoFactorization(f"1 - |T|^2 reaches {target.min():.3g} < 0: ||T||_inf > 1")

    d = _deficit(T)
    want = d.m - 1 if d.unit_root else d.m
    roots = np.roots(d.R) if len(d.R) > 1 else np.zeros(0, dtype=complex)
    mod = np.abs(roots)
    inside = list(roots[mod < 1.0 - UNIT_ROOT_TOL])
    on_circle = roots[np.abs(mod - 1.0) <= UNIT_ROOT_TOL]
    chosen = inside + _pair_unit_roots(on_circle)
    if len(chosen) != want:
        raise IllConditioned(f"selected {len(chosen)} stable roots, expected {want}")
    inner = np.real(np.poly(chosen)) if chosen else np.ones(1)

    numer = np.polymul(inner, [1.0, -1.0]) if d.unit_root else inner
    numer = np.concatenate([numer, np.zeros(d.k)])
    shape = np.abs(np.polyval(numer, z) / np.polyval(d.a, z)) ** 2
    gain2 = float(np.dot(shape, target) / np.dot(shape, shape))
    if gain2 <= 0:
        raise NoFactorization("degenerate spectral factor gain")
    gain = float(np.sqrt(gain2))
    residual = float(np.abs(gain2 * shape - target).max())
    M = TransferFunction(gain * numer, d.a)
    return SpectralFactor(
        M=M, T=T, gain=gain, inner=inner, den=d.a, zero_roots=d.k, unit_root=d.unit_root, residual=residual
    )


def limiting_variance(
    S: TransferFunction, factor: SpectralFactor, P_d: float, grid: FrequencyGrid | None = None
) -> float:
    """``(||S/M||_2^2 - 1) P_d`` with the shared root at ``z = 1`` divided out exactly."""
    report = gain_report(factor.T, grid)
    if not report.gain_condition:
        raise NotStringStable(
            f"|T| reaches {report.max_gain:.6g} at w = {report.worst_frequency:.4g}: the limit does not exist"
        )
    s_num = S.num
    if factor.unit_root:
        try:
            s_num = s_num.deflate([1.0, -1.0], rtol=1e-8)
        except ArithmeticError as exc:
            raise CancellationFailure("S has no zero at z = 1 to cancel the factor's root") from exc
    m_num = Polynomial(np.concatenate([factor.inner, np.zeros(factor.zero_roots)])) * factor.gain
    ratio = TransferFunction(s_num * Polynomial(factor.den), S.den * m_num)
    return (h2_norm(ratio) ** 2 - 1.0) * P_d


def _quadrature(panels: int = 256, order: int = 16, levels: int = 48) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes on ``[0, pi]`` graded geometrically towards DC."""
    edges = list(np.pi * np.arange(1, panels + 1) / panels)
    first = np.pi / panels
    edges = [first * 2.0 ** (-j) for j in range(levels, 0, -1)] + edges
    edges = [0.0] + edges
    x, wts = leggauss(order)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(lo + half * (x + 1.0))
        weights.append(half * wts)
    return np.concatenate(nodes), np.concatenate(weights)


def limiting_variance_series(
    T: TransferFunction,
    S: TransferFunction,
    H: TransferFunction,
    P_d: float,
    rel_tol: float = 1e-6,
    max_terms: int = 100_000,
) -> float:
    """Partial sum of ``||HT||^2 P_d + P_d sum_{i>=1} ||T^i S||^2``.

    Each term is a quadrature of ``|T|^{2i} |S|^2`` over ``[0, pi]``; no
    spectral factor is involved. Near DC ``|T|`` tends to one, so the terms
    decay like a power of ``i`` rather than geometrically. The tail is
    estimated from the local power-law exponent; the partial sum is returned
    once that estimate falls below ``rel_tol`` of it.
    """
    if P_d == 0:
        return 0.0
    if not is_stable(T):
        raise UnstableSystem("series needs a stable T")
    if not gain_report(T).gain_condition:
        raise NotStringStable("series diverges: |T| >= 1 away from DC")
    w, wt = _quadrature()
    z = np.exp(1j * w)
    T_w = evaluate(T, z)
    T2 = np.abs(T_w) ** 2
    u = np.abs(evaluate(S, z)) ** 2
    total = float(np.dot(wt, np.abs(evaluate(H, z) * T_w) ** 2)) / np.pi
    terms = []
    for i in range(1, max_terms + 1):
        u = u * T2
        t = float(np.dot(wt, u)) / np.pi
        terms.append(t)
        total += t
        if t == 0.0:
            return total * P_d
        if i >= 16 and i % 16 == 0:
            prev = terms[i // 2 - 1]
            if prev <= t:
                continue
            p = np.log(prev / t) / np.log(2.0)
            tail = t * i / (p - 1.0) if p > 1.0 else np.inf
            if tail <= rel_tol * total:
                return total * P_d
    raise SlowConvergence(f"series not within rel_tol={rel_tol} after {max_terms} terms")
