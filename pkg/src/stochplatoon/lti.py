"""Discrete-time SISO LTI algebra: polynomials, rational transfer functions,
state-space realizations and system norms.

Polynomials are dense coefficient vectors in descending powers of ``z``.
Transfer functions are kept reduced (no common roots) with a monic
denominator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DegenerateLoop, EvaluationAtPole, NotProper, UnstableSystem
from .lyapunov import solve_stein

__all__ = [
    "CANCEL_TOL",
    "STABILITY_TOL",
    "Polynomial",
    "TransferFunction",
    "StateSpace",
    "FrequencyGrid",
    "tf",
    "evaluate",
    "series",
    "close_loop",
    "sensitivity",
    "realize",
    "spectral_radius",
    "is_stable",
    "peak_gain",
    "h_infinity_norm",
    "h2_norm",
    "headway_filter",
]

CANCEL_TOL = 1e-8
STABILITY_TOL = 1e-9
POLE_TOL = 1e-12


def _strip(coeffs: Iterable[float]) -> np.ndarray:
    c = np.atleast_1d(np.asarray(list(coeffs), dtype=float))
    if c.size == 0:
        return np.zeros(1)
    if not np.all(np.isfinite(c)):
        raise ValueError("polynomial coefficients must be finite")
    nz = np.flatnonzero(c)
    if nz.size == 0:
        return np.zeros(1)
    return c[nz[0]:]


@dataclass(frozen=True, eq=False)
class Polynomial:
    """Real polynomial in ``z``; ``coeffs[0]`` multiplies the highest power."""

    coeffs: tuple[float, ...]

    def __init__(self, coeffs: Iterable[float]):
        object.__setattr__(self, "coeffs", tuple(float(x) for x in _strip(coeffs)))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.coeffs)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def is_zero(self) -> bool:
        return self.coeffs == (0.0,)

    def __call__(self, z):
        return np.polyval(self.array, z)

    def __add__(self, other: Polynomial) -> Polynomial:
        return Polynomial(np.polyadd(self.array, other.array))

    def __sub__(self, other: Polynomial) -> Polynomial:
        return Polynomial(np.polysub(self.array, other.array))

    def __mul__(self, other: Polynomial | float) -> Polynomial:
        if isinstance(other, Polynomial):
            return Polynomial(np.polymul(self.array, other.array))
        return Polynomial(self.array * float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Polynomial:
        return Polynomial(-self.array)

    def __eq__(self, other) -> bool:
        return isinstance(other, Polynomial) and self.coeffs == other.coeffs

    def __hash__(self) -> int:
        return hash(self.coeffs)

    def roots(self) -> np.ndarray:
        if self.degree < 1:
            return np.zeros(0, dtype=complex)
        return np.roots(self.array).astype(complex)

    def deflate(self, factor: Sequence[float], rtol: float = 1e-8) -> Polynomial:
        """Exact division by ``factor``; raises if the remainder is not negligible."""
        q, r = np.polydiv(self.array, np.asarray(factor, dtype=float))
        if np.abs(r).max() > rtol * max(1.0, np.abs(self.array).max()):
            raise ArithmeticError(f"{factor} does not divide {self.coeffs}")
        return Polynomial(q)

    def reversed(self, degree: int | None = None) -> np.ndarray:
        """Coefficients of ``z**degree * p(1/z)``."""
        degree = self.degree if degree is None else degree
        padded = np.concatenate([np.zeros(degree - self.degree), self.array])
        return padded[::-1]


def _root_factor(r: complex, tol: float) -> np.ndarray | None:
    scale = max(1.0, abs(r))
    if abs(r.imag) <= tol * scale:
        return np.array([1.0, -r.real])
    if r.imag > 0:
        return np.array([1.0, -2.0 * r.real, abs(r) ** 2])
    return None


def _common_roots(a: np.ndarray, b: np.ndarray, tol: float) -> list[complex]:
    """Greedy pairing of roots of ``a`` and ``b`` closer than ``tol * max(1, |r|)``."""
    remaining = list(b)
    common = []
    for ra in sorted(a, key=lambda r: (r.real, r.imag)):
        if not remaining:
            break
        dist = [abs(ra - rb) for rb in remaining]
        j = int(np.argmin(dist))
        if dist[j] <= tol * max(1.0, abs(ra)):
            common.append(0.5 * (ra + remaining.pop(j)))
    return common


@dataclass(frozen=True, eq=False)
class TransferFunction:
    """Reduced rational function ``num(z)/den(z)`` with a monic denominator."""

    num: Polynomial
    den: Polynomial

    def __init__(self, num, den, reduce: bool = True):
        num = num if isinstance(num, Polynomial) else Polynomial(num)
        den = den if isinstance(den, Polynomial) else Polynomial(den)
        if den.is_zero():
            raise ZeroDivisionError("denominator is identically zero")
        if reduce:
            num, den = _reduce(num, den)
        lead = den.coeffs[0]
        object.__setattr__(self, "num", Polynomial(num.array / lead))
        object.__setattr__(self, "den", Polynomial(den.array / lead))

    # construction helpers -------------------------------------------------
    @classmethod
    def constant(cls, value: float) -> TransferFunction:
        return cls([value], [1.0])

    @classmethod
    def from_dict(cls, data: dict) -> TransferFunction:
        return cls(data["num"], data["den"])

    def to_dict(self) -> dict:
        return {"num": list(self.num.coeffs), "den": list(self.den.coeffs)}

    # properties --------------------------------------------------------------
    @property
    def relative_degree(self) -> int:
        if self.num.is_zero():
            return self.den.degree + 1
        return self.den.degree - self.num.degree

    def is_proper(self) -> bool:
        return self.relative_degree >= 0

    def is_strictly_proper(self) -> bool:
        return self.relative_degree >= 1

    def poles(self) -> np.ndarray:
        return self.den.roots()

    def zeros(self) -> np.ndarray:
        return self.num.roots()

    def __call__(self, z):
        return evaluate(self, z)

    # algebra -----------------------------------------------------------------
    def __mul__(self, other) -> TransferFunction:
        other = _as_tf(other)
        return TransferFunction(self.num * other.num, self.den * other.den)

    __rmul__ = __mul__

    def __add__(self, other) -> TransferFunction:
        other = _as_tf(other)
        return TransferFunction(self.num * other.den + other.num * self.den, self.den * other.den)

    __radd__ = __add__

    def __neg__(self) -> TransferFunction:
        return TransferFunction(-self.num, self.den, reduce=False)

    def __sub__(self, other) -> TransferFunction:
        return self + (-_as_tf(other))

    def __rsub__(self, other) -> TransferFunction:
        return _as_tf(other) - self

    def __truediv__(self, other) -> TransferFunction:
        other = _as_tf(other)
        if other.num.is_zero():
            raise ZeroDivisionError("division by the zero transfer function")
        return TransferFunction(self.num * other.den, self.den * other.num)

    def __pow__(self, k: int) -> TransferFunction:
        out = TransferFunction.constant(1.0)
        for _ in range(int(k)):
            out = out * self
        return out

    def __repr__(self) -> str:
        return f"TransferFunction(num={list(self.num.coeffs)}, den={list(self.den.coeffs)})"


def _as_tf(x) -> TransferFunction:
    if isinstance(x, TransferFunction):
        return x
    return TransferFunction.constant(float(x))


def _reduce(num: Polynomial, den: Polynomial, tol: float = CANCEL_TOL) -> tuple[Polynomial, Polynomial]:
    if num.is_zero():
        return Polynomial([0.0]), Polynomial([1.0])
    if num.degree == 0 or den.degree == 0:
        return num, den
    for r in _common_roots(num.roots(), den.roots(), tol):
        factor = _root_factor(r, tol)
        if factor is None:
            continue
        num = Polynomial(np.polydiv(num.array, factor)[0])
        den = Polynomial(np.polydiv(den.array, factor)[0])
    return num, den


def tf(num: Sequence[float], den: Sequence[float]) -> TransferFunction:
    return TransferFunction(num, den)


def headway_filter(h: float) -> TransferFunction:
    """Feedback path of the constant time headway policy, ``(1+h) - h/z``."""
    return TransferFunction([1.0 + h, -h], [1.0, 0.0])


# ----------------------------------------------------------------------------
# state space


@dataclass(frozen=True, eq=False)
class StateSpace:
    """SISO realization ``x+ = A x + B u``, ``y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        A = np.zeros((0, 0)) if A.size == 0 else np.atleast_2d(A)
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, 1)
        C = np.asarray(self.C, dtype=float).reshape(1, n)
        if A.shape != (n, n):
            raise ValueError("A must be square")
        for name, val in (("A", A), ("B", B), ("C", C)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "D", float(self.D))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def frequency_response(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        if self.n == 0:
            return np.full(z.shape, self.D, dtype=complex)
        eye = np.eye(self.n)
        out = np.empty(z.shape, dtype=complex)
        for k, zk in enumerate(z):
            out[k] = (self.C @ np.linalg.solve(zk * eye - self.A, self.B))[0, 0] + self.D
        return out

    def to_tf(self) -> TransferFunction:
        if self.n == 0:
            return TransferFunction.constant(self.D)
        den = np.poly(self.A)
        # det(zI - A + BC) = det(zI - A) (1 + C (zI-A)^{-1} B)
        num = np.polysub(np.poly(self.A - self.B @ self.C), den)
        num = np.polyadd(num, self.D * den)
        num[np.abs(num) <= 1e-12 * np.abs(den).max()] = 0.0
        return TransferFunction(num, den)


def realize(t: TransferFunction) -> StateSpace:
    """Controllable canonical realization; minimal because ``t`` is reduced."""
    if not t.is_proper():
        raise NotProper(f"numerator degree {t.num.degree} exceeds denominator degree {t.den.degree}")
    den = t.den.array
    n = t.den.degree
    num = np.concatenate([np.zeros(n + 1 - len(t.num.coeffs)), t.num.array])
    D = num[0]
    rest = num[1:] - D * den[1:]
    if n == 0:
        return StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), D)
    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -den[1:][::-1]
    B = np.zeros((n, 1))
    B[-1, 0] = 1.0
    C = rest[::-1].reshape(1, n)
    return StateSpace(A, B, C, D)


def spectral_radius(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvals(M)).max())


def is_stable(t: TransferFunction, tol: float = STABILITY_TOL) -> bool:
    p = t.poles()
    return bool(p.size == 0 or np.abs(p).max() < 1.0 - tol)


def _require_stable(t: TransferFunction) -> None:
    if not is_stable(t):
        rho = float(np.abs(t.poles()).max())
        raise UnstableSystem(f"pole modulus {rho:.6g} is not inside the unit circle")


def evaluate(t: TransferFunction, z):
    """``num(z)/den(z)``; raises :class:`EvaluationAtPole` at a pole."""
    z_arr = np.asarray(z, dtype=complex)
    den = t.den(z_arr)
    scale = np.maximum(1.0, np.abs(z_arr)) ** t.den.degree
    if np.any(np.abs(den) < POLE_TOL * scale):
        raise EvaluationAtPole(f"z={z} is a pole")
    out = t.num(z_arr) / den
    return complex(out) if np.ndim(out) == 0 else out


def series(a: TransferFunction, b: TransferFunction) -> TransferFunction:
    return a * b


def close_loop(G: TransferFunction, K: TransferFunction, H: TransferFunction) -> TransferFunction:
    """``K G / (1 + K G H)``."""
    L = K * G
    num = L.num * H.den
    den = L.den * H.den + L.num * H.num
    if den.is_zero():
        raise DegenerateLoop("1 + K G H vanishes identically")
    return TransferFunction(num, den)


def sensitivity(T: TransferFunction, H: TransferFunction) -> TransferFunction:
    """``1 - H T``."""
    return 1.0 - H * T


# ----------------------------------------------------------------------------
# frequency grids and norms


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Uniform grid on ``[0, pi]``; ``omega[0] == 0`` is the DC point."""

    omega: np.ndarray

    @classmethod
    def uniform(cls, count: int = 2**16) -> FrequencyGrid:
        if count < 1:
            raise ValueError("grid needs at least one positive frequency")
        w = np.pi * np.arange(count + 1) / count
        w.setflags(write=False)
        return cls(w)

    @property
    def count(self) -> int:
        return len(self.omega) - 1

    @property
    def positive(self) -> np.ndarray:
        return self.omega[1:]

    @property
    def z(self) -> np.ndarray:
        return np.exp(1j * self.omega)


def _golden_refine(f, grid: np.ndarray, j: int) -> tuple[float, float]:
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, len(grid) - 1)]
    if hi <= lo:
        return float(grid[j]), float(f(grid[j]))
    res = minimize_scalar(lambda w: -f(w), bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    if -res.fun >= f(grid[j]):
        return float(res.x), float(-res.fun)
    return float(grid[j]), float(f(grid[j]))


def peak_gain(t: TransferFunction, grid: FrequencyGrid | None = None, exclude_dc: bool = False) -> tuple[float, float]:
    """``(max |t(e^{jw})|, argmax)`` over the grid with golden-section refinement."""
    grid = grid or FrequencyGrid.uniform()
    w = grid.positive if exclude_dc else grid.omega
    mag = np.abs(evaluate(t, np.exp(1j * w)))
    j = int(np.argmax(mag))
    return_w, return_val = _golden_refine(lambda x: abs(evaluate(t, np.exp(1j * x))), w, j)
    return return_val, return_w


def h_infinity_norm(t: TransferFunction, grid: FrequencyGrid | None = None) -> float:
    # real coefficients: |t| is even in omega, so [0, pi] covers [0, 2 pi]
    _require_stable(t)
    return peak_gain(t, grid)[0]


def h2_norm(t: TransferFunction) -> float:
    """``sqrt(D^2 + B^T Q B)`` with ``Q = A^T Q A + C^T C``."""
    _require_stable(t)
    ss = realize(t)
    if ss.n == 0:
        return abs(ss.D)
    Q = solve_stein(ss.A.T, ss.C.T @ ss.C)
    return float(np.sqrt(ss.D**2 + (ss.B.T @ Q @ ss.B)[0, 0]))
