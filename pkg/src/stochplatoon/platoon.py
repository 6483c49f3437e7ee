"""Homogeneous predecessor-following platoon over additive noise channels.

Builds the per-vehicle closed loop ``T = KG / (1 + KGH)``, the sensitivity
``S = 1 - HT``, and the concatenated error-coordinate system

    xi(k+1) = A xi(k) + B_o zeta_0(k) + B_a d(k) + B_b d(k-1)
    zeta(k) = C xi(k)

where ``xi_i = x_{i-1} - (1+h) x_i + h x_i(k-1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.linalg import block_diag

from .errors import AssumptionViolation, NotPSD
from .lti import (
    StateSpace,
    TransferFunction,
    close_loop,
    headway_filter,
    realize,
    sensitivity,
)

__all__ = [
    "NoiseDistribution",
    "LeaderKind",
    "LeaderProfile",
    "InitialCondition",
    "PlatoonSpec",
    "VehicleLoop",
    "ConcatenatedPlatoon",
    "build_vehicle_loop",
    "build_concatenated",
    "error_chain_tf",
    "leader_error",
    "count_integrators",
]

INTEGRATOR_TOL = 1e-6


class NoiseDistribution(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    RADEMACHER = "rademacher"


class LeaderKind(str, Enum):
    CONSTANT = "constant"
    PIECEWISE = "piecewise"


@dataclass(frozen=True)
class LeaderProfile:
    """Leader speed schedule.

    The leader starts in steady cruise at ``base_speed`` (position units per
    sample). Each ``(k, v)`` entry of ``speed_changes`` switches the virtual
    reference to speed ``v`` from sample ``k`` on. A constant profile keeps the
    leader in cruise, so its tracking error is identically zero.
    """

    kind: LeaderKind = LeaderKind.CONSTANT
    base_speed: float = 1.0
    speed_changes: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", LeaderKind(self.kind))
        changes = tuple(sorted((int(k), float(v)) for k, v in self.speed_changes))
        if any(k < 0 for k, _ in changes):
            raise ValueError("speed changes must happen at k >= 0")
        if self.kind is LeaderKind.CONSTANT and changes:
            raise ValueError("a constant-speed leader cannot have speed changes")
        object.__setattr__(self, "speed_changes", changes)

    def reference_deviation(self, horizon: int) -> np.ndarray:
        """Virtual reference minus the steady cruise ramp, for ``k < horizon``."""
        k = np.arange(horizon, dtype=float)
        r = np.zeros(horizon)
        v_prev = self.base_speed
        for kc, v in self.speed_changes:
            r += (v - v_prev) * np.maximum(0.0, k - kc)
            v_prev = v
        return r


@dataclass(frozen=True, eq=False)
class InitialCondition:
    """Mean and covariance of the stacked error state ``xi(0)``."""

    mu_xi0: np.ndarray
    P_xi0: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu_xi0, dtype=float).reshape(-1)
        P = np.asarray(self.P_xi0, dtype=float)
        if P.shape != (mu.size, mu.size):
            raise ValueError(f"P_xi0 must be {mu.size}x{mu.size}, got {P.shape}")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(P)):
            raise ValueError("initial condition must be finite")
        if np.abs(P - P.T).max(initial=0.0) > 1e-12:
            raise NotPSD("P_xi0 is not symmetric")
        if mu.size and np.linalg.eigvalsh(P).min() < -1e-10:
            raise NotPSD("P_xi0 has a negative eigenvalue")
        mu.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "mu_xi0", mu)
        object.__setattr__(self, "P_xi0", P)

    @classmethod
    def zero(cls, dim: int) -> InitialCondition:
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.mu_xi0.size

    def is_zero(self) -> bool:
        return not np.any(self.mu_xi0) and not np.any(self.P_xi0)


def count_integrators(t: TransferFunction, tol: float = INTEGRATOR_TOL) -> int:
    return int(np.sum(np.abs(t.poles() - 1.0) <= tol))


@dataclass(frozen=True, eq=False)
class PlatoonSpec:
    """Plant, controller, headway, platoon size, channel noise and scenario.

    ``init`` is expressed in the coordinates of :func:`realize` applied to
    ``T``; ``None`` means ``xi(0) = 0`` deterministically.
    """

    G: TransferFunction
    K: TransferFunction
    h: float
    N: int
    P_d: float = 0.0
    noise_distribution: NoiseDistribution = NoiseDistribution.GAUSSIAN
    leader: LeaderProfile = field(default_factory=LeaderProfile)
    init: InitialCondition | None = None

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h > 0 is the time headway constant")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        if not self.P_d >= 0:
            raise ValueError("P_d must be nonnegative")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "P_d", float(self.P_d))
        object.__setattr__(self, "noise_distribution", NoiseDistribution(self.noise_distribution))
        _check_assumptions(self.G, self.K, self.h)
        if self.init is not None:
            n = build_vehicle_loop(self).T_ss.n
            if self.init.dim != n * self.N:
                raise ValueError(f"initial condition must have dimension n*N = {n * self.N}")

    def initial_condition(self) -> InitialCondition:
        if self.init is not None:
            return self.init
        return InitialCondition.zero(build_vehicle_loop(self).T_ss.n * self.N)

    def replace(self, **changes) -> PlatoonSpec:
        kwargs = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kwargs.update(changes)
        return PlatoonSpec(**kwargs)


@dataclass(frozen=True, eq=False)
class VehicleLoop:
    T: TransferFunction
    S: TransferFunction
    H: TransferFunction
    T_ss: StateSpace
    h: float


def _check_assumptions(G: TransferFunction, K: TransferFunction, h: float) -> TransferFunction:
    if count_integrators(K * G) < 2:
        raise AssumptionViolation("1b", "K(z)G(z) needs at least two poles at z = 1 (double integral action)")
    T = close_loop(G, K, headway_filter(h))
    if not T.is_strictly_proper():
        raise AssumptionViolation("1a", "the closed loop T(z) must be strictly proper")
    return T


def build_vehicle_loop(spec: PlatoonSpec) -> VehicleLoop:
    return _vehicle_loop(spec.G, spec.K, spec.h)


def _vehicle_loop(G: TransferFunction, K: TransferFunction, h: float) -> VehicleLoop:
    T = _check_assumptions(G, K, h)
    H = headway_filter(h)
    return VehicleLoop(T=T, S=sensitivity(T, H), H=H, T_ss=realize(T), h=h)


@dataclass(frozen=True, eq=False)
class ConcatenatedPlatoon:
    """Stacked error-coordinate model of ``N`` followers.

    Dense matrices are built on first access; the propagation code uses
    :meth:`apply_A`, which exploits the block-bidiagonal structure.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    h: float
    N: int

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.n * self.N

    @property
    def lam(self) -> float:
        return -(1.0 + self.h)

    @cached_property
    def A_bold(self) -> np.ndarray:
        out = np.kron(np.eye(self.N), self.A)
        out += np.kron(np.eye(self.N, k=-1), self.B @ self.C)
        return out

    @cached_property
    def B_o(self) -> np.ndarray:
        out = np.zeros((self.dim, 1))
        out[: self.n] = self.B
        return out

    @cached_property
    def B_block(self) -> np.ndarray:
        return block_diag(*[self.B] * self.N)

    @cached_property
    def B_a(self) -> np.ndarray:
        return np.kron(self.lam * np.eye(self.N) + np.eye(self.N, k=-1), self.B)

    @cached_property
    def B_b(self) -> np.ndarray:
        return self.h * self.B_block

    @cached_property
    def C_bold(self) -> np.ndarray:
        return block_diag(*[self.C] * self.N)

    def spectral_radius(self) -> float:
        # block triangular: the spectrum is that of the diagonal blocks
        if self.n == 0:
            return 0.0
        return float(np.abs(np.linalg.eigvals(self.A)).max())

    def apply_A(self, X: np.ndarray) -> np.ndarray:
        """``A_bold @ X`` for ``X`` of shape ``(n*N, ...)``."""
        Xb = X.reshape((self.N, self.n) + X.shape[1:])
        out = np.einsum("ij,bj...->bi...", self.A, Xb)
        if self.N > 1:
            cx = np.einsum("j,bj...->b...", self.C[0], Xb[:-1])
            out[1:] += np.einsum("i,b...->bi...", self.B[:, 0], cx)
        return out.reshape(X.shape)

    def output(self, X: np.ndarray) -> np.ndarray:
        """``C_bold @ X``."""
        Xb = X.reshape((self.N, self.n) + X.shape[1:])
        return np.einsum("j,bj...->b...", self.C[0], Xb)

    def prefix(self, N: int) -> ConcatenatedPlatoon:
        return ConcatenatedPlatoon(self.A, self.B, self.C, self.h, N)


def build_concatenated(T_ss: StateSpace, h: float, N: int) -> ConcatenatedPlatoon:
    if N < 1:
        raise ValueError("N must be at least 1")
    if T_ss.D != 0.0:
        raise ValueError("the vehicle loop must be strictly proper (D = 0)")
    return ConcatenatedPlatoon(np.array(T_ss.A), np.array(T_ss.B), np.array(T_ss.C), float(h), int(N))


def error_chain_tf(
    T: TransferFunction, S: TransferFunction, H: TransferFunction, i: int
) -> list[tuple[str, TransferFunction]]:
    """Filters from ``(zeta_0, d_1, ..., d_i)`` to ``zeta_i``.

    ``zeta_0 -> T^i``, ``d_j -> T^{i-j} S`` for ``j < i``, ``d_i -> -H T``.
    """
    if i < 1:
        raise ValueError("vehicle index starts at 1")
    chain = [("zeta0", T**i)]
    for j in range(1, i):
        chain.append((f"d{j}", (T ** (i - j)) * S))
    chain.append((f"d{i}", -(H * T)))
    return chain


def leader_error(T_ss: StateSpace, h: float, leader: LeaderProfile, horizon: int) -> np.ndarray:
    """Leader tracking error ``zeta_0(k)`` for ``k < horizon``.

    Runs the leader's noise-free loop in deviation from steady cruise:
    ``x(k+1) = A x(k) + B r(k)``, ``zeta_0 = r - (1+h) y + h y(k-1)``.
    """
    r = leader.reference_deviation(horizon)
    zeta0 = np.zeros(horizon)
    if leader.kind is LeaderKind.CONSTANT or not np.any(r):
        return zeta0
    A, B, C = T_ss.A, T_ss.B[:, 0], T_ss.C[0]
    x = np.zeros(T_ss.n)
    y_prev = 0.0
    for k in range(horizon):
        y = C @ x
        zeta0[k] = r[k] - (1.0 + h) * y + h * y_prev
        y_prev = y
        x = A @ x + B * r[k]
    return zeta0
