"""Exact propagation of the first two moments of the platoon errors.

Mean:        mu(k+1) = A mu(k) + B_o zeta_0(k)
Covariance:  P(1)    = A P(0) A^T + B_a P_d B_a^T
             P(k+1)  = A P(k) A^T + Upsilon          (k > 0)

``Upsilon`` carries the extra terms from ``d(k-1)`` entering the state a
second time through ``B_b``; the noise is taken to start at ``k = 0``, so
the first step has no such term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotMSS, NotPSD
from .lyapunov import solve_stein
from .platoon import ConcatenatedPlatoon, InitialCondition
from .lti import STABILITY_TOL

__all__ = [
    "MomentTrajectory",
    "StationaryMoments",
    "build_upsilon",
    "propagate_mean",
    "propagate_covariance",
    "propagate",
    "stationary_covariance",
    "iterate_to_stationarity",
]

SYM_TOL = 1e-10
PSD_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class MomentTrajectory:
    """Moments for ``k = 0 .. horizon-1``.

    ``P_xi`` is ``None`` when the caller asked not to keep the state
    covariances (they dominate memory for long horizons).
    """

    mu_xi: np.ndarray  # (K, nN)
    mu_zeta: np.ndarray  # (K, N)
    P_xi: np.ndarray | None  # (K, nN, nN)
    P_zeta: np.ndarray  # (K, N, N)

    @property
    def horizon(self) -> int:
        return self.mu_zeta.shape[0]

    @property
    def N(self) -> int:
        return self.mu_zeta.shape[1]

    @property
    def variances(self) -> np.ndarray:
        """Per-vehicle scalar variances, shape ``(K, N)``."""
        return np.diagonal(self.P_zeta, axis1=1, axis2=2).copy()


@dataclass(frozen=True, eq=False)
class StationaryMoments:
    mu_zeta_inf: np.ndarray
    P_zeta_inf: np.ndarray
    P_xi_inf: np.ndarray

    @property
    def per_vehicle_variance(self) -> np.ndarray:
        return np.diag(self.P_zeta_inf).copy()


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _sandwich(sys: ConcatenatedPlatoon, P: np.ndarray) -> np.ndarray:
    """``A P A^T`` using the block structure of ``A``."""
    AP = sys.apply_A(P)
    return sys.apply_A(AP.T).T


def _output_cov(sys: ConcatenatedPlatoon, P: np.ndarray) -> np.ndarray:
    CP = sys.output(P)
    return sys.output(CP.T).T


def build_upsilon(sys: ConcatenatedPlatoon, P_d: float) -> np.ndarray:
    Ba, Bb = sys.B_a, sys.B_b
    ABa = sys.apply_A(Ba)
    cross = ABa @ Bb.T
    U = P_d * (Ba @ Ba.T + Bb @ Bb.T + cross + cross.T)
    return _sym(U)


def propagate_mean(
    sys: ConcatenatedPlatoon, zeta0: np.ndarray, mu_xi0: np.ndarray, horizon: int
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(mu_xi, mu_zeta)`` of shapes ``(K, nN)`` and ``(K, N)``."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    zeta0 = np.asarray(zeta0, dtype=float)
    if zeta0.size < horizon:
        zeta0 = np.concatenate([zeta0, np.zeros(horizon - zeta0.size)])
    mu = np.zeros((horizon, sys.dim))
    x = np.asarray(mu_xi0, dtype=float).copy()
    Bo = sys.B_o[:, 0]
    for k in range(horizon):
        mu[k] = x
        x = sys.apply_A(x) + Bo * zeta0[k]
    return mu, sys.output(mu.T).T


def _check_psd(P: np.ndarray) -> None:
    if P.size == 0:
        return
    if np.abs(P - P.T).max() > 1e-12 * max(1.0, np.abs(P).max()):
        raise NotPSD("initial covariance is not symmetric")
    lam = np.linalg.eigvalsh(_sym(P))
    if lam.min() < -PSD_TOL * max(1.0, np.trace(P)):
        raise NotPSD(f"initial covariance has eigenvalue {lam.min():.3g}")


def propagate_covariance(
    sys: ConcatenatedPlatoon, P_xi0: np.ndarray, P_d: float, horizon: int, keep_state: bool = True
) -> tuple[np.ndarray | None, np.ndarray]:
    """Return ``(P_xi, P_zeta)``; ``P_xi`` is ``None`` unless ``keep_state``."""
    P = np.array(P_xi0, dtype=float)
    _check_psd(P)
    first = P_d * (sys.B_a @ sys.B_a.T)
    upsilon = build_upsilon(sys, P_d)
    P_xi = np.zeros((horizon, sys.dim, sys.dim)) if keep_state else None
    P_zeta = np.zeros((horizon, sys.N, sys.N))
    for k in range(horizon):
        if keep_state:
            P_xi[k] = P
        P_zeta[k] = _output_cov(sys, P)
        P = _sym(_sandwich(sys, P) + (first if k == 0 else upsilon))
    return P_xi, P_zeta


def propagate(
    sys: ConcatenatedPlatoon,
    zeta0: np.ndarray,
    init: InitialCondition,
    P_d: float,
    horizon: int,
    keep_state: bool = False,
) -> MomentTrajectory:
    mu_xi, mu_zeta = propagate_mean(sys, zeta0, init.mu_xi0, horizon)
    P_xi, P_zeta = propagate_covariance(sys, init.P_xi0, P_d, horizon, keep_state=keep_state)
    return MomentTrajectory(mu_xi=mu_xi, mu_zeta=mu_zeta, P_xi=P_xi, P_zeta=P_zeta)


def _require_mss(sys: ConcatenatedPlatoon) -> float:
    rho = sys.spectral_radius()
    if rho >= 1.0 - STABILITY_TOL:
        raise NotMSS(f"spectral radius {rho:.6g} >= 1: moments do not converge")
    return rho


def stationary_covariance(sys: ConcatenatedPlatoon, P_d: float) -> StationaryMoments:
    """Solve ``P = A P A^T + Upsilon`` by doubling and map it to the errors."""
    _require_mss(sys)
    P_xi = solve_stein(sys.A_bold, build_upsilon(sys, P_d))
    return StationaryMoments(
        mu_zeta_inf=np.zeros(sys.N),
        P_zeta_inf=_sym(_output_cov(sys, P_xi)),
        P_xi_inf=P_xi,
    )


def iterate_to_stationarity(
    sys: ConcatenatedPlatoon,
    P_d: float,
    P_xi0: np.ndarray | None = None,
    rtol: float = 1e-10,
    max_steps: int = 1_000_000,
) -> tuple[np.ndarray, int]:
    """Run the covariance recursion until ``P_zeta`` stops changing.

    Stops when ``||P_zeta(k+1) - P_zeta(k)||_inf < rtol * max(1, ||P_zeta(k)||_inf)``.
    Returns ``(P_zeta, k)``.
    """
    _require_mss(sys)
    P = np.zeros((sys.dim, sys.dim)) if P_xi0 is None else np.array(P_xi0, dtype=float)
    first = P_d * (sys.B_a @ sys.B_a.T)
    upsilon = build_upsilon(sys, P_d)
    Pz = _output_cov(sys, P)
    for k in range(max_steps):
        P = _sym(_sandwich(sys, P) + (first if k == 0 else upsilon))
        Pz_new = _output_cov(sys, P)
        delta = np.abs(Pz_new - Pz).max()
        if k > 0 and delta < rtol * max(1.0, np.abs(Pz).max()):
            return _sym(Pz_new), k + 1
        Pz = Pz_new
    raise NotMSS("covariance recursion did not settle")


def convergence_horizon(rho: float, level: float = 1e-9) -> int:
    return math.ceil(math.log(level) / math.log(rho))


def trajectory_rows(traj: MomentTrajectory):
    """CSV rows ``(k, i, mu_zeta_i, P_zeta_ii)`` with ``i`` starting at 1."""
    var = traj.variances
    for k in range(traj.horizon):
        for i in range(traj.N):
            yield k, i + 1, traj.mu_zeta[k, i], var[k, i]
