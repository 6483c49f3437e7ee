"""Monte Carlo simulation of the platoon in physical coordinates.

Every vehicle runs its own closed loop on positions; the leader is noise-free
and follows a virtual reference. Noise for realization ``r`` and vehicle ``i``
comes from a Philox stream keyed by ``(master_seed, r, i)``, so any
realization can be regenerated alone and the ensemble does not depend on how
work is split across threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ShapeMismatch
from .lti import StateSpace
from .moments import MomentTrajectory
from .platoon import (
    LeaderKind,
    NoiseDistribution,
    PlatoonSpec,
    build_concatenated,
    build_vehicle_loop,
)

__all__ = [
    "Record",
    "SimulationPlan",
    "Realization",
    "EnsembleStats",
    "ValidationReport",
    "noise_stream",
    "simulate_realization",
    "simulate_xi",
    "run_ensemble",
    "validate_against_analytics",
    "THREADS_ENV",
]

THREADS_ENV = "STOCHPLATOON_THREADS"
CHUNK = 1000
_VEHICLE_BITS = 24
_MASK64 = (1 << 64) - 1


class Record(str, Enum):
    ERRORS_ONLY = "errors"
    FULL_STATE = "full"


@dataclass(frozen=True, eq=False)
class SimulationPlan:
    spec: PlatoonSpec
    realizations: int
    horizon: int
    master_seed: int
    record: Record = Record.ERRORS_ONLY
    chunk_size: int = CHUNK

    def __post_init__(self):
        if self.realizations < 1 or self.horizon < 1:
            raise ValueError("realizations and horizon must be at least 1")
        if not 0 <= self.master_seed <= _MASK64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.spec.N >= 1 << _VEHICLE_BITS:
            raise ValueError("too many vehicles for the stream key layout")
        object.__setattr__(self, "record", Record(self.record))


def noise_stream(master_seed: int, realization: int, vehicle: int) -> np.random.Generator:
    """Independent generator for one ``(realization, vehicle)`` pair.

    Vehicle slot 0 is reserved for the initial-condition draw.
    """
    key = [master_seed & _MASK64, ((realization << _VEHICLE_BITS) | vehicle) & _MASK64]
    return np.random.Generator(np.random.Philox(key=key))


def _draw(gen: np.random.Generator, dist: NoiseDistribution, P_d: float, size: int) -> np.ndarray:
    if P_d == 0.0:
        return np.zeros(size)
    if dist is NoiseDistribution.GAUSSIAN:
        return math.sqrt(P_d) * gen.standard_normal(size)
    if dist is NoiseDistribution.UNIFORM:
        a = math.sqrt(3.0 * P_d)
        return gen.uniform(-a, a, size)
    return math.sqrt(P_d) * (2.0 * gen.integers(0, 2, size) - 1.0)


@dataclass(frozen=True, eq=False)
class _Model:
    """Everything a realization needs, computed once per plan."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    h: float
    N: int
    cruise: np.ndarray  # (N+1, n) states at k = 0, leader first
    q: np.ndarray  # state drift per sample in cruise
    reference: np.ndarray  # leader reference r_0(k), k = -1 .. K-1
    xi_mean: np.ndarray
    xi_sqrt: np.ndarray | None
    prehistory: np.ndarray  # (N*n, N*n) maps xi(0) to stacked deviation x(-1)
    dist: NoiseDistribution
    P_d: float


def _cruise_states(ss: StateSpace, N: int, v: float) -> tuple[np.ndarray, np.ndarray, float]:
    """States of a platoon cruising at speed ``v`` with the leader at ``y_0(0) = 0``.

    In cruise ``x_i(k) = q k + s_i`` with ``(I - A) q = B v`` and
    ``(I - A) s_i = B C s_{i-1} - q``.
    """
    n = ss.n
    I_A = np.eye(n) - ss.A
    q = np.linalg.solve(I_A, ss.B[:, 0] * v)
    w = np.linalg.solve(I_A, q)
    # leader input offset c_0 chosen so that y_0(0) = 0
    c = float(ss.C[0] @ w)
    s = np.zeros((N + 1, n))
    s[0] = np.linalg.solve(I_A, ss.B[:, 0] * c - q)
    for i in range(1, N + 1):
        s[i] = np.linalg.solve(I_A, ss.B[:, 0] * float(ss.C[0] @ s[i - 1]) - q)
    return s, q, c


def _prehistory_map(ss: StateSpace, h: float, N: int) -> np.ndarray:
    """Linear map from ``xi(0)`` to follower deviations ``x_i(-1)``.

    Assumes the deviations were already evolving under the loop dynamics with
    ``d(-1) = 0`` and an unperturbed leader, so that
    ``xi_i(0) = D0 x_i(-1) + D1 x_{i-1}(-1) + D2 x_{i-2}(-1)``.
    """
    n = ss.n
    A, BC = ss.A, ss.B @ ss.C
    blocks = [h * np.eye(n) - (1.0 + h) * A, A - (1.0 + h) * BC, BC]
    L = np.zeros((N * n, N * n))
    for i in range(N):
        for lag, D in enumerate(blocks):
            j = i - lag
            if j >= 0:
                L[i * n : (i + 1) * n, j * n : (j + 1) * n] = D
    return np.linalg.inv(L)


def _build_model(spec: PlatoonSpec, horizon: int) -> _Model:
    loop = build_vehicle_loop(spec)
    ss = loop.T_ss
    leader = spec.leader
    v0 = leader.base_speed
    cruise, q, c0 = _cruise_states(ss, spec.N, v0)
    k = np.arange(-1, horizon, dtype=float)
    ref = v0 * k + c0
    if leader.kind is LeaderKind.PIECEWISE:
        dev = np.zeros(horizon + 1)
        dev[1:] = leader.reference_deviation(horizon)
        ref = ref + dev
    init = spec.initial_condition()
    sqrt_P = None
    if np.any(init.P_xi0):
        lam, V = np.linalg.eigh(init.P_xi0)
        sqrt_P = V * np.sqrt(np.clip(lam, 0.0, None))
    return _Model(
        A=np.array(ss.A),
        B=np.array(ss.B[:, 0]),
        C=np.array(ss.C[0]),
        h=spec.h,
        N=spec.N,
        cruise=cruise,
        q=q,
        reference=ref,
        xi_mean=np.array(init.mu_xi0),
        xi_sqrt=sqrt_P,
        prehistory=_prehistory_map(ss, spec.h, spec.N) if not init.is_zero() else np.zeros((0, 0)),
        dist=spec.noise_distribution,
        P_d=spec.P_d,
    )


def _matvec(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``M @ x`` over the last axis of ``X`` with a fixed summation order."""
    n = M.shape[0]
    out = np.zeros(X.shape)
    for a in range(n):
        acc = out[..., a]
        for b in range(n):
            if M[a, b] != 0.0:
                acc += M[a, b] * X[..., b]
    return out


def _dot(c: np.ndarray, X: np.ndarray) -> np.ndarray:
    out = np.zeros(X.shape[:-1])
    for b in range(c.size):
        if c[b] != 0.0:
            out += c[b] * X[..., b]
    return out


def _initial_states(model: _Model, xi0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Physical states at ``k = -1`` and ``k = 0`` for a batch of ``xi(0)``.

    ``xi0`` has shape ``(R, N*n)``; returns arrays of shape ``(R, N+1, n)``.
    """
    R = xi0.shape[0]
    n, N = model.A.shape[0], model.N
    base0 = np.broadcast_to(model.cruise, (R, N + 1, n))
    base_prev = base0 - model.q
    if model.prehistory.size == 0 or not np.any(xi0):
        return np.array(base_prev), np.array(base0)
    dev_prev = np.zeros((R, N + 1, n))
    flat = np.zeros((R, N * n))
    for a in range(N * n):
        row = model.prehistory[a]
        acc = flat[:, a]
        # block lower triangular with full diagonal blocks
        for b in range((a // n + 1) * n):
            if row[b] != 0.0:
                acc += row[b] * xi0[:, b]
    dev_prev[:, 1:] = flat.reshape(R, N, n)
    y_dev = _dot(model.C, dev_prev)
    dev0 = _matvec(model.A, dev_prev)
    dev0[:, 1:] += model.B * y_dev[:, :-1, None]
    return base_prev + dev_prev, base0 + dev0


@dataclass(frozen=True, eq=False)
class Realization:
    """Trajectories for ``k = 0 .. K-1``; index 0 along the vehicle axis is the leader."""

    y: np.ndarray  # (K, N+1)
    zeta: np.ndarray  # (K, N+1)
    e: np.ndarray  # (K, N+1)
    d: np.ndarray  # (K, N+1), column 0 is zero
    xi0: np.ndarray


def _sample_batch(model: _Model, plan: SimulationPlan, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
    K, N = plan.horizon, model.N
    R = stop - start
    d = np.zeros((R, K, N + 1))
    xi0 = np.broadcast_to(model.xi_mean, (R, model.xi_mean.size)).copy()
    for j, r in enumerate(range(start, stop)):
        if model.xi_sqrt is not None:
            z = noise_stream(plan.master_seed, r, 0).standard_normal(model.xi_mean.size)
            xi0[j] += model.xi_sqrt @ z
        for i in range(1, N + 1):
            d[j, :, i] = _draw(noise_stream(plan.master_seed, r, i), model.dist, model.P_d, K)
    return d, xi0


def _simulate_batch(model: _Model, d: np.ndarray, xi0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return positions and spacing errors, both ``(R, K, N+1)``."""
    R, K, _ = d.shape
    h = model.h
    x_prev, x = _initial_states(model, xi0)
    y_prev = _dot(model.C, x_prev)
    Y = np.empty((R, K, model.N + 1))
    Z = np.empty((R, K, model.N + 1))
    ref = model.reference
    for k in range(K):
        y = _dot(model.C, x)
        # predecessor signal: the reference for the leader, y_{i-1} for follower i
        pred = np.empty_like(y)
        pred[:, 0] = ref[k + 1]
        pred[:, 1:] = y[:, :-1]
        Y[:, k] = y
        Z[:, k] = pred - (1.0 + h) * y + h * y_prev
        u = pred + d[:, k]
        x_next = _matvec(model.A, x)
        x_next += model.B * u[:, :, None]
        x, y_prev = x_next, y
    return Y, Z


def simulate_realization(spec: PlatoonSpec, seed: int, horizon: int, realization: int = 0) -> Realization:
    """One realization of ``y_i``, ``zeta_i`` and ``e_i = zeta_i + d_i``."""
    plan = SimulationPlan(spec=spec, realizations=realization + 1, horizon=horizon, master_seed=seed)
    model = _build_model(spec, horizon)
    d, xi0 = _sample_batch(model, plan, realization, realization + 1)
    Y, Z = _simulate_batch(model, d, xi0)
    return Realization(y=Y[0], zeta=Z[0], e=Z[0] + d[0], d=d[0], xi0=xi0[0])


def simulate_xi(spec: PlatoonSpec, zeta0: np.ndarray, xi0: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Errors from the stacked xi recursion driven by given noise ``d`` of shape ``(K, N)``."""
    loop = build_vehicle_loop(spec)
    sys = build_concatenated(loop.T_ss, spec.h, spec.N)
    K = d.shape[0]
    Bo, Ba, Bb = sys.B_o[:, 0], sys.B_a, sys.B_b
    xi = np.array(xi0, dtype=float)
    out = np.zeros((K, spec.N))
    d_prev = np.zeros(spec.N)
    for k in range(K):
        out[k] = sys.output(xi)
        xi = sys.apply_A(xi) + Bo * zeta0[k] + Ba @ d[k] + Bb @ d_prev
        d_prev = d[k]
    return out


@dataclass
class _Moments:
    """Count, mean and central moment sums up to order four, merged exactly."""

    n: int
    mean: np.ndarray
    M2: np.ndarray
    M3: np.ndarray
    M4: np.ndarray

    @classmethod
    def of(cls, X: np.ndarray) -> _Moments:
        n = X.shape[0]
        mean = X.mean(axis=0)
        dev = X - mean
        d2 = dev * dev
        return cls(n, mean, d2.sum(axis=0), (d2 * dev).sum(axis=0), (d2 * d2).sum(axis=0))

    def merge(self, other: _Moments) -> _Moments:
        na, nb = self.n, other.n
        n = na + nb
        delta = other.mean - self.mean
        dn = delta / n
        mean = self.mean + nb * dn
        M2 = self.M2 + other.M2 + delta * dn * na * nb
        M3 = (
            self.M3
            + other.M3
            + delta * dn * dn * na * nb * (na - nb)
            + 3.0 * dn * (na * other.M2 - nb * self.M2)
        )
        M4 = (
            self.M4
            + other.M4
            + delta * dn**3 * na * nb * (na * na - na * nb + nb * nb)
            + 6.0 * dn * dn * (na * na * other.M2 + nb * nb * self.M2)
            + 4.0 * dn * (na * other.M3 - nb * self.M3)
        )
        return _Moments(n, mean, M2, M3, M4)


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    mu_hat: np.ndarray  # (K, N)
    P_hat: np.ndarray
    stderr_mu: np.ndarray
    stderr_P: np.ndarray
    R: int
    variance_defined: bool = True
    full_state: list[Realization] | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu_hat.shape

    def rows(self):
        """CSV rows ``(k, i, mu_hat, P_hat, stderr_mu, stderr_P)``."""
        K, N = self.shape
        for k in range(K):
            for i in range(N):
                yield k, i + 1, self.mu_hat[k, i], self.P_hat[k, i], self.stderr_mu[k, i], self.stderr_P[k, i]

    def full_state_rows(self):
        """CSV rows ``(realization, k, i, y, zeta, e)``; ``i = 0`` is the leader."""
        for r, real in enumerate(self.full_state or ()):
            K, M = real.y.shape
            for k in range(K):
                for i in range(M):
                    yield r, k, i, real.y[k, i], real.zeta[k, i], real.e[k, i]


def _finalize(m: _Moments) -> EnsembleStats:
    R = m.n
    if R < 2:
        zeros = np.zeros_like(m.mean)
        return EnsembleStats(m.mean, zeros, zeros.copy(), zeros.copy(), R, variance_defined=False)
    var = m.M2 / (R - 1)
    m4 = m.M4 / R
    var_of_var = (m4 - (R - 3) / (R - 1) * var * var) / R
    return EnsembleStats(
        mu_hat=m.mean,
        P_hat=var,
        stderr_mu=np.sqrt(var / R),
        stderr_P=np.sqrt(np.clip(var_of_var, 0.0, None)),
        R=R,
    )


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return min(8, os.cpu_count() or 1)


def run_ensemble(plan: SimulationPlan, threads: int | None = None) -> EnsembleStats:
    """Sample moments of ``zeta_1 .. zeta_N`` over ``plan.realizations`` runs.

    Realizations are processed in fixed-size chunks whose partial moments are
    merged in chunk order, so the output is the same for any thread count.
    """
    model = _build_model(plan.spec, plan.horizon)
    bounds = [
        (s, min(s + plan.chunk_size, plan.realizations)) for s in range(0, plan.realizations, plan.chunk_size)
    ]
    keep = plan.record is Record.FULL_STATE

    def work(span):
        d, xi0 = _sample_batch(model, plan, *span)
        Y, Z = _simulate_batch(model, d, xi0)
        reals = None
        if keep:
            reals = [Realization(Y[j], Z[j], Z[j] + d[j], d[j], xi0[j]) for j in range(Y.shape[0])]
        return _Moments.of(Z[:, :, 1:]), reals

    threads = threads or _thread_count()
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    total = parts[0][0]
    for m, _ in parts[1:]:
        total = total.merge(m)
    stats = _finalize(total)
    if keep:
        reals = [r for _, chunk in parts for r in chunk]
        stats = EnsembleStats(
            stats.mu_hat, stats.P_hat, stats.stderr_mu, stats.stderr_P, stats.R, stats.variance_defined, reals
        )
    return stats


@dataclass(frozen=True, eq=False)
class ValidationReport:
    z_mean: np.ndarray  # (K, N)
    rel_var: np.ndarray  # (K, N)
    mean_fraction: float
    stationary_rel_error: np.ndarray  # (N,) at the final k
    variance_ratio: float
    mean_band: float
    variance_band: float
    min_fraction: float

    @property
    def mean_ok(self) -> bool:
        return self.mean_fraction >= self.min_fraction

    @property
    def variance_ok(self) -> bool:
        return bool(np.all(self.stationary_rel_error <= self.variance_band))

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.variance_ok

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "mean_fraction_within_band": self.mean_fraction,
            "mean_band_stderr": self.mean_band,
            "min_fraction": self.min_fraction,
            "max_abs_z_mean": float(np.abs(self.z_mean).max(initial=0.0)),
            "stationary_variance_rel_error": [float(x) for x in self.stationary_rel_error],
            "variance_band": self.variance_band,
            "variance_ratio": self.variance_ratio,
        }


def validate_against_analytics(
    stats: EnsembleStats,
    traj: MomentTrajectory,
    mean_band: float = 4.0,
    variance_band: float = 0.05,
    min_fraction: float = 0.99,
    exact_tol: float = 1e-9,
) -> ValidationReport:
    """Compare an ensemble with exact moments cell by cell.

    Cells whose sample standard error is zero (deterministic cells, or a
    single realization) pass only if they match to ``exact_tol``.
    """
    P = traj.variances
    if stats.shape != traj.mu_zeta.shape:
        raise ShapeMismatch(f"ensemble shape {stats.shape} vs analytic {traj.mu_zeta.shape}")
    diff = stats.mu_hat - traj.mu_zeta
    scale = np.maximum(1.0, np.abs(traj.mu_zeta))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stats.stderr_mu > 0, diff / stats.stderr_mu, 0.0)
        rel = np.where(P > 0, (stats.P_hat - P) / P, 0.0)
    exact = stats.stderr_mu == 0
    inside = np.where(exact, np.abs(diff) <= exact_tol * scale, np.abs(z) <= mean_band)
    z = np.where(exact & ~inside, np.inf, z)
    final_P = P[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        stat_err = np.where(
            final_P > 0, np.abs(stats.P_hat[-1] - final_P) / final_P, np.abs(stats.P_hat[-1] - final_P)
        )
        ratio = stats.P_hat[-1][final_P > 0] / final_P[final_P > 0]
    return ValidationReport(
        z_mean=z,
        rel_var=rel,
        mean_fraction=float(inside.mean()) if inside.size else 1.0,
        stationary_rel_error=stat_err,
        variance_ratio=float(np.median(ratio)) if ratio.size else float("nan"),
        mean_band=mean_band,
        variance_band=variance_band,
        min_fraction=min_fraction,
    )
