"""String-stability verdicts, norm checks and class-K bound constants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EvaluationAtPole, HorizonTooShort, NotMSS, NotStringStable
from .lti import STABILITY_TOL, FrequencyGrid, TransferFunction, h_infinity_norm
from .lyapunov import solve_stein
from .moments import MomentTrajectory
from .platoon import PlatoonSpec, VehicleLoop, build_concatenated, build_vehicle_loop, leader_error
from .spectral import GainReport, SpectralFactor, gain_report, limiting_variance, spectral_factorize

__all__ = [
    "Verdict",
    "NormReport",
    "MeanBound",
    "VarianceBound",
    "certify",
    "certify_loop",
    "mean_bound",
    "variance_bound",
    "check_definition1",
    "check_definition2",
    "sequence_trend",
]


@dataclass(frozen=True)
class Verdict:
    rho_A: float
    mss: bool
    gain_condition: bool
    hinf_leq_one: bool
    string_stable: bool
    limiting_mean: float | None
    limiting_variance: float | None
    worst_frequency: float
    max_gain: float
    # not part of the stability theory, reported for sweeps
    margin: float
    normalized_margin: float

    def to_dict(self) -> dict:
        return asdict(self)


def _unknown_gain() -> GainReport:
    nan = float("nan")
    return GainReport(
        max_gain=math.inf,
        worst_frequency=nan,
        margin=-math.inf,
        normalized_margin=-math.inf,
        gain_condition=False,
        hinf_leq_one=False,
        hinf=math.inf,
    )


def certify_loop(
    T: TransferFunction,
    S: TransferFunction | None = None,
    P_d: float = 0.0,
    grid: FrequencyGrid | None = None,
) -> Verdict:
    """Verdict for a bare vehicle loop ``T``; ``S`` is needed only for the limit."""
    poles = T.poles()
    rho = float(np.abs(poles).max()) if poles.size else 0.0
    mss = rho < 1.0 - STABILITY_TOL
    try:
        report = gain_report(T, grid)
    except EvaluationAtPole:
        report = _unknown_gain()
    stable = bool(mss and report.gain_condition)
    limit = None
    if stable and S is not None:
        limit = limiting_variance(S, spectral_factorize(T), P_d, grid)
    return Verdict(
        rho_A=float(rho),
        mss=bool(mss),
        gain_condition=report.gain_condition,
        hinf_leq_one=report.hinf_leq_one,
        string_stable=stable,
        limiting_mean=0.0 if stable else None,
        limiting_variance=limit,
        worst_frequency=report.worst_frequency,
        max_gain=report.max_gain,
        margin=report.margin,
        normalized_margin=report.normalized_margin,
    )


def certify(spec: PlatoonSpec, grid: FrequencyGrid | None = None) -> Verdict:
    loop = build_vehicle_loop(spec)
    return certify_loop(loop.T, loop.S, spec.P_d, grid)


@dataclass(frozen=True)
class MeanBound:
    alpha1: float
    beta1: float

    @property
    def total(self) -> float:
        return self.alpha1 + self.beta1


@dataclass(frozen=True)
class VarianceBound:
    alpha2: float
    beta2: float

    @property
    def total(self) -> float:
        return self.alpha2 + self.beta2


def observability_gramians(A: np.ndarray, C: np.ndarray) -> list[np.ndarray]:
    """``W_i = A^T W_i A + c_i^T c_i`` for every row ``c_i`` of ``C``."""
    return [solve_stein(A.T, np.outer(c, c)) for c in C]


def mean_bound(spec: PlatoonSpec, horizon: int, loop: VehicleLoop | None = None) -> MeanBound:
    """``alpha1 = ||T||_inf ||zeta_0||_L2`` and ``beta1 = ||mu_xi(0)|| max_i sqrt(rho(W_i))``."""
    loop = loop or build_vehicle_loop(spec)
    sys = build_concatenated(loop.T_ss, spec.h, spec.N)
    if sys.spectral_radius() >= 1.0 - STABILITY_TOL:
        raise NotMSS("mean bound needs rho(A) < 1")
    zeta0 = leader_error(loop.T_ss, spec.h, spec.leader, horizon)
    alpha1 = h_infinity_norm(loop.T) * float(np.linalg.norm(zeta0))
    mu0 = spec.initial_condition().mu_xi0
    beta1 = 0.0
    if np.any(mu0):
        grams = observability_gramians(sys.A_bold, sys.C_bold)
        worst = max(float(np.linalg.eigvalsh(W)[-1]) for W in grams)
        beta1 = float(np.linalg.norm(mu0)) * math.sqrt(max(worst, 0.0))
    return MeanBound(alpha1=alpha1, beta1=beta1)


def variance_bound(
    spec: PlatoonSpec,
    loop: VehicleLoop | None = None,
    factor: SpectralFactor | None = None,
    grid: FrequencyGrid | None = None,
) -> VarianceBound:
    """``alpha2 = sigma_max(P_xi(0)) ||C||_2`` and ``beta2`` the limiting variance."""
    loop = loop or build_vehicle_loop(spec)
    verdict = certify_loop(loop.T, None, spec.P_d, grid)
    if not verdict.string_stable:
        raise NotStringStable("variance bound needs a string-stable platoon")
    factor = factor or spectral_factorize(loop.T)
    P0 = spec.initial_condition().P_xi0
    sigma = float(np.linalg.norm(P0, 2)) if P0.size else 0.0
    alpha2 = sigma * float(np.linalg.norm(loop.T_ss.C, 2))
    beta2 = limiting_variance(loop.S, factor, spec.P_d, grid)
    return VarianceBound(alpha2=alpha2, beta2=beta2)


def sequence_trend(values: np.ndarray, start: int = 10) -> str:
    """``"convergent"`` if the step sizes shrink monotonically from ``start`` on,
    ``"increasing"`` if the sequence rises with nonshrinking steps, else ``"mixed"``."""
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        return "mixed"
    steps = np.abs(np.diff(v))
    tail = steps[min(start, steps.size - 2) :] if steps.size > 2 else steps
    if np.all(np.diff(v) > 0) and steps[-1] >= steps[steps.size // 2]:
        return "increasing"
    if np.all(np.diff(tail) <= 0):
        return "convergent"
    return "mixed"


@dataclass(frozen=True, eq=False)
class NormReport:
    mean_l2: np.ndarray
    var_linf: np.ndarray
    bound_mean: float | None
    bound_variance: float | None
    satisfied: np.ndarray
    tail_ratio: float
    mean_trend: str
    variance_trend: str
    # diagnostic only; the bound checks use (p, q) = (2, inf)
    mean_linf: np.ndarray

    def rows(self):
        """``(i, mean_l2, bound_mean, var_linf, bound_variance, satisfied)``."""
        for i in range(self.mean_l2.size):
            yield (
                i + 1,
                self.mean_l2[i],
                self.bound_mean,
                self.var_linf[i],
                self.bound_variance,
                None if self.bound_mean is None else bool(self.satisfied[i]),
            )


def check_definition1(
    traj: MomentTrajectory,
    rho: float,
    bounds: tuple[MeanBound, VarianceBound] | None = None,
    tol: float = 1e-6,
) -> NormReport:
    """Per-vehicle ``||mu||_L2`` and ``||P||_Linf`` over the horizon, against bounds.

    The neglected part of the L2 sum past the horizon is extrapolated
    geometrically with ratio ``rho``; ``HorizonTooShort`` is raised when it
    exceeds ``tol`` of the partial norm.
    """
    mu = traj.mu_zeta
    sq = np.sum(mu**2, axis=0)
    mean_l2 = np.sqrt(sq)
    if not 0.0 <= rho < 1.0:
        raise NotMSS("per-vehicle norms need rho(A) < 1")
    last = mu[-1] ** 2 if traj.horizon else np.zeros(traj.N)
    tail_sq = last * rho**2 / (1.0 - rho**2)
    extended = np.sqrt(sq + tail_sq)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(mean_l2 > 0, (extended - mean_l2) / mean_l2, 0.0)
    tail_ratio = float(ratio.max(initial=0.0))
    if tail_ratio > tol:
        raise HorizonTooShort(f"L2 tail estimate {tail_ratio:.3g} exceeds {tol:g}; extend the horizon")
    var_linf = traj.variances.max(axis=0) if traj.horizon else np.zeros(traj.N)
    bound_mean = bound_var = None
    satisfied = np.ones(traj.N, dtype=bool)
    if bounds is not None:
        bound_mean, bound_var = bounds[0].total, bounds[1].total
        slack = 1e-12
        satisfied = (mean_l2 <= bound_mean * (1 + slack) + slack) & (var_linf <= bound_var * (1 + slack) + slack)
    return NormReport(
        mean_l2=mean_l2,
        var_linf=var_linf,
        bound_mean=bound_mean,
        bound_variance=bound_var,
        satisfied=satisfied,
        tail_ratio=tail_ratio,
        mean_trend=sequence_trend(mean_l2),
        variance_trend=sequence_trend(var_linf),
        mean_linf=np.abs(mu).max(axis=0) if traj.horizon else np.zeros(traj.N),
    )


def check_definition2(spec: PlatoonSpec, grid: FrequencyGrid | None = None) -> tuple[float, float]:
    """Double limits ``(M1, M2)`` of the last vehicle's mean and variance."""
    verdict = certify(spec, grid)
    if not verdict.string_stable:
        raise NotStringStable("double limits do not exist without string stability")
    return 0.0, float(verdict.limiting_variance)
