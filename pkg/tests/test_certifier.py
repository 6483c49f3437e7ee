import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from stochplatoon.certifier import (
    certify,
    certify_loop,
    check_definition1,
    check_definition2,
    mean_bound,
    observability_gramians,
    sequence_trend,
    variance_bound,
)
from stochplatoon.errors import HorizonTooShort, NotStringStable
from stochplatoon.lti import FrequencyGrid, tf
from stochplatoon.moments import propagate
from stochplatoon.platoon import InitialCondition, LeaderProfile, PlatoonSpec, build_concatenated, build_vehicle_loop, leader_error

from conftest import example_spec, lead_controller, plant

LIMIT_H32 = 2.292676644389


def _trajectory(spec, horizon):
    loop = build_vehicle_loop(spec)
    sys = build_concatenated(loop.T_ss, spec.h, spec.N)
    z0 = leader_error(loop.T_ss, spec.h, spec.leader, horizon)
    return loop, sys, propagate(sys, z0, spec.initial_condition(), spec.P_d, horizon)


def test_stable_example_verdict():
    v = certify(example_spec(3.2))
    assert v.mss and v.gain_condition and v.hinf_leq_one and v.string_stable
    assert v.limiting_mean == 0.0
    assert abs(v.limiting_variance - LIMIT_H32) < 1e-9
    assert abs(v.rho_A - 0.5274173834874163) < 1e-12


def test_unstable_example_verdict():
    v = certify(example_spec(2.4))
    assert v.mss and not v.gain_condition and not v.string_stable
    assert v.limiting_variance is None and v.limiting_mean is None
    assert v.max_gain > 1.15 and 0.5 < v.worst_frequency < 0.7
    d = v.to_dict()
    assert d["string_stable"] is False and set(d) >= {"rho_A", "margin", "normalized_margin"}


def test_loop_that_is_not_mean_square_stable():
    h = 3.2
    spec = PlatoonSpec(plant(), lead_controller(h, gain=13.5), h, 3, 0.6)
    v = certify(spec)
    assert not v.mss and not v.string_stable and v.rho_A > 1.0


def test_all_pass_loop_passes_hinf_but_not_gain_condition():
    # |T| = 1 on the whole circle while T(1) = 1
    T = tf([-0.5, 1.0], [1.0, -0.5, 0.0])
    v = certify_loop(T)
    assert v.hinf_leq_one and not v.gain_condition and not v.string_stable


def test_scalar_gramian():
    (W,) = observability_gramians(np.array([[0.6]]), np.array([[1.0]]))
    assert abs(W[0, 0] - 1.5625) < 1e-14
    assert abs(math.sqrt(W[0, 0]) - 1.25) < 1e-14


def test_gramians_match_output_energy(stable_loop):
    sys = build_concatenated(stable_loop.T_ss, 3.2, 3)
    x0 = np.random.default_rng(1).normal(size=sys.dim)
    x, energy = x0.copy(), np.zeros(3)
    for _ in range(400):
        energy += (sys.C_bold @ x) ** 2
        x = sys.A_bold @ x
    grams = observability_gramians(sys.A_bold, sys.C_bold)
    assert np.allclose(energy, [x0 @ W @ x0 for W in grams], rtol=1e-10)


def test_bounds_from_zero_initial_condition():
    spec = example_spec(3.2, leader=LeaderProfile())
    mb = mean_bound(spec, 100)
    vb = variance_bound(spec)
    assert mb.total == 0.0
    assert vb.alpha2 == 0.0 and abs(vb.beta2 - LIMIT_H32) < 1e-9


def test_variance_bound_requires_string_stability():
    with pytest.raises(NotStringStable):
        variance_bound(example_spec(2.4))


def test_stable_example_norms_stay_under_bounds():
    spec = example_spec(3.2, N=8)
    loop, sys, traj = _trajectory(spec, 1200)
    bounds = (mean_bound(spec, 1200, loop), variance_bound(spec, loop))
    rep = check_definition1(traj, sys.spectral_radius(), bounds)
    assert np.all(rep.satisfied)
    assert np.all(np.diff(rep.mean_l2) < 0) and rep.mean_trend == "convergent"
    assert np.all(np.diff(rep.var_linf) > 0) and rep.var_linf[-1] < LIMIT_H32
    assert [r[0] for r in rep.rows()] == list(range(1, 9))


def test_unstable_example_norms_grow():
    spec = example_spec(2.4, N=20)
    _, sys, traj = _trajectory(spec, 1500)
    rep = check_definition1(traj, sys.spectral_radius())
    assert rep.mean_trend == "increasing" and rep.variance_trend == "increasing"
    assert all(r[-1] is None for r in rep.rows())


def test_short_horizon_is_flagged():
    spec = example_spec(3.2)
    _, sys, traj = _trajectory(spec, 15)
    with pytest.raises(HorizonTooShort):
        check_definition1(traj, sys.spectral_radius())


def test_definition2_limits():
    M1, M2 = check_definition2(example_spec(3.2))
    assert M1 == 0.0 and abs(M2 - LIMIT_H32) < 1e-9
    with pytest.raises(NotStringStable):
        check_definition2(example_spec(2.4))


def test_sequence_trend_labels():
    assert sequence_trend(1.0 + 0.5 ** np.arange(30)) == "convergent"
    assert sequence_trend(1.1 ** np.arange(30)) == "increasing"
    assert sequence_trend(np.sin(np.arange(30))) == "mixed"


@settings(max_examples=100, deadline=None)
@given(
    st.floats(2.0, 6.0),
    st.floats(0.6, 2.5),
    st.floats(0.3, 0.95),
    st.integers(1, 6),
    st.integers(0, 2**32 - 1),
)
def test_bounds_hold_for_random_string_stable_platoons(h, gain, pole, N, seed):
    base = PlatoonSpec(plant(), lead_controller(h, gain, pole), h, N, 0.5)
    loop = build_vehicle_loop(base)
    assume(np.abs(loop.T.poles()).max() < 0.9)
    assume(certify_loop(loop.T, grid=FrequencyGrid.uniform(2**12)).string_stable)
    rng = np.random.default_rng(seed)
    dim = loop.T_ss.n * N
    changes = tuple(sorted((int(k), float(v)) for k, v in zip(rng.choice(20, 2, replace=False), rng.normal(size=2))))
    leader = LeaderProfile(kind="piecewise", base_speed=0.0, speed_changes=changes)
    # the variance bound's initial-state term is only claimed for a zero P_xi(0)
    init = InitialCondition(rng.normal(size=dim), np.zeros((dim, dim)))
    spec = base.replace(leader=leader, init=init)
    horizon = 800
    _, sys, traj = _trajectory(spec, horizon)
    bounds = (mean_bound(spec, horizon, loop), variance_bound(spec, loop))
    rep = check_definition1(traj, sys.spectral_radius(), bounds)
    assert np.all(rep.satisfied)


def test_initial_covariance_term_is_not_a_bound_in_general():
    # a string-stable loop whose free response amplifies P_xi(0) = I past alpha2
    h, gain, pole = 3.618207359286113, 0.9771747845675851, 0.3589894796524292
    spec = PlatoonSpec(plant(), lead_controller(h, gain, pole), h, 2, 0.0, leader=LeaderProfile())
    loop = build_vehicle_loop(spec)
    assert certify(spec).string_stable
    dim = loop.T_ss.n * 2
    spec = spec.replace(init=InitialCondition(np.zeros(dim), np.eye(dim)))
    _, _, traj = _trajectory(spec, 300)
    vb = variance_bound(spec, loop)
    assert traj.variances.max() > 1.1 * vb.total
