import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import P_F
from etnmpc import trigger as trig
from etnmpc.closed_loop import make_disturbance
from etnmpc.errors import ContractViolation
from etnmpc.model import (ControlTrajectory, DisturbanceSignal, SystemModel, WeightedNorm,
                          chen_allgower, estimate_lipschitz, eval_rhs, integrate_disturbed,
                          integrate_nominal, linear_model, linearize_at_origin, weighted_norm)


@pytest.fixture(scope="module")
def bench():
    return chen_allgower(0.8)


def test_rhs_vanishes_at_origin(bench):
    assert np.array_equal(eval_rhs(bench, [0.0, 0.0], [0.0]), [0.0, 0.0])


def test_rhs_by_hand(bench):
    assert np.allclose(eval_rhs(bench, [3.0, 0.0], [0.0]), [0.0, 3.0], atol=1e-15)
    # 1 + 0.8 + 0.2, 1 + 0.8 - 0.8
    assert np.allclose(eval_rhs(bench, [1.0, 1.0], [1.0]), [2.0, 1.0], atol=1e-15)


def test_rhs_rejects_wrong_dimension(bench):
    with pytest.raises(ContractViolation):
        eval_rhs(bench, [1.0, 2.0, 3.0], [0.0])


def test_model_needs_origin_equilibrium():
    with pytest.raises(ContractViolation):
        SystemModel(1, 1, lambda x, u: np.asarray(x) * 0 + 1.0, ([-1], [1]))


def test_model_needs_zero_input_admissible():
    with pytest.raises(ContractViolation):
        SystemModel(1, 1, lambda x, u: -np.asarray(x), ([0.5], [1.0]))


def test_weighted_norm_examples():
    assert weighted_norm(WeightedNorm(np.eye(2)), [3.0, 4.0]) == pytest.approx(5.0, abs=1e-15)
    assert weighted_norm(WeightedNorm(P_F), [1.0, 0.0]) == pytest.approx(math.sqrt(0.0814))
    assert weighted_norm(WeightedNorm(P_F), [0.0, 0.0]) == 0.0


def test_weighted_norm_rejects_indefinite():
    with pytest.raises(ContractViolation):
        WeightedNorm(np.array([[1.0, 2.0], [2.0, 1.0]]))


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
def test_weighted_norm_matches_quadratic_form(x):
    x = np.array(x)
    assert weighted_norm(WeightedNorm(P_F), x) ** 2 == pytest.approx(x @ P_F @ x, rel=1e-12,
                                                                    abs=1e-12)


def test_linearization(bench):
    A, B = linearize_at_origin(bench)
    assert np.array_equal(A, [[0, 1], [1, 0]])
    assert np.allclose(B, [[0.8], [0.8]])
    An, Bn = linearize_at_origin(bench, numeric=True)
    assert np.allclose(An, A, atol=1e-6) and np.allclose(Bn, B, atol=1e-6)


def test_linearization_of_linear_stub():
    A = np.array([[0.0, 2.0], [-1.0, -3.0]])
    B = np.array([[1.0], [0.5]])
    A_f, B_f = linearize_at_origin(linear_model(A, B))
    assert np.array_equal(A_f, A) and np.array_equal(B_f, B)


def _zero_u(duration, m=1):
    return ControlTrajectory(0.0, duration, np.zeros((1, m)))


def test_constant_stub_stays_put():
    m = linear_model(np.zeros((2, 2)), np.zeros((2, 1)))
    traj = integrate_nominal(m, [1.0, 2.0], _zero_u(3.0), 3.0, 0.01)
    assert np.array_equal(traj.states, np.tile([1.0, 2.0], (301, 1)))


def test_exponential_decay():
    m = linear_model([[-1.0]], [[0.0]])
    traj = integrate_nominal(m, [1.0], _zero_u(1.0), 1.0, 1e-3)
    assert abs(traj.final[0] - math.exp(-1.0)) <= 1e-6


def test_rk4_is_fourth_order():
    m = linear_model([[-1.0]], [[0.0]])
    err = [abs(integrate_nominal(m, [1.0], _zero_u(1.0), 1.0, h).final[0] - math.exp(-1))
           for h in (0.1, 0.05)]
    assert err[0] / err[1] >= 8


def test_step_halving_on_benchmark(bench):
    u = ControlTrajectory(0.0, 0.5, np.full((2, 1), -0.3))
    a = integrate_nominal(bench, [3.0, 0.0], u, 1.0, 1e-3).final
    b = integrate_nominal(bench, [3.0, 0.0], u, 1.0, 5e-4).final
    assert np.linalg.norm(a - b) < 1e-6


def test_zero_disturbance_is_nominal(bench):
    u = ControlTrajectory(0.0, 0.25, np.linspace(-1, 1, 4)[:, None])
    w = DisturbanceSignal.zero(2)
    a = integrate_disturbed(bench, [1.0, -1.0], u, w, 1.0, 0.01)
    b = integrate_nominal(bench, [1.0, -1.0], u, 1.0, 0.01)
    assert np.array_equal(a.states, b.states)


def test_constant_disturbance_drifts_linearly():
    m = linear_model(np.zeros((2, 2)), np.zeros((2, 1)))
    c = np.array([0.3, -0.7])
    w = DisturbanceSignal(0.0, 10.0, c[None, :])
    traj = integrate_disturbed(m, [1.0, 1.0], _zero_u(2.0), w, 2.0, 0.01)
    assert np.allclose(traj.final, [1.0, 1.0] + 2.0 * c, atol=1e-9)


def test_disturbed_deviation_within_gronwall_envelope(bench):
    # held disturbance capped at w; the envelope uses the (over-)estimated modulus
    L = estimate_lipschitz(bench, WeightedNorm(P_F), 5.0, 5000, 0)
    w_max = 1e-3
    u = ControlTrajectory(0.0, 0.1, np.full((20, 1), -0.5))
    w = make_disturbance(w_max, 0.01, 2.0, 3, P_F)
    x0 = [1.0, 0.5]
    a = integrate_disturbed(bench, x0, u, w, 2.0, 1e-3)
    b = integrate_nominal(bench, x0, u, 2.0, 1e-3)
    dev = weighted_norm(WeightedNorm(P_F), a.states - b.states)
    env = np.array([trig.deviation_bound(w_max, L, t) for t in a.times])
    assert np.all(dev <= env + 1e-12)


def test_integration_contracts(bench):
    u = ControlTrajectory(0.0, 0.1, np.zeros((10, 1)))
    with pytest.raises(ContractViolation):
        integrate_nominal(bench, [0.0, 0.0], u, 2.0, 0.01)  # beyond the input horizon
    with pytest.raises(ContractViolation):
        integrate_nominal(bench, [0.0, 0.0], u, 1.0, 0.03)  # step does not divide segments
    with pytest.raises(ContractViolation):
        integrate_nominal(bench, [0.0, 0.0], ControlTrajectory(0.0, 1.0, [[5.0]]), 1.0, 0.1)


def test_control_trajectory_rejects_bad_width():
    with pytest.raises(ContractViolation):
        ControlTrajectory(0.0, 0.0, [[1.0]])


def test_lipschitz_of_diagonal_stub():
    m = linear_model(np.diag([-1.0, -2.0]), np.zeros((2, 1)))
    L = estimate_lipschitz(m, WeightedNorm(np.eye(2)), 1.0, 20_000, 0)
    assert 2.0 <= L <= 2.1


def test_lipschitz_of_state_independent_stub():
    m = linear_model(np.zeros((2, 2)), np.ones((2, 1)), -1.0, 1.0)
    assert estimate_lipschitz(m, WeightedNorm(np.eye(2)), 1.0, 2000, 0) == 0.0


def test_lipschitz_prefix_monotone(bench):
    P = WeightedNorm(P_F)
    small = estimate_lipschitz(bench, P, 1.0, 2000, 5)
    large = estimate_lipschitz(bench, P, 1.0, 6000, 5)
    assert large >= small


def test_lipschitz_floor_from_linear_part(bench):
    # the swap matrix is an isometry in this norm, so no estimate can fall below 1
    assert estimate_lipschitz(bench, WeightedNorm(P_F), 0.1, 5000, 0) >= 1.0


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(1e-3, 0.1), st.integers(0, 2**31))
def test_disturbance_respects_cap(bound, hold, seed):
    w = make_disturbance(bound, hold, 1.0, seed, P_F)
    assert np.all(weighted_norm(WeightedNorm(P_F), w.samples) <= bound)
