import dataclasses
import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import P_F, identity_region, preset_parts
from etnmpc.errors import (InvalidConfiguration, NotStabilizableError, NotStabilizedError,
                           StateError)
from etnmpc.model import chen_allgower, linear_model
from etnmpc.terminal import (assemble_region, closed_loop_matrix, contains, design_local_gain,
                             find_epsilon, fixture_notes, invariance_check, is_hurwitz,
                             lambda_min_qp, lyapunov_residual, set_T_star_0, solve_lyapunov,
                             stage_weight, validate_region)

A_BENCH = np.array([[0.0, 1.0], [1.0, 0.0]])
B_BENCH = np.array([[0.8], [0.8]])
Q_BENCH = 0.1 * np.eye(2)
R_BENCH = np.array([[0.05]])


def test_lyapunov_identity():
    assert np.allclose(solve_lyapunov(-np.eye(2), 2 * np.eye(2)), np.eye(2), atol=1e-14)


def test_lyapunov_residual_by_substitution():
    A = np.array([[0.0, 1.0], [-2.0, -3.0]])
    P = solve_lyapunov(A, np.eye(2))
    assert np.linalg.norm(P @ A + A.T @ P + np.eye(2), 2) <= 1e-10


def test_lyapunov_agrees_with_scipy():
    A = np.array([[-1.0, 2.0, 0.0], [0.0, -3.0, 1.0], [0.5, 0.0, -2.0]])
    M = np.diag([1.0, 2.0, 3.0])
    assert np.allclose(solve_lyapunov(A, M), sla.solve_continuous_lyapunov(A.T, -M), atol=1e-12)


def test_lyapunov_rejects_unstable():
    with pytest.raises(NotStabilizedError):
        solve_lyapunov(A_BENCH, np.eye(2))


def test_scalar_riccati_gain():
    assert np.allclose(design_local_gain([[0.0]], [[1.0]], [[1.0]], [[1.0]]), [[-1.0]], atol=1e-12)


def test_benchmark_gain_matches_care_and_reference():
    K = design_local_gain(A_BENCH, B_BENCH, Q_BENCH, R_BENCH)
    P = sla.solve_continuous_are(A_BENCH, B_BENCH, Q_BENCH, R_BENCH)
    assert np.allclose(K, -np.linalg.solve(R_BENCH, B_BENCH.T @ P), atol=1e-10)
    assert np.allclose(K, -1.8042, atol=1e-4)
    assert is_hurwitz(A_BENCH + B_BENCH @ K)


def test_gain_for_already_stable_plant():
    A = np.array([[-1.0, 0.3], [0.0, -2.0]])
    K = design_local_gain(A, [[1.0], [0.0]], np.eye(2) * 5, [[0.1]])
    assert is_hurwitz(A + np.array([[1.0], [0.0]]) @ K)


def test_gain_rejects_unstabilizable():
    with pytest.raises(NotStabilizableError):
        design_local_gain(np.diag([1.0, 2.0]), [[1.0], [0.0]], np.eye(2), [[1.0]])


def test_reference_P_is_a_rounded_lyapunov_solution():
    K = -1.8042 * np.ones((1, 2))
    A_c = closed_loop_matrix(A_BENCH, B_BENCH, K)
    M = stage_weight(Q_BENCH, R_BENCH, K)
    P = solve_lyapunov(A_c, M)
    assert lyapunov_residual(P, A_c, M) <= 1e-8
    assert np.allclose(P, P_F, atol=5e-5)  # agrees to the four printed digits
    assert lyapunov_residual(P_F, A_c, M) > 1e-8


def test_lambda_min_reference():
    K = -1.8042 * np.ones((1, 2))
    M = stage_weight(Q_BENCH, R_BENCH, K)
    assert np.allclose(M, [[0.26276, 0.16276], [0.16276, 0.26276]], atol=1e-5)
    lam, QP = lambda_min_qp(P_F, M)
    assert lam == pytest.approx(0.1 / 0.05, abs=1e-10)  # ratio along (1, -1)
    assert lam == pytest.approx(np.linalg.eigvalsh(QP)[0], abs=1e-10)


def test_assemble_identity_weighting():
    reg = identity_region(eps=0.3)
    assert reg.lambda_min_QP == pytest.approx(2.0)
    assert reg.w_hat_max == pytest.approx(0.3 / 2)


def test_assemble_rejects_bad_radii():
    with pytest.raises(InvalidConfiguration):
        identity_region(eps=0.08, eps_f=0.08)
    with pytest.raises(InvalidConfiguration):
        identity_region(alpha=1.0)


def test_w_tilde_high_precision():
    reg = set_T_star_0(identity_region(eps_f=0.08, L_f=0.53, alpha=0.8), 4.0)
    getcontext().prec = 40
    ref = Decimal(2) * Decimal("0.2") * Decimal("0.08") / (4 * Decimal("2.12").exp())
    assert reg.w_tilde_max == pytest.approx(float(ref), rel=1e-13)
    assert reg.w_tilde_max == pytest.approx(9.6e-4, rel=0.01)


def test_w_tilde_without_lipschitz_growth():
    reg = set_T_star_0(identity_region(L_f=0.0, alpha=0.8), 3.0)
    assert reg.w_tilde_max == pytest.approx(2.0 * 0.2 * 0.08 / 4)


@given(st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_w_tilde_decreases_in_alpha(a1, a2):
    lo, hi = sorted((a1, a2))
    w_lo = set_T_star_0(identity_region(alpha=lo), 2.0).w_tilde_max
    w_hi = set_T_star_0(identity_region(alpha=hi), 2.0).w_tilde_max
    assert w_hi <= w_lo


def test_T_star_0_set_once():
    reg = set_T_star_0(identity_region(), 2.0)
    with pytest.raises(StateError):
        set_T_star_0(reg, 1.0)


def test_containment():
    reg = identity_region(eps=1.0, eps_f=0.5)
    assert contains(reg, [0.0, 0.0], "inner") and contains(reg, [0.0, 0.0], "outer")
    assert contains(reg, [0.5, 0.0], "inner")  # boundary belongs to the set
    _, _, bench = preset_parts()
    assert not contains(bench, [0.2, 0.2], "inner")  # V_f = 0.009024 > 0.0064
    assert bench.V_f([0.2, 0.2]) == pytest.approx(0.009024)


def test_find_epsilon_limited_by_input_box():
    m = linear_model(A_BENCH, [[1.0], [0.0]], -2.0, 2.0)
    eps = find_epsilon(m, [[1.0, 0.0]], np.eye(2), np.eye(2), [[1.0]], n_samples=2000)
    assert 2.0 * 0.8 <= eps <= 2.0


def test_find_epsilon_on_benchmark_exceeds_inner_radius():
    K = -1.8042 * np.ones((1, 2))
    eps = find_epsilon(chen_allgower(), K, P_F, Q_BENCH, R_BENCH)
    assert eps > 0.08


def test_validate_linear_stub_has_no_violation():
    A = np.array([[0.0, 1.0], [-1.0, -1.0]])
    B = np.array([[0.0], [1.0]])
    m = linear_model(A, B, -10, 10)
    K = design_local_gain(A, B, np.eye(2), [[1.0]])
    P = solve_lyapunov(closed_loop_matrix(A, B, K), stage_weight(np.eye(2), [[1.0]], K))
    reg = assemble_region(P, K, 1.0, 0.5, 1.0, np.eye(2), [[1.0]], 0.5)
    rep = validate_region(reg, m, 2000)
    assert rep.max_decrease_violation <= 0 and rep.passed


def test_validate_benchmark_and_inflated_radius():
    cfg, model, reg = preset_parts()
    assert validate_region(reg, model).max_decrease_violation <= 1e-9
    big = dataclasses.replace(reg, epsilon=100 * reg.epsilon)
    rep = validate_region(big, model, 2000)
    assert rep.max_decrease_violation > 0 and not rep.passed


def test_invariance_under_w_hat():
    cfg, model, reg = preset_parts()
    assert invariance_check(reg, model, n_starts=20, n_disturbances=20, duration=2.0) <= 1 + 1e-6


def test_fixture_notes_flag_inconsistent_reference_values():
    cfg, model, reg = preset_parts()
    notes = fixture_notes(set_T_star_0(reg, 3.1), reported_w_hat=2e-3, reported_w_tilde=8.3e-4)
    assert len(notes) == 2


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(0.1, 5.0), st.floats(0.05, 2.0))
def test_synthesized_lyapunov_residual(q1, q2, r):
    K = design_local_gain(A_BENCH, B_BENCH, np.diag([q1, q2]), [[r]])
    A_c = closed_loop_matrix(A_BENCH, B_BENCH, K)
    M = stage_weight(np.diag([q1, q2]), [[r]], K)
    P = solve_lyapunov(A_c, M)
    assert lyapunov_residual(P, A_c, M) <= 1e-8 * max(1.0, np.abs(P).max())
    assert math.isclose(P[0, 1], P[1, 0])
