from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmhe import genmodel as gm
from gridmhe.errors import InvalidParametersError
from gridmhe.simulator import init_generator

from conftest import central_diff, gen_params, gen_states, rel_err

ROUND = gm.GeneratorParams(H=3.0, D=1.0, x_d=1.0, x_q=0.8, x_d_t=0.2, x_q_t=0.2,
                           T_d0_t=6.0, T_q0_t=0.5)
SP = gm.GeneratorSetpoints(p_ref=0.8, v_ref=1.05)


def state(**kw):
    x = np.zeros(gm.N_STATES)
    for k, v in kw.items():
        x[gm.STATE_NAMES.index(k)] = v
    return x


def stator_oracle(x, v, theta, p):
    # generator convention written out by hand, solved with a dense solver
    A = np.array([[p.r_s, -p.x_q_t], [p.x_d_t, p.r_s]])
    ang = theta - x[gm.DELTA]
    rhs = np.array([v * np.sin(ang) + x[gm.E_D], -v * np.cos(ang) + x[gm.E_Q]])
    return np.linalg.solve(A, rhs), A, rhs


# --- parameters -------------------------------------------------------------

@pytest.mark.parametrize("field,value", [("H", 0.0), ("T_d0_t", -1.0), ("R_droop", 0.0),
                                         ("S_n", 0.0), ("r_s", -0.1), ("x_d_t", 2.0)])
def test_params_reject_invalid(field, value):
    kw = dict(H=3.0, D=1.0, x_d=1.0, x_q=0.8, x_d_t=0.2, x_q_t=0.2, T_d0_t=6.0, T_q0_t=0.5)
    kw[field] = value
    with pytest.raises(InvalidParametersError):
        gm.GeneratorParams(**kw)


def test_setpoints_need_positive_voltage():
    with pytest.raises(InvalidParametersError):
        gm.GeneratorSetpoints(p_ref=1.0, v_ref=0.0)


def test_from_dict_rejects_unknown_names():
    with pytest.raises(InvalidParametersError):
        gm.GeneratorParams.from_dict({"H": 1.0, "bogus": 2.0})


def test_state_order():
    assert gm.STATE_NAMES == ("delta", "d_omega", "e_d_t", "e_q_t", "p_sv", "p_m", "E_fd", "R_f", "V_R")
    s = gm.GeneratorState.from_array(np.arange(9.0))
    assert s.E_fd == 6.0 and s.V_R == 8.0


# --- stator ------------------------------------------------------------------

def test_dq_current_no_load():
    c = gm.dq_current(state(e_q_t=1.0), 1.0, 0.0, ROUND)
    assert c == (0.0, 0.0)


def test_dq_current_overexcited():
    # 0.1 p.u. of excess EMF over 0.2 p.u. reactance drives 0.5 p.u. along d
    x = state(e_q_t=1.1)
    c = gm.dq_current(x, 1.0, 0.0, ROUND)
    ref, _, _ = stator_oracle(x, 1.0, 0.0, ROUND)
    assert c == pytest.approx((0.5, 0.0), abs=1e-14)
    assert np.allclose(c, ref, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(gen_params(), gen_states(), st.floats(0.8, 1.2), st.floats(-3.0, 3.0))
def test_dq_current_solves_stator_system(p, x, v, theta):
    c = np.array(gm.dq_current(x, v, theta, p))
    ref, A, rhs = stator_oracle(x, v, theta, p)
    assert np.linalg.norm(A @ c - rhs) <= 1e-12 * max(1.0, np.linalg.norm(rhs))
    assert np.allclose(c, ref, rtol=1e-12, atol=1e-12)


def test_dq_current_residual_with_resistance():
    p = gm.GeneratorParams(H=3.0, D=1.0, x_d=1.0, x_q=0.8, x_d_t=0.25, x_q_t=0.3,
                           T_d0_t=6.0, T_q0_t=0.5, r_s=0.01)
    x = state(delta=0.4, e_d_t=0.2, e_q_t=1.05)
    c = np.array(gm.dq_current(x, 1.01, 0.1, p))
    _, A, rhs = stator_oracle(x, 1.01, 0.1, p)
    assert np.max(np.abs(A @ c - rhs)) <= 1e-15


# --- power and rotation ------------------------------------------------------

def test_electric_power_zero_current():
    assert gm.electric_power(state(e_q_t=1.0, e_d_t=0.3), gm.DqCurrent(0.0, 0.0), ROUND) == 0.0


def test_electric_power_round_rotor():
    x = state(e_q_t=1.0)
    assert gm.electric_power(x, gm.DqCurrent(0.7, 0.5), ROUND) == pytest.approx(0.5, abs=1e-15)


def test_electric_power_salient():
    p = gm.GeneratorParams(H=3.0, D=1.0, x_d=1.0, x_q=0.8, x_d_t=0.3, x_q_t=0.2, T_d0_t=6.0, T_q0_t=0.5)
    x = state(e_d_t=0.1, e_q_t=1.0)
    i_d, i_q = 0.2, 0.5
    # air-gap power from the internal EMF behind the transient reactances
    e = complex(x[gm.E_D] + (p.x_q_t - p.x_d_t) * i_q, x[gm.E_Q])
    ref = (e * complex(i_d, -i_q)).real
    assert ref == pytest.approx(0.51, abs=1e-14)
    assert gm.electric_power(x, gm.DqCurrent(i_d, i_q), p) == pytest.approx(ref, abs=1e-14)


def test_electric_power_equals_terminal_power_plus_losses():
    p = gm.GeneratorParams(H=3.0, D=1.0, x_d=1.0, x_q=0.8, x_d_t=0.3, x_q_t=0.25,
                           T_d0_t=6.0, T_q0_t=0.5, r_s=0.02)
    x = state(delta=0.7, e_d_t=0.15, e_q_t=1.1)
    v, th = 1.02, 0.2
    c = gm.dq_current(x, v, th, p)
    I = gm.machine_to_network(c, x[gm.DELTA], 1.0, 1.0)
    S = v * np.exp(1j * th) * np.conj(complex(*I))
    assert gm.electric_power(x, c, p) == pytest.approx(S.real + p.r_s * (c[0] ** 2 + c[1] ** 2), abs=1e-13)


def test_rotation_examples():
    assert np.allclose(gm.machine_to_network(gm.DqCurrent(0.3, -0.4), np.pi / 2, 1.0, 1.0), (0.3, -0.4),
                       atol=1e-15)
    assert np.allclose(gm.machine_to_network(gm.DqCurrent(1.0, 0.0), 0.0, 1.0, 1.0), (0.0, -1.0), atol=1e-15)


def test_rotation_rejects_bad_bases():
    with pytest.raises(InvalidParametersError):
        gm.machine_to_network(gm.DqCurrent(1.0, 0.0), 0.0, 0.0, 1.0)


@given(st.floats(-10, 10), st.floats(-2, 2), st.floats(-2, 2), st.floats(1.0, 500.0), st.floats(1.0, 500.0))
def test_rotation_scales_norm(delta, i_d, i_q, S_n, S_b):
    out = gm.machine_to_network(gm.DqCurrent(i_d, i_q), delta, S_n, S_b)
    assert abs(np.hypot(*out) - S_n / S_b * np.hypot(i_d, i_q)) <= 1e-12 * max(1.0, S_n / S_b)
    # the same map in complex form: (i_d + j i_q) rotated by delta - pi/2
    z = S_n / S_b * complex(i_d, i_q) * np.exp(1j * (delta - np.pi / 2))
    assert np.allclose(out, (z.real, z.imag), rtol=1e-12, atol=1e-12)


@given(gen_params(), gen_states(), st.floats(0.8, 1.2), st.floats(-3, 3))
def test_injection_at_equal_bases_is_plain_rotation(p, x, v, theta):
    p1 = replace(p, S_n=1.0)
    c = gm.dq_current(x, v, theta, p1)
    assert gm.generator_injection(x, v, theta, p1, 1.0) == gm.machine_to_network(c, x[gm.DELTA], 1.0, 1.0)


def test_injection_examples():
    assert gm.generator_injection(state(delta=0.3, e_q_t=1.0), 1.0, 0.3, ROUND, 1.0) == (0.0, 0.0)
    out = gm.generator_injection(state(delta=np.pi / 2, e_q_t=1.1), 1.0, np.pi / 2, ROUND, 1.0)
    assert np.allclose(out, (0.5, 0.0), atol=1e-14)


# --- dynamics ----------------------------------------------------------------

def test_rotor_angle_rate():
    f = gm.sg_derivatives(state(d_omega=0.01, e_q_t=1.0), 1.0, 0.0, ROUND, SP)
    assert f[gm.DELTA] == pytest.approx(np.pi, rel=1e-15)


def test_swing_acceleration():
    p = gm.GeneratorParams(H=0.5, D=0.0, x_d=1.0, x_q=0.8, x_d_t=0.2, x_q_t=0.2, T_d0_t=6.0, T_q0_t=0.5)
    f = gm.sg_derivatives(state(e_q_t=1.0, p_m=1.0), 1.0, 0.0, p, SP)
    assert f[gm.D_OMEGA] == pytest.approx(1.0, abs=1e-15)


def test_euler_step_rotor_angle():
    x = state(d_omega=0.01, e_q_t=1.0)
    x1 = gm.euler_step(x, 1.0, 0.0, ROUND, SP, 0.01)
    assert x1[gm.DELTA] - x[gm.DELTA] == pytest.approx(0.01 * np.pi, rel=1e-14)


def test_euler_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        gm.euler_step(state(e_q_t=1.0), 1.0, 0.0, ROUND, SP, 0.0)


def test_state_shape_checked():
    with pytest.raises(ValueError):
        gm.sg_derivatives(np.zeros(8), 1.0, 0.0, ROUND, SP)


@settings(max_examples=60, deadline=None)
@given(gen_params(), st.floats(0.9, 1.1), st.floats(-0.5, 0.5), st.floats(0.0, 1.5), st.floats(-0.5, 0.8))
def test_equilibrium_has_zero_derivatives(p, v, theta, P, Q):
    S_b = 100.0
    x, sp = init_generator(p, v, theta, P, Q, S_b)
    assert np.max(np.abs(gm.sg_derivatives(x, v, theta, p, sp))) <= 1e-8
    assert np.max(np.abs(gm.euler_step(x, v, theta, p, sp, 0.01) - x)) <= 1e-8
    # scheduled current: conj(S / V)
    I = np.conj(complex(P, Q) / (v * np.exp(1j * theta)))
    assert np.allclose(gm.generator_injection(x, v, theta, p, S_b), (I.real, I.imag), atol=1e-8)


def test_euler_first_order():
    p, x = ROUND, state(delta=0.2, d_omega=0.002, e_d_t=0.05, e_q_t=1.05, p_sv=0.7, p_m=0.7,
                        E_fd=1.8, R_f=0.3, V_R=1.8)
    v, th = 1.0, 0.0

    def flow(h, n):
        y = x
        for _ in range(n):
            y = gm.euler_step(y, v, th, p, SP, h)
        return y

    err = [np.max(np.abs(flow(h, 2) - flow(2 * h, 1))) for h in (4e-3, 2e-3, 1e-3)]
    # one step vs two half steps differ by O(dt^2)
    assert err[0] / err[1] == pytest.approx(4.0, rel=0.05)
    assert err[1] / err[2] == pytest.approx(4.0, rel=0.05)


# --- Jacobians ---------------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(gen_params(), gen_states(), st.floats(0.8, 1.2), st.floats(-3.0, 3.0))
def test_sg_jacobian_matches_finite_differences(p, x, v, theta):
    sp = gm.GeneratorSetpoints(0.9, 1.05)
    z = np.concatenate([x, [v, theta]])
    J = gm.sg_jacobian(x, v, theta, p, sp)
    Jfd = central_diff(lambda z: gm.sg_derivatives(z[:9], z[9], z[10], p, sp), z)
    assert J.shape == (9, 11)
    assert rel_err(J, Jfd) <= 1e-6


@settings(max_examples=80, deadline=None)
@given(gen_params(), gen_states(), st.floats(0.8, 1.2), st.floats(-3.0, 3.0))
def test_injection_jacobian_matches_finite_differences(p, x, v, theta):
    z = np.concatenate([x, [v, theta]])
    J = gm.injection_jacobian(x, v, theta, p, 100.0)
    Jfd = central_diff(lambda z: np.array(gm.generator_injection(z[:9], z[9], z[10], p, 100.0)), z)
    assert rel_err(J, Jfd) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(gen_params(), gen_states(), st.floats(0.8, 1.2), st.floats(-3.0, 3.0))
def test_euler_jacobian_matches_finite_differences(p, x, v, theta):
    z = np.concatenate([x, [v, theta]])
    J = gm.euler_jacobian(x, v, theta, p, SP, 0.01)
    Jfd = central_diff(lambda z: gm.euler_step(z[:9], z[9], z[10], p, SP, 0.01), z)
    assert rel_err(J, Jfd) <= 1e-6
