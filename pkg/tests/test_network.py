import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmhe.network import (DEGENERATE_CURRENT, MeasurementSpec, NetworkModel, NetworkState,
                             branch_current, channel_labels, injection_jacobian, injections, measure,
                             measurement_model, nodal_injection, wrap_angle)

from conftest import central_diff, net_states, networks, rel_err


def ybus_oracle(net):
    Y = np.zeros((net.n, net.n), dtype=complex)
    for i, j, g, b in net.branches:
        y = complex(g, b)
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    Y[np.diag_indices(net.n)] += net.shunt_g + 1j * net.shunt_b
    return Y


def two_bus():
    return NetworkModel(2, [(0, 1, 0.0, -10.0)], None, None)


# --- model invariants -----------------------------------------------------------

def test_node_sets_must_be_disjoint():
    with pytest.raises(ValueError):
        NetworkModel(3, [(0, 1, 0, -5), (1, 2, 0, -5)], None, None, gen_nodes={0}, zero_nodes={0})


@pytest.mark.parametrize("branches", [[(0, 0, 0, -5)], [(0, 3, 0, -5)], [(0, 1, 0, -5), (1, 0, 0, -4)]])
def test_bad_branches_rejected(branches):
    with pytest.raises((ValueError, IndexError)):
        NetworkModel(3, branches, None, None)


def test_base_power_positive():
    with pytest.raises(ValueError):
        NetworkModel(2, [(0, 1, 0, -5)], None, None, S_b=0.0)


def test_state_rejects_nonpositive_magnitude():
    with pytest.raises(ValueError):
        NetworkState(np.array([1.0, 0.0]), np.zeros(2))


@given(networks())
def test_neighbors_symmetric(net):
    for i in range(net.n):
        for j in net.neighbors[i]:
            assert i in net.neighbors[j]


def test_labels_are_one_based():
    specs = [MeasurementSpec.voltage(3), MeasurementSpec.flow(3, 4), MeasurementSpec.injection(0)]
    assert channel_labels(specs) == ["V4.mag", "V4.ang", "I4-5.mag", "I4-5.ang", "Iinj1.mag", "Iinj1.ang"]


def test_spec_validation():
    net = NetworkModel(3, [(0, 1, 0, -5), (1, 2, 0, -5)], None, None)
    with pytest.raises((ValueError, KeyError)):
        MeasurementSpec.flow(0, 2).validate(net)
    with pytest.raises((ValueError, IndexError)):
        MeasurementSpec.voltage(5).validate(net)
    with pytest.raises(ValueError):
        MeasurementSpec("power", (0,))


# --- injections -------------------------------------------------------------------

def test_flat_profile_without_shunts_has_no_injection():
    net = NetworkModel(3, [(0, 1, 1.0, -5.0), (1, 2, 2.0, -8.0)], None, None)
    assert np.all(injections(NetworkState.flat(3), net) == 0.0)


def test_two_bus_injection():
    net = two_bus()
    s = NetworkState(np.array([1.05, 1.0]), np.zeros(2))
    I = ybus_oracle(net) @ s.phasors
    assert np.allclose(nodal_injection(s, net, 0), (0.0, -0.5), atol=1e-14)
    assert np.allclose(nodal_injection(s, net, 0), (I[0].real, I[0].imag), atol=1e-14)


def test_shunt_only_node():
    net = NetworkModel(1, [], [0.1], [0.2])
    assert np.allclose(nodal_injection(NetworkState.flat(1), net, 0), (0.1, 0.2), atol=1e-15)


def test_out_of_range_node():
    with pytest.raises(IndexError):
        nodal_injection(NetworkState.flat(2), two_bus(), 2)


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_injection_matches_admittance_oracle(data):
    net = data.draw(networks())
    s = data.draw(net_states(net.n))
    I = ybus_oracle(net) @ s.phasors
    got = injections(s, net)
    assert np.max(np.abs(got[:, 0] - I.real)) <= 1e-12
    assert np.max(np.abs(got[:, 1] - I.imag)) <= 1e-12
    for i in range(net.n):
        assert np.allclose(nodal_injection(s, net, i), got[i], rtol=0, atol=1e-12)


@given(st.data())
def test_series_network_conserves_current(data):
    net = data.draw(networks())
    net = NetworkModel(net.n, [(i, j, 0.0, b) for i, j, _, b in net.branches], None, None)
    s = data.draw(net_states(net.n))
    got = injections(s, net)
    assert np.max(np.abs(got.sum(axis=0))) <= 1e-12
    # lossless: the active power injected sums to zero as well
    S = s.phasors * np.conj(got[:, 0] + 1j * got[:, 1])
    assert abs(S.real.sum()) <= 1e-11


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_injection_jacobian_matches_finite_differences(data):
    net = data.draw(networks())
    s = data.draw(net_states(net.n))
    J = injection_jacobian(s, net)
    Jfd = central_diff(lambda y: injections(NetworkState.from_vector(y), net).ravel(), s.as_vector())
    assert rel_err(J, Jfd) <= 1e-6


# --- branch currents and measurements -----------------------------------------------

def test_branch_current_examples():
    net = two_bus()
    assert branch_current(NetworkState.flat(2), net, 0, 1) == (0.0, 0.0)
    s = NetworkState(np.array([1.05, 1.0]), np.zeros(2))
    assert np.allclose(branch_current(s, net, 0, 1), (0.0, -0.5), atol=1e-14)


@given(st.data())
def test_branch_current_antisymmetric(data):
    net = data.draw(networks())
    s = data.draw(net_states(net.n))
    for i, j, _, _ in net.branches:
        a, b = branch_current(s, net, i, j), branch_current(s, net, j, i)
        assert np.allclose(a, -np.asarray(b), atol=1e-15)


def test_unknown_branch():
    with pytest.raises(KeyError):
        branch_current(NetworkState.flat(3), NetworkModel(3, [(0, 1, 0, -5)], None, None), 0, 2)


def test_voltage_channel_is_identity():
    net = NetworkModel(3, [(0, 1, 0, -5), (1, 2, 0, -5)], None, None)
    s = NetworkState(np.array([1.0, 1.02, 0.97]), np.array([0.0, 0.1, -0.2]))
    assert measure(s, net, MeasurementSpec.voltage(1)) == (1.02, 0.1)


def test_current_channel_polar():
    net = two_bus()
    s = NetworkState(np.array([1.05, 1.0]), np.zeros(2))
    mag, ph = measure(s, net, MeasurementSpec.injection(0))
    assert mag == pytest.approx(0.5, abs=1e-14)
    assert ph == pytest.approx(-np.pi / 2, abs=1e-14)


def test_zero_injection_is_degenerate():
    # node 1 sits between two equal sources: no current flows into it
    net = NetworkModel(3, [(0, 1, 0, -5), (1, 2, 0, -5)], None, None, zero_nodes={1})
    s = NetworkState(np.ones(3), np.zeros(3))
    vals, _, degenerate = measurement_model(s, net, [MeasurementSpec.injection(1)])
    assert vals[0] == 0.0 and vals[1] == 0.0
    assert degenerate[0]
    assert DEGENERATE_CURRENT == 1e-9


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_measurement_jacobian_matches_finite_differences(data):
    net = data.draw(networks())
    s = data.draw(net_states(net.n))
    specs = [MeasurementSpec.voltage(0), MeasurementSpec.injection(net.n - 1)]
    specs += [MeasurementSpec.flow(i, j) for i, j, _, _ in net.branches[:3]]
    vals, J, degenerate = measurement_model(s, net, specs)
    if np.any(vals[0::2][1:] < 1e-3):
        return  # polar phase is ill-conditioned near the origin

    def f(y):
        out, _, _ = measurement_model(NetworkState.from_vector(y), net, specs)
        out = out.copy()
        out[1::2] = vals[1::2] + wrap_angle(out[1::2] - vals[1::2])
        return out

    Jfd = central_diff(f, s.as_vector(), eps=1e-7)
    assert rel_err(J, Jfd) <= 1e-6


@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(a), atol=1e-9) and np.isclose(np.sin(w), np.sin(a), atol=1e-9)


def test_wrap_angle_pi_maps_to_pi():
    assert wrap_angle(np.pi) == np.pi
    assert wrap_angle(-np.pi) == np.pi
