import numpy as np
import pytest
from hypothesis import strategies as st

from gridmhe import genmodel as gm
from gridmhe.config import bundled, load_system
from gridmhe.network import NetworkModel, NetworkState
from gridmhe.simulator import initialize


def central_diff(f, x, eps=1e-6):
    """Central finite-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    J = np.zeros((f0.size, x.size))
    for k in range(x.size):
        h = eps * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        J[:, k] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2 * h)
    return J


def rel_err(A, B):
    A, B = np.asarray(A), np.asarray(B)
    return float(np.max(np.abs(A - B)) / max(1.0, np.max(np.abs(B))))


@pytest.fixture(scope="session")
def system5():
    return load_system(bundled("system5"))


@pytest.fixture(scope="session")
def steady5(system5):
    """Power-flow state, generator equilibria and load shunts of the bundled system."""
    return initialize(system5.net, system5.gens, system5.schedule, system5.loads)


finite = dict(allow_nan=False, allow_infinity=False)


@st.composite
def gen_params(draw):
    x_d_t = draw(st.floats(0.1, 0.5))
    x_q_t = draw(st.floats(0.1, 0.6))
    return gm.GeneratorParams(
        H=draw(st.floats(1.0, 8.0)), D=draw(st.floats(0.0, 2.0)),
        x_d=x_d_t + draw(st.floats(0.2, 1.8)), x_q=x_q_t + draw(st.floats(0.2, 1.8)),
        x_d_t=x_d_t, x_q_t=x_q_t,
        T_d0_t=draw(st.floats(2.0, 9.0)), T_q0_t=draw(st.floats(0.3, 1.5)),
        r_s=draw(st.floats(0.0, 0.02)), S_n=draw(st.floats(50.0, 300.0)))


@st.composite
def gen_states(draw):
    vals = [draw(st.floats(-3.0, 3.0)), draw(st.floats(-0.02, 0.02)),
            draw(st.floats(-0.5, 0.5)), draw(st.floats(0.6, 1.3)),
            draw(st.floats(0.0, 1.5)), draw(st.floats(0.0, 1.5)),
            draw(st.floats(1.0, 3.0)), draw(st.floats(0.0, 0.5)), draw(st.floats(0.5, 3.0))]
    return np.array(vals)


@st.composite
def networks(draw, max_n=6):
    """Random connected network: a spanning tree plus a few extra branches."""
    n = draw(st.integers(2, max_n))
    edges = {(draw(st.integers(0, i - 1)), i) for i in range(1, n)}
    for _ in range(draw(st.integers(0, n))):
        i, j = draw(st.integers(0, n - 1)), draw(st.integers(0, n - 1))
        if i != j:
            edges.add((min(i, j), max(i, j)))
    branches = [(i, j, draw(st.floats(0.0, 5.0)), -draw(st.floats(1.0, 30.0))) for i, j in sorted(edges)]
    sg = np.array([draw(st.floats(0.0, 0.3)) for _ in range(n)])
    sb = np.array([draw(st.floats(-0.3, 0.3)) for _ in range(n)])
    return NetworkModel(n, branches, sg, sb, S_b=100.0)


@st.composite
def net_states(draw, n):
    v = np.array([draw(st.floats(0.8, 1.2)) for _ in range(n)])
    th = np.array([draw(st.floats(-1.0, 1.0)) for _ in range(n)])
    return NetworkState(v, th)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
